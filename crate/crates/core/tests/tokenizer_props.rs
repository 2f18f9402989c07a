mod common;

use proptest::prelude::*;
use tokprune::tokenizer::{encode_sentence, tokenize};

use common::synthetic_vocab;

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            (0usize..220).prop_map(|i| format!("w{i}")),
            Just("W12ing".to_string()),
            Just("?".to_string()),
            Just("zzz".to_string()),
            Just("Éw3".to_string()),
        ],
        0..40,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn batch_layout_invariants(texts in prop::collection::vec(text_strategy(), 1..6), max_len in 2usize..40) {
        let vocab = synthetic_vocab();
        let batch = tokenize(&texts, &vocab, max_len).unwrap();
        let again = tokenize(&texts, &vocab, max_len).unwrap();
        prop_assert_eq!(&batch, &again);
        for (b, text) in texts.iter().enumerate() {
            let len = batch.lengths[b];
            prop_assert!((2..=max_len).contains(&len));
            prop_assert_eq!(batch.pad_mask.row(b).iter().filter(|&&m| m).count(), len);
            let row = batch.row_ids(b);
            prop_assert_eq!(row[0], vocab.cls_id);
            prop_assert_eq!(row.iter().filter(|&&id| id == vocab.sep_id).count(), 1);
            prop_assert_eq!(row[len - 1], vocab.sep_id);
            for t in len..batch.max_len() {
                prop_assert_eq!(batch.ids[[b, t]], vocab.pad_id);
            }
            // Batch independence: same ids as tokenizing alone.
            prop_assert_eq!(row, encode_sentence(text, &vocab, max_len));
        }
    }
}
