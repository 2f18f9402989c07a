mod common;

use std::time::Instant;

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokprune::bench::with_threads;
use tokprune::encoder::{attention, embed_tokens, encode, encode_traced, feed_forward};
use tokprune::PruneConfig;

use common::{max_abs_diff, random_batch, serial, synthetic_vocab, tiny_model};

#[test]
fn attention_rows_are_stochastic_at_every_layer() {
    let _serial = serial();
    let vocab_size = synthetic_vocab().len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let model = tiny_model(3, 4, 16, seed);
        let lengths: Vec<usize> = (0..4).map(|_| rng.random_range(2..20)).collect();
        let batch = random_batch(&lengths, vocab_size, &mut rng);
        let mut hidden = embed_tokens(&model, &batch).unwrap();
        for layer in &model.layers {
            let (attended, scores) = attention(&hidden, layer, &model.config).unwrap();
            let per_head = scores.per_head.as_ref().unwrap();
            for (b, &len) in lengths.iter().enumerate() {
                for h in 0..4 {
                    for i in 0..len {
                        let row = per_head.slice(s![b, h, i, ..]);
                        assert!((row.sum() - 1.0).abs() < 1e-5);
                        assert!(row.slice(s![len..]).iter().all(|&p| p == 0.0));
                    }
                }
                for i in 0..len {
                    assert!((scores.head_mean.slice(s![b, i, ..]).sum() - 1.0).abs() < 1e-5);
                }
            }
            hidden = feed_forward(&attended, layer, &model.config).unwrap();
            assert!(hidden.values.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn short_sentences_are_untouched_by_pruning() {
    let _serial = serial();
    let model = tiny_model(3, 2, 16, 11);
    let vocab_size = synthetic_vocab().len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&[6, 20, 25], vocab_size, &mut rng);
    let prune = PruneConfig::new(10, 0.5, 1).unwrap();
    let (pruned, trace) = encode_traced(&model, &batch, Some(&prune)).unwrap();
    let plain = encode(&model, &batch, None).unwrap();
    assert_eq!(trace.lengths_after_layer[0], vec![6, 10, 13]);
    assert!(max_abs_diff(pruned[0].as_slice(), plain[0].as_slice()) < 1e-6);
    // The long members really were pruned.
    assert!(max_abs_diff(pruned[1].as_slice(), plain[1].as_slice()) > 1e-6);
}

#[test]
fn pruning_at_a_later_layer_keeps_earlier_lengths() {
    let _serial = serial();
    let model = tiny_model(4, 2, 16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&[20], synthetic_vocab().len(), &mut rng);
    let prune = PruneConfig::new(15, 0.8, 3).unwrap();
    let (_, trace) = encode_traced(&model, &batch, Some(&prune)).unwrap();
    assert_eq!(
        trace.lengths_after_layer,
        vec![vec![20], vec![20], vec![16], vec![16]]
    );
}

#[test]
fn results_agree_across_thread_counts() {
    let _serial = serial();
    let model = tiny_model(2, 4, 32, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lengths: Vec<usize> = (0..80).map(|_| rng.random_range(2..40)).collect();
    let batch = random_batch(&lengths, synthetic_vocab().len(), &mut rng);
    let prune = PruneConfig::new(8, 0.6, 1).unwrap();
    for p in [None, Some(&prune)] {
        let one = with_threads(1, || encode(&model, &batch, p).unwrap()).unwrap();
        let again = with_threads(1, || encode(&model, &batch, p).unwrap()).unwrap();
        let four = with_threads(4, || encode(&model, &batch, p).unwrap()).unwrap();
        for ((a, b), c) in one.iter().zip(&again).zip(&four) {
            assert_eq!(a, b);
            assert!(max_abs_diff(a.as_slice(), c.as_slice()) < 1e-6);
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn pruned_encode_is_not_slower() {
    let _serial = serial();
    let model = tiny_model(4, 4, 64, 4);
    let s = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lengths: Vec<usize> = (0..64).map(|_| rng.random_range(2 * s..3 * s)).collect();
    let batch = random_batch(&lengths, synthetic_vocab().len(), &mut rng);
    let prune = PruneConfig::new(s, 0.5, 1).unwrap();
    let time = |p: Option<&PruneConfig>| {
        encode(&model, &batch, p).unwrap();
        median(
            (0..7)
                .map(|_| {
                    let start = Instant::now();
                    std::hint::black_box(encode(&model, &batch, p).unwrap());
                    start.elapsed().as_secs_f64()
                })
                .collect(),
        )
    };
    let (plain, pruned) = with_threads(1, || (time(None), time(Some(&prune)))).unwrap();
    assert!(
        pruned <= plain,
        "pruned {pruned:.5}s vs unpruned {plain:.5}s"
    );
}
