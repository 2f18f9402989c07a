mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokprune::adaptation::LabeledText;
use tokprune::bench::{
    run_experiment, sample_few_shot, speedup, time_embeddings, Dataset, ExperimentSettings,
};
use tokprune::encoder::embed_texts;
use tokprune::tokenizer::DEFAULT_MAX_LEN;
use tokprune::{Error, PruneConfig};

use common::{random_text, serial, synthetic_tasks, synthetic_vocab, tiny_model};

fn dataset(seed: u64) -> Dataset {
    let task = synthetic_tasks(1, 4, seed).remove(0);
    let mut examples = task.train;
    examples.extend(task.dev);
    Dataset::from_examples("synthetic", examples)
}

#[test]
fn few_shot_sampling_is_per_label_and_seeded() {
    let _serial = serial();
    let ds = dataset(1);
    let a = sample_few_shot(&ds, 3, 42).unwrap();
    let b = sample_few_shot(&ds, 3, 42).unwrap();
    assert_eq!(a, b);
    let mut counts = vec![0; ds.num_labels()];
    for id in a.dataset.label_ids() {
        counts[id] += 1;
    }
    assert_eq!(counts, vec![3; 4]);
    assert!(a.shortfalls.is_empty());
    assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    let rest = a.complement(&ds);
    assert_eq!(rest.len() + a.dataset.len(), ds.len());
    assert_eq!(rest.labels, ds.labels);

    let short = sample_few_shot(&ds, 100, 0).unwrap();
    assert_eq!(short.dataset.len(), ds.len());
    assert_eq!(short.shortfalls.len(), 4);
    assert!(matches!(sample_few_shot(&ds, 0, 0), Err(Error::Config(_))));
}

#[test]
fn timing_reports_every_run() {
    let _serial = serial();
    let model = tiny_model(2, 2, 16, 0);
    let vocab = synthetic_vocab();
    let report = time_embeddings(&model, &vocab, &["w1 w2 w3"], None, 7, 1).unwrap();
    assert_eq!(report.runs.len(), 7);
    assert!(report.runs.iter().all(|&t| t > 0.0));
    let mean = report.runs.iter().sum::<f64>() / 7.0;
    assert!((report.mean_seconds - mean).abs() < 1e-15);
    assert_eq!(report.thread_count, 1);
    assert!(report.config_used.is_none());
}

/// Median over interleaved pairs of `(t_unpruned - t_pruned) / t_unpruned`,
/// alternating which condition runs first. Machine-wide slowdowns hit both
/// members of a pair, so this is far steadier than comparing two means.
fn paired_gain<S: AsRef<str> + Sync>(texts: &[S], prune: &PruneConfig, pairs: usize) -> f64 {
    let model = tiny_model(4, 4, 64, 2);
    let vocab = synthetic_vocab();
    let time = |p: Option<&PruneConfig>| {
        let start = Instant::now();
        std::hint::black_box(embed_texts(&model, &vocab, texts, p, DEFAULT_MAX_LEN).unwrap());
        start.elapsed().as_secs_f64()
    };
    time(None);
    time(Some(prune));
    let mut gains: Vec<f64> = (0..pairs)
        .map(|i| {
            let (plain, pruned) = if i % 2 == 0 {
                let plain = time(None);
                (plain, time(Some(prune)))
            } else {
                let pruned = time(Some(prune));
                (time(None), pruned)
            };
            speedup(plain, pruned)
        })
        .collect();
    gains.sort_by(f64::total_cmp);
    gains[pairs / 2]
}

#[test]
fn gated_texts_show_no_speedup() {
    let _serial = serial();
    let texts = vec!["w7"; 512];
    let gain = paired_gain(&texts, &PruneConfig::recommended(), 31);
    assert!(
        gain.abs() <= 0.05,
        "speedup {gain} on texts that are never pruned"
    );
}

#[test]
fn long_texts_get_faster() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let texts: Vec<String> = (0..64)
        .map(|_| random_text(rng.random_range(30..40), &mut rng))
        .collect();
    let gain = paired_gain(&texts, &PruneConfig::recommended(), 21);
    assert!(
        gain > 0.0,
        "speedup {gain} on texts of at least twice the minimum length"
    );
}

#[test]
fn experiment_with_nothing_pruned_has_zero_delta() {
    let _serial = serial();
    let model = tiny_model(2, 2, 16, 5);
    let vocab = synthetic_vocab();
    let ds = dataset(9);
    let test = dataset(10);
    let settings = ExperimentSettings {
        runs: 2,
        threads: 1,
        ..Default::default()
    };
    let keep_all = PruneConfig::new(2, 1.0, 1).unwrap();
    let r = run_experiment(&model, &vocab, &ds, &test, 2, &keep_all, 7, &settings).unwrap();
    assert_eq!(r.accuracy_delta, 0.0);
    assert_eq!(r.train_examples, 8);
    assert_eq!(r.test_examples, test.len());
    assert_eq!(r.time_pruned.runs.len(), 2);
}

#[test]
fn unseen_test_labels_are_rejected() {
    let _serial = serial();
    let model = tiny_model(2, 2, 16, 5);
    let vocab = synthetic_vocab();
    let ds = dataset(9);
    let test = Dataset::from_examples("t", vec![LabeledText::new("w1", "mystery")]);
    let settings = ExperimentSettings {
        runs: 1,
        threads: 1,
        ..Default::default()
    };
    let r = run_experiment(
        &model,
        &vocab,
        &ds,
        &test,
        2,
        &PruneConfig::recommended(),
        0,
        &settings,
    );
    assert!(matches!(r, Err(Error::Label(_))));
}
