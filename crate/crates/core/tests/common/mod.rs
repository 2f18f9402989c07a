#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokprune::adaptation::{IntentTask, LabeledText};
use tokprune::{init_random_encoder, EncoderConfig, EncoderModel, TokenizedBatch, Vocab};

pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const WORDS: usize = 200;

/// Specials, `w0..w{WORDS}` and a handful of continuation pieces.
pub fn synthetic_vocab() -> Vocab {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..WORDS).map(|i| format!("w{i}")));
    tokens.extend(["##s", "##ing", "##ed"].map(String::from));
    tokens.extend(["?", "!", ".", ","].map(String::from));
    Vocab::new(tokens).unwrap()
}

pub fn tiny_model(layers: usize, heads: usize, d_model: usize, seed: u64) -> EncoderModel {
    let cfg = EncoderConfig::tiny(layers, heads, d_model, synthetic_vocab().len());
    init_random_encoder(&cfg, seed).unwrap()
}

/// Random id sequences `[CLS] ... [SEP]` with the given total lengths (at least 2).
pub fn random_batch(lengths: &[usize], vocab_size: usize, rng: &mut impl Rng) -> TokenizedBatch {
    let seqs: Vec<Vec<u32>> = lengths
        .iter()
        .map(|&len| {
            let mut ids = vec![2u32];
            ids.extend((0..len.saturating_sub(2)).map(|_| rng.random_range(4..vocab_size as u32)));
            ids.push(3);
            ids
        })
        .collect();
    TokenizedBatch::from_sequences(&seqs, 0)
}

/// Sentence of `words` space-separated vocabulary words.
pub fn random_text(words: usize, rng: &mut impl Rng) -> String {
    (0..words)
        .map(|_| format!("w{}", rng.random_range(0..WORDS)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Intent tasks whose labels are signalled by label-specific keywords mixed
/// into filler words.
pub fn synthetic_tasks(count: usize, intents: usize, seed: u64) -> Vec<IntentTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let keywords: Vec<Vec<usize>> = (0..intents)
                .map(|i| (0..4).map(|k| (t * 37 + i * 11 + k * 3) % 100).collect())
                .collect();
            let make = |n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledText> {
                let mut out = Vec::new();
                for _ in 0..n {
                    for (i, kws) in keywords.iter().enumerate() {
                        let len = rng.random_range(4..24);
                        let words: Vec<String> = (0..len)
                            .map(|_| {
                                if rng.random_bool(0.5) {
                                    format!("w{}", kws.choose(rng).unwrap())
                                } else {
                                    format!("w{}", rng.random_range(100..WORDS))
                                }
                            })
                            .collect();
                        out.push(LabeledText::new(words.join(" "), format!("intent{i}")));
                    }
                }
                out
            };
            let train = make(4, &mut rng);
            let dev = make(3, &mut rng);
            IntentTask {
                name: format!("task{t}"),
                train,
                dev,
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Random softmax-regression problem with every class present.
pub fn random_objective(
    n: usize,
    d: usize,
    classes: usize,
    l2: f64,
    rng: &mut impl Rng,
) -> (tokprune::classifier::Objective, Vec<f64>) {
    let x = ndarray::Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            if i < classes {
                i
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    let obj = tokprune::classifier::Objective::new(x, labels, classes, l2).unwrap();
    let params = (0..obj.num_params())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    (obj, params)
}

/// Largest componentwise relative error between the analytic gradient and
/// central differences; the denominator is floored at 1e-6.
pub fn gradient_check(obj: &tokprune::classifier::Objective, params: &[f64], h: f64) -> f64 {
    let analytic = obj.gradient(params);
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let orig = p[k];
        p[k] = orig + h;
        let up = obj.loss(&p);
        p[k] = orig - h;
        let down = obj.loss(&p);
        p[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Random per-head attention whose real rows are stochastic over real keys.
pub fn random_attention(
    lengths: &[usize],
    width: usize,
    heads: usize,
    rng: &mut impl Rng,
) -> (tokprune::AttentionScores, ndarray::Array2<bool>) {
    let b = lengths.len();
    let mut per_head = ndarray::Array4::<f32>::zeros((b, heads, width, width));
    let mut mask = ndarray::Array2::from_elem((b, width), false);
    for (bi, &len) in lengths.iter().enumerate() {
        mask.slice_mut(ndarray::s![bi, ..len]).fill(true);
        for h in 0..heads {
            for i in 0..len {
                let raw: Vec<f32> = (0..len)
                    .map(|_| rng.random_range(0.0..1.0f32) + 1e-3)
                    .collect();
                let sum: f32 = raw.iter().sum();
                for (j, r) in raw.iter().enumerate() {
                    per_head[[bi, h, i, j]] = r / sum;
                }
            }
        }
    }
    let head_mean = per_head.mean_axis(ndarray::Axis(1)).unwrap();
    (
        tokprune::AttentionScores {
            per_head: Some(per_head),
            head_mean,
        },
        mask,
    )
}

/// Loop over heads, query rows and key columns directly on the per-head tensor.
pub fn importance_oracle(per_head: &ndarray::Array4<f32>, lengths: &[usize]) -> Vec<Vec<f64>> {
    let heads = per_head.dim().1;
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let mut imp = vec![0.0f64; len];
            for h in 0..heads {
                for i in 0..len {
                    for (j, v) in imp.iter_mut().enumerate() {
                        *v += per_head[[b, h, i, j]] as f64;
                    }
                }
            }
            imp.iter().map(|v| v / heads as f64).collect()
        })
        .collect()
}

static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Hold while timing so concurrent tests in the same binary do not skew
/// wall-clock measurements.
pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}
