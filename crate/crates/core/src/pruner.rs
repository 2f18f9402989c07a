//! Attention-score token importance and the `(s, q, l)` pruning policy.
//!
//! A token's importance is the column sum of the head-averaged attention
//! matrix over the sentence's real (non-pad) query rows. Sentences with at
//! least `s` tokens keep their `keep_count(n, q)` most important tokens at
//! layer `l`; shorter sentences pass through untouched.

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionScores, HiddenStates};
use crate::error::{Error, Result};

/// Pruning policy: minimum length `s`, kept fraction `q`, 1-based layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub s: usize,
    pub q: f64,
    pub l: usize,
}

impl PruneConfig {
    pub fn new(s: usize, q: f64, l: usize) -> Result<Self> {
        let c = Self { s, q, l };
        c.validate()?;
        Ok(c)
    }

    /// `(15, 0.8, 1)`, the configuration found by multitask search for
    /// MiniLM-style encoders.
    pub fn recommended() -> Self {
        Self {
            s: 15,
            q: 0.8,
            l: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 1 {
            return Err(Error::Config("prune s must be at least 1".into()));
        }
        if !(self.q.is_finite() && self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!(
                "prune q must lie in (0, 1], got {}",
                self.q
            )));
        }
        if self.l < 1 {
            return Err(Error::Config(
                "prune l is 1-based and must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sentence importance, one entry per real token position.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub per_sentence: Vec<Vec<f32>>,
}

/// Surviving original positions per sentence, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepSet {
    pub per_sentence: Vec<Vec<usize>>,
}

impl KeepSet {
    pub fn sizes(&self) -> Vec<usize> {
        self.per_sentence.iter().map(Vec::len).collect()
    }
}

/// Number of tokens kept out of `n`: `max(1, ceil(q * n))`.
///
/// Products that land within rounding error of an integer are treated as that
/// integer, so `keep_count(100, 0.55)` is 55 rather than 56.
pub fn keep_count(n: usize, q: f64) -> usize {
    let x = q * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n.max(1))
}

/// Column sums of a square head-averaged attention block.
pub(crate) fn column_sums(mean: ArrayView2<'_, f32>) -> Vec<f32> {
    let n = mean.ncols();
    let mut acc = vec![0f64; n];
    for row in mean.rows() {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Importance of every real token: `sum_i mean[b, i, j]` over real rows `i`.
/// Pad rows and pad columns are never read.
pub fn token_importance(
    scores: &AttentionScores,
    pad_mask: &Array2<bool>,
    lengths: &[usize],
) -> Result<ImportanceScores> {
    let (b, n, n2) = scores.head_mean.dim();
    if n != n2 || pad_mask.dim() != (b, n) || lengths.len() != b {
        return Err(Error::Shape(format!(
            "attention {:?}, mask {:?} and {} lengths disagree",
            scores.head_mean.dim(),
            pad_mask.dim(),
            lengths.len()
        )));
    }
    check_prefix_mask(pad_mask, lengths)?;
    Ok(ImportanceScores {
        per_sentence: importance_from_means(&scores.head_mean, lengths),
    })
}

fn importance_from_means(head_mean: &Array3<f32>, lengths: &[usize]) -> Vec<Vec<f32>> {
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| column_sums(head_mean.slice(s![b, ..len, ..len])))
        .collect()
}

pub(crate) fn check_prefix_mask(pad_mask: &Array2<bool>, lengths: &[usize]) -> Result<()> {
    for (b, (row, &len)) in pad_mask.rows().into_iter().zip(lengths).enumerate() {
        if len > row.len() || row.iter().enumerate().any(|(t, &m)| m != (t < len)) {
            return Err(Error::Shape(format!(
                "row {b}: pad mask is not a prefix of length {len}"
            )));
        }
    }
    Ok(())
}

/// Keep positions for one sentence.
pub(crate) fn select_sentence(importance: &[f32], config: &PruneConfig) -> Vec<usize> {
    let n = importance.len();
    if n < config.s {
        return (0..n).collect();
    }
    let k = keep_count(n, config.q);
    let mut order: Vec<usize> = (0..n).collect();
    // Highest importance first; equal scores fall back to the earlier position.
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Apply the `s`/`q` policy sentence by sentence.
pub fn select_tokens(
    importance: &ImportanceScores,
    config: &PruneConfig,
    lengths: &[usize],
) -> Result<KeepSet> {
    config.validate()?;
    if importance.per_sentence.len() != lengths.len() {
        return Err(Error::Shape(format!(
            "{} importance rows for {} sentences",
            importance.per_sentence.len(),
            lengths.len()
        )));
    }
    let mut per_sentence = Vec::with_capacity(lengths.len());
    for (b, (scores, &len)) in importance.per_sentence.iter().zip(lengths).enumerate() {
        if scores.len() != len {
            return Err(Error::Shape(format!(
                "sentence {b}: {} importance scores for {len} tokens",
                scores.len()
            )));
        }
        per_sentence.push(select_sentence(scores, config));
    }
    Ok(KeepSet { per_sentence })
}

/// Gather surviving rows and repack the batch to the new maximum length.
pub fn apply_pruning(hidden: &HiddenStates, keep: &KeepSet) -> Result<HiddenStates> {
    hidden.validate()?;
    let (batch, _, d) = hidden.values.dim();
    if keep.per_sentence.len() != batch {
        return Err(Error::Shape(format!(
            "keep set covers {} sentences, batch has {batch}",
            keep.per_sentence.len()
        )));
    }
    for (b, positions) in keep.per_sentence.iter().enumerate() {
        let len = hidden.lengths[b];
        if positions.iter().any(|&p| p >= len) {
            return Err(Error::Shape(format!(
                "sentence {b}: keep position out of range for length {len}"
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape(format!(
                "sentence {b}: keep positions must be strictly increasing"
            )));
        }
    }
    let lengths = keep.sizes();
    let n_max = lengths.iter().copied().max().unwrap_or(0);
    let mut values = Array3::zeros((batch, n_max, d));
    let mut pad_mask = Array2::from_elem((batch, n_max), false);
    for (b, positions) in keep.per_sentence.iter().enumerate() {
        for (dst, &src) in positions.iter().enumerate() {
            values
                .slice_mut(s![b, dst, ..])
                .assign(&hidden.values.slice(s![b, src, ..]));
            pad_mask[[b, dst]] = true;
        }
    }
    Ok(HiddenStates {
        values,
        pad_mask,
        lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scores_from_mean(mean: Array3<f32>) -> AttentionScores {
        let (b, n, _) = mean.dim();
        AttentionScores {
            per_head: Some(mean.clone().into_shape_with_order((b, 1, n, n)).unwrap()),
            head_mean: mean,
        }
    }

    #[test]
    fn uniform_attention_gives_unit_importance() {
        let mean = Array3::from_elem((1, 5, 5), 0.2f32);
        let mask = Array2::from_elem((1, 5), true);
        let imp = token_importance(&scores_from_mean(mean), &mask, &[5]).unwrap();
        for v in &imp.per_sentence[0] {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn column_sum_example() {
        let mean = array![[[0.9f32, 0.1], [0.3, 0.7]]];
        let mask = Array2::from_elem((1, 2), true);
        let imp = token_importance(&scores_from_mean(mean), &mask, &[2]).unwrap();
        assert!((imp.per_sentence[0][0] - 1.2).abs() < 1e-6);
        assert!((imp.per_sentence[0][1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn single_token_and_padding_rows_are_ignored() {
        // Pad rows/cols are filled with garbage that must not be read.
        let mut mean = Array3::from_elem((2, 3, 3), 7.0f32);
        mean[[0, 0, 0]] = 1.0;
        mean.slice_mut(s![1, .., ..]).fill(1.0 / 3.0);
        let mask = array![[true, false, false], [true, true, true]];
        let imp = token_importance(&scores_from_mean(mean), &mask, &[1, 3]).unwrap();
        assert_eq!(imp.per_sentence[0], vec![1.0]);
        assert_eq!(imp.per_sentence[1].len(), 3);
    }

    #[test]
    fn inconsistent_mask_is_a_shape_error() {
        let mean = Array3::from_elem((1, 3, 3), 1.0f32 / 3.0);
        let mask = array![[true, false, true]];
        let err = token_importance(&scores_from_mean(mean.clone()), &mask, &[2]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let mask = Array2::from_elem((1, 3), true);
        let err = token_importance(&scores_from_mean(mean), &mask, &[3, 1]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(20, 0.8), 16);
        assert_eq!(keep_count(10, 0.75), 8);
        assert_eq!(keep_count(1, 0.6), 1);
        assert_eq!(keep_count(100, 0.55), 55);
        assert_eq!(keep_count(20, 3.0 * 0.05), 3);
        assert_eq!(keep_count(3, 0.01), 1);
    }

    #[test]
    fn gate_keeps_short_sentences() {
        let cfg = PruneConfig::new(15, 0.8, 1).unwrap();
        let imp = ImportanceScores {
            per_sentence: vec![(0..10).map(|i| i as f32).collect()],
        };
        let keep = select_tokens(&imp, &cfg, &[10]).unwrap();
        assert_eq!(keep.per_sentence[0], (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn keeps_highest_scores_in_original_order() {
        let cfg = PruneConfig::new(15, 0.8, 1).unwrap();
        // Distinct scores; the four lowest sit at positions 3, 7, 11, 19.
        let mut scores: Vec<f32> = (0..20).map(|i| 10.0 + i as f32).collect();
        for (rank, p) in [3usize, 7, 11, 19].into_iter().enumerate() {
            scores[p] = rank as f32;
        }
        let keep = select_tokens(
            &ImportanceScores {
                per_sentence: vec![scores],
            },
            &cfg,
            &[20],
        )
        .unwrap();
        let expected: Vec<usize> = (0..20).filter(|p| ![3, 7, 11, 19].contains(p)).collect();
        assert_eq!(keep.per_sentence[0], expected);
    }

    #[test]
    fn ties_prefer_earlier_positions() {
        let cfg = PruneConfig::new(1, 0.5, 1).unwrap();
        let imp = ImportanceScores {
            per_sentence: vec![vec![1.0; 4]],
        };
        let keep = select_tokens(&imp, &cfg, &[4]).unwrap();
        assert_eq!(keep.per_sentence[0], vec![0, 1]);
    }

    fn hidden(lengths: &[usize], d: usize) -> HiddenStates {
        let n = *lengths.iter().max().unwrap();
        let mut values = Array3::zeros((lengths.len(), n, d));
        let mut mask = Array2::from_elem((lengths.len(), n), false);
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                mask[[b, t]] = true;
                for k in 0..d {
                    values[[b, t, k]] = (100 * b + 10 * t + k) as f32;
                }
            }
        }
        HiddenStates {
            values,
            pad_mask: mask,
            lengths: lengths.to_vec(),
        }
    }

    #[test]
    fn pruning_gathers_and_repacks() {
        let h = hidden(&[8, 3], 2);
        let keep = KeepSet {
            per_sentence: vec![vec![0, 2, 5, 7], vec![0, 1, 2]],
        };
        let out = apply_pruning(&h, &keep).unwrap();
        assert_eq!(out.lengths, vec![4, 3]);
        assert_eq!(out.values.dim(), (2, 4, 2));
        for (dst, src) in [0usize, 2, 5, 7].into_iter().enumerate() {
            assert_eq!(
                out.values.slice(s![0, dst, ..]),
                h.values.slice(s![0, src, ..])
            );
        }
        assert!(!out.pad_mask[[1, 3]]);
        assert_eq!(out.values.slice(s![1, 3, ..]).sum(), 0.0);
    }

    #[test]
    fn keeping_everything_is_identity() {
        let h = hidden(&[5, 2], 3);
        let keep = KeepSet {
            per_sentence: vec![(0..5).collect(), (0..2).collect()],
        };
        assert_eq!(apply_pruning(&h, &keep).unwrap(), h);
    }

    #[test]
    fn out_of_range_keep_is_a_shape_error() {
        let h = hidden(&[4], 2);
        let keep = KeepSet {
            per_sentence: vec![vec![0, 4]],
        };
        assert!(matches!(apply_pruning(&h, &keep), Err(Error::Shape(_))));
    }

    #[test]
    fn prune_config_validation_and_json() {
        assert!(PruneConfig::new(0, 0.8, 1).is_err());
        assert!(PruneConfig::new(1, 0.0, 1).is_err());
        assert!(PruneConfig::new(1, 1.01, 1).is_err());
        assert!(PruneConfig::new(1, 0.5, 0).is_err());
        let c: PruneConfig = serde_json::from_str(r#"{"s": 15, "q": 0.8, "l": 1}"#).unwrap();
        assert_eq!(c, PruneConfig::recommended());
        let v = serde_json::to_value(c).unwrap();
        assert_eq!(v["s"], 15);
        assert_eq!(v["l"], 1);
    }
}
