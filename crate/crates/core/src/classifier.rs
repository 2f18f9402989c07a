//! Multinomial logistic-regression head over frozen sentence embeddings.
//!
//! Training minimizes mean cross-entropy plus `l2_lambda * ||W||^2 / 2`
//! (biases unregularized) by full-batch gradient descent with Armijo
//! backtracking, starting from zero. The objective is evaluated in f64;
//! trained parameters are stored as f32 so heads round-trip through the same
//! F32 safetensors archive as encoder weights.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::model_io::{read_f32_archive, write_archive};

pub const HEAD_JSON: &str = "head.json";
pub const HEAD_WEIGHTS: &str = "head.safetensors";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[C, d]`
    pub weights: Array2<f32>,
    /// `[C]`
    pub biases: Array1<f32>,
    pub label_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub l2_lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Reserved for stochastic variants; full-batch training ignores it.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let valid = self.tol > 0.0 && self.l2_lambda >= 0.0;
        if !valid || self.max_iters == 0 {
            return Err(Error::Config(
                "train settings need tol > 0, l2_lambda >= 0 and max_iters >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Downstream metric used to score a trained head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    WeightedF1,
}

/// Regularized softmax cross-entropy over a fixed training set.
///
/// Parameters are flat: the `[C, d]` weight matrix row-major, then `C` biases.
#[derive(Debug, Clone)]
pub struct Objective {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
    l2_lambda: f64,
}

impl Objective {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        classes: usize,
        l2_lambda: f64,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!(
                "label id {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
            l2_lambda,
        })
    }

    pub fn num_params(&self) -> usize {
        self.classes * self.dim() + self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn split<'p>(&self, params: &'p [f64]) -> (ndarray::ArrayView2<'p, f64>, ArrayView1<'p, f64>) {
        let wlen = self.classes * self.dim();
        let w = ndarray::ArrayView2::from_shape((self.classes, self.dim()), &params[..wlen])
            .expect("parameter layout");
        let b = ArrayView1::from(&params[wlen..]);
        (w, b)
    }

    /// Softmax probabilities `[N, C]`.
    fn probabilities(&self, params: &[f64]) -> Array2<f64> {
        let (w, b) = self.split(params);
        let mut z = self.features.dot(&w.t());
        z += &b;
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        z
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        let (w, b) = self.split(params);
        let mut z = self.features.dot(&w.t());
        z += &b;
        let mut total = 0.0;
        for (row, &y) in z.rows().into_iter().zip(&self.labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let n = self.labels.len().max(1) as f64;
        total / n + 0.5 * self.l2_lambda * w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (w, _) = self.split(params);
        let mut residual = self.probabilities(params);
        for (mut row, &y) in residual.rows_mut().into_iter().zip(&self.labels) {
            row[y] -= 1.0;
        }
        let n = self.labels.len().max(1) as f64;
        residual /= n;
        let mut gw = residual.t().dot(&self.features);
        gw.scaled_add(self.l2_lambda, &w);
        let gb = residual.sum_axis(Axis(0));
        gw.iter().chain(gb.iter()).copied().collect()
    }
}

/// Loss after each accepted descent step, starting with the initial loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn embedding_matrix(embeddings: &[SentenceEmbedding]) -> Result<Array2<f64>> {
    let d = embeddings.first().map(SentenceEmbedding::dim).unwrap_or(0);
    let mut x = Array2::zeros((embeddings.len(), d));
    for (i, e) in embeddings.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::Shape(format!(
                "embedding {i} has dimension {}, expected {d}",
                e.dim()
            )));
        }
        x.row_mut(i).assign(&e.0.mapv(f64::from));
    }
    Ok(x)
}

pub fn train_head(
    embeddings: &[SentenceEmbedding],
    labels: &[usize],
    label_names: &[String],
    settings: &TrainSettings,
) -> Result<ClassifierHead> {
    train_head_traced(embeddings, labels, label_names, settings).map(|(h, _)| h)
}

pub fn train_head_traced(
    embeddings: &[SentenceEmbedding],
    labels: &[usize],
    label_names: &[String],
    settings: &TrainSettings,
) -> Result<(ClassifierHead, TrainTrace)> {
    settings.validate()?;
    let classes = label_names.len();
    if classes < 2 {
        return Err(Error::DegenerateTask(format!(
            "need at least two labels, got {classes}"
        )));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Shape(format!(
                "label id {y} out of range for {classes} labels"
            )));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateTask(format!(
            "label `{}` has no training examples",
            label_names[empty]
        )));
    }
    let x = embedding_matrix(embeddings)?;
    let d = x.ncols();
    let objective = Objective::new(x, labels.to_vec(), classes, settings.l2_lambda)?;
    let (params, trace) = minimize(&objective, settings);
    let wlen = classes * d;
    Ok((
        ClassifierHead {
            weights: Array2::from_shape_vec(
                (classes, d),
                params[..wlen].iter().map(|&v| v as f32).collect(),
            )
            .expect("parameter layout"),
            biases: params[wlen..].iter().map(|&v| v as f32).collect(),
            label_names: label_names.to_vec(),
        },
        trace,
    ))
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Full-batch gradient descent with backtracking line search from zero.
pub fn minimize(objective: &Objective, settings: &TrainSettings) -> (Vec<f64>, TrainTrace) {
    let mut params = vec![0.0; objective.num_params()];
    let mut loss = objective.loss(&params);
    let mut losses = vec![loss];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut trial = vec![0.0; params.len()];
    while iterations < settings.max_iters {
        let grad = objective.gradient(&params);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < settings.tol {
            converged = true;
            break;
        }
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for ((t, p), g) in trial.iter_mut().zip(&params).zip(&grad) {
                *t = p - step * g;
            }
            let candidate = objective.loss(&trial);
            if candidate <= loss - ARMIJO_C * step * gnorm2 {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some(l) => {
                std::mem::swap(&mut params, &mut trial);
                loss = l;
                losses.push(l);
                step *= 2.0;
            }
            // No decrease representable at this precision.
            None => break,
        }
    }
    (
        params,
        TrainTrace {
            losses,
            iterations,
            converged,
        },
    )
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// A head with all-zero parameters.
    pub fn zeros(dim: usize, label_names: Vec<String>) -> Self {
        Self {
            weights: Array2::zeros((label_names.len(), dim)),
            biases: Array1::zeros(label_names.len()),
            label_names,
        }
    }
}

/// `softmax(W x + b)` and its argmax; ties go to the lower label id.
pub fn predict(head: &ClassifierHead, embedding: &SentenceEmbedding) -> Result<(usize, Vec<f64>)> {
    if embedding.dim() != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension {} does not match head dimension {}",
            embedding.dim(),
            head.dim()
        )));
    }
    let logits: Vec<f64> = head
        .weights
        .rows()
        .into_iter()
        .zip(&head.biases)
        .map(|(w, &b)| {
            w.iter()
                .zip(embedding.0.iter())
                .map(|(&a, &x)| a as f64 * x as f64)
                .sum::<f64>()
                + b as f64
        })
        .collect();
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    let max = logits[best];
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok((best, exps.into_iter().map(|e| e / sum).collect()))
}

pub fn predict_all(head: &ClassifierHead, embeddings: &[SentenceEmbedding]) -> Result<Vec<usize>> {
    embeddings
        .iter()
        .map(|e| predict(head, e).map(|(label, _)| label))
        .collect()
}

/// Fraction of argmax predictions equal to the gold labels.
pub fn accuracy(
    head: &ClassifierHead,
    embeddings: &[SentenceEmbedding],
    labels: &[usize],
) -> Result<f64> {
    let predicted = checked_predictions(head, embeddings, labels)?;
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy plus support-weighted precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl ClassificationMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::WeightedF1 => self.weighted_f1,
        }
    }
}

/// Per-class precision/recall/F1 averaged with weights equal to each gold
/// label's support. Classes never predicted count as precision 0.
pub fn metrics_from_predictions(
    predicted: &[usize],
    gold: &[usize],
    classes: usize,
) -> Result<ClassificationMetrics> {
    if gold.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &y) in predicted.iter().zip(gold) {
        if p >= classes || y >= classes {
            return Err(Error::Shape(format!(
                "label id out of range for {classes} classes"
            )));
        }
        pred_count[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let total = gold.len() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let precision = if pred_count[c] > 0 {
            tp[c] as f64 / pred_count[c] as f64
        } else {
            0.0
        };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let weight = support[c] as f64 / total;
        wp += weight * precision;
        wr += weight * recall;
        wf += weight * f1;
    }
    let hits = predicted.iter().zip(gold).filter(|(p, y)| p == y).count();
    Ok(ClassificationMetrics {
        accuracy: hits as f64 / total,
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
    })
}

pub fn evaluate(
    head: &ClassifierHead,
    embeddings: &[SentenceEmbedding],
    labels: &[usize],
) -> Result<ClassificationMetrics> {
    let predicted = checked_predictions(head, embeddings, labels)?;
    metrics_from_predictions(&predicted, labels, head.num_classes())
}

fn checked_predictions(
    head: &ClassifierHead,
    embeddings: &[SentenceEmbedding],
    labels: &[usize],
) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    predict_all(head, embeddings)
}

#[derive(Serialize, Deserialize)]
struct HeadManifest {
    label_names: Vec<String>,
    dim: usize,
    weights_file: String,
}

/// Write `head.json` (labels, dimension) and `head.safetensors` (`weights`, `biases`).
pub fn save_head(head: &ClassifierHead, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let archive = write_archive(&[
        (
            "weights".to_string(),
            vec![head.num_classes(), head.dim()],
            head.weights.as_slice().expect("standard layout"),
        ),
        (
            "biases".to_string(),
            vec![head.num_classes()],
            head.biases.as_slice().expect("standard layout"),
        ),
    ])?;
    let weights_path = dir.join(HEAD_WEIGHTS);
    fs::write(&weights_path, archive).map_err(|e| Error::io(&weights_path, e))?;
    let manifest = HeadManifest {
        label_names: head.label_names.clone(),
        dim: head.dim(),
        weights_file: HEAD_WEIGHTS.to_string(),
    };
    let json_path = dir.join(HEAD_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&json_path, e))
}

pub fn load_head(dir: &Path) -> Result<ClassifierHead> {
    let json_path = dir.join(HEAD_JSON);
    if !json_path.is_file() {
        return Err(Error::ArtifactMissing(json_path));
    }
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: HeadManifest = serde_json::from_str(&text)?;
    let weights_path = dir.join(&manifest.weights_file);
    if !weights_path.is_file() {
        return Err(Error::ArtifactMissing(weights_path));
    }
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let mut tensors = read_f32_archive(&bytes)?;
    let classes = manifest.label_names.len();
    let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>> {
        let (found, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::Shape(format!("tensor `{name}` is missing")))?;
        if found != shape {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {found:?}, expected {shape:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptWeights(format!(
                "tensor `{name}` has non-finite values"
            )));
        }
        Ok(data)
    };
    let weights = take("weights", vec![classes, manifest.dim])?;
    let biases = take("biases", vec![classes])?;
    Ok(ClassifierHead {
        weights: Array2::from_shape_vec((classes, manifest.dim), weights).expect("checked shape"),
        biases: Array1::from_vec(biases),
        label_names: manifest.label_names,
    })
}
