//! Offline multitask search for a single pruning configuration.
//!
//! Every `(s, q, l)` in a finite grid is scored on every holdout task by
//! encoding the task's train and dev texts with that configuration, fitting
//! a fresh classifier head on train and measuring it on dev. The winner
//! maximizes the unweighted mean score across tasks.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate, train_head, Metric, TrainSettings};
use crate::encoder::embed_texts;
use crate::error::{Error, Result};
use crate::model_io::EncoderModel;
use crate::pruner::PruneConfig;
use crate::tokenizer::{Vocab, DEFAULT_MAX_LEN};

/// One labelled utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
}

impl LabeledText {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
        }
    }
}

/// A holdout task: a training split and a development split.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentTask {
    pub name: String,
    pub train: Vec<LabeledText>,
    pub dev: Vec<LabeledText>,
}

/// Label ids assigned by first appearance in the training split.
struct EncodedLabels {
    names: Vec<String>,
    train: Vec<usize>,
    dev: Vec<usize>,
}

impl IntentTask {
    pub fn validate(&self) -> Result<()> {
        self.encode_labels().map(|_| ())
    }

    fn encode_labels(&self) -> Result<EncodedLabels> {
        if self.train.is_empty() || self.dev.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "task `{}` needs non-empty train and dev splits",
                self.name
            )));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut names = Vec::new();
        let train = self
            .train
            .iter()
            .map(|ex| {
                *index.entry(ex.label.as_str()).or_insert_with(|| {
                    names.push(ex.label.clone());
                    names.len() - 1
                })
            })
            .collect();
        let dev = self
            .dev
            .iter()
            .map(|ex| {
                index.get(ex.label.as_str()).copied().ok_or_else(|| {
                    Error::Label(format!(
                        "dev label `{}` of task `{}` never appears in train",
                        ex.label, self.name
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedLabels { names, train, dev })
    }
}

/// Candidate values for each pruning parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub s_values: Vec<usize>,
    pub q_values: Vec<f64>,
    pub l_values: Vec<usize>,
}

/// Default grid step for `q` when only a range is given.
pub const DEFAULT_Q_STEP: f64 = 0.05;

impl SearchSpace {
    /// The grid used for MiniLM-style encoders: s in 10..=20,
    /// q in 0.6..=0.8 step 0.05, l in {1, 2, 3}.
    pub fn standard() -> Self {
        Self {
            s_values: (10..=20).collect(),
            q_values: q_grid(0.6, 0.8, DEFAULT_Q_STEP),
            l_values: vec![1, 2, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_values.is_empty() || self.q_values.is_empty() || self.l_values.is_empty() {
            return Err(Error::Config("search space lists must be non-empty".into()));
        }
        self.configs().iter().try_for_each(PruneConfig::validate)
    }

    pub fn len(&self) -> usize {
        self.s_values.len() * self.q_values.len() * self.l_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product, `s` outermost, then `q`, then `l`.
    pub fn configs(&self) -> Vec<PruneConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &s in &self.s_values {
            for &q in &self.q_values {
                for &l in &self.l_values {
                    out.push(PruneConfig { s, q, l });
                }
            }
        }
        out
    }
}

/// `from, from + step, ...` up to and including `to`, snapped to 1e-9 so
/// that accumulated rounding does not drop the endpoint.
pub fn q_grid(from: f64, to: f64, step: f64) -> Vec<f64> {
    if step.is_nan() || step <= 0.0 || to < from {
        return vec![];
    }
    let count = ((to - from) / step + 1e-9).floor() as usize;
    (0..=count)
        .map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9)
        .collect()
}

/// Scores of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub config: PruneConfig,
    pub per_task: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: PruneConfig,
    pub tasks: Vec<String>,
    pub table: Vec<SearchEntry>,
}

/// Everything needed to score a configuration on a task.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocab,
    pub train: TrainSettings,
    pub metric: Metric,
    pub max_len: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a EncoderModel, vocab: &'a Vocab) -> Self {
        Self {
            model,
            vocab,
            train: TrainSettings::default(),
            metric: Metric::Accuracy,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    /// Metric of a head trained on `task.train` and scored on `task.dev`,
    /// with both splits embedded under `config` (`None` = unpruned).
    pub fn evaluate_config(&self, config: Option<&PruneConfig>, task: &IntentTask) -> Result<f64> {
        self.evaluate_inner(config, task)
            .map_err(|e| e.in_task(&task.name))
    }

    fn evaluate_inner(&self, config: Option<&PruneConfig>, task: &IntentTask) -> Result<f64> {
        let labels = task.encode_labels()?;
        let train_texts: Vec<&str> = task.train.iter().map(|e| e.text.as_str()).collect();
        let dev_texts: Vec<&str> = task.dev.iter().map(|e| e.text.as_str()).collect();
        let train_emb = embed_texts(self.model, self.vocab, &train_texts, config, self.max_len)?;
        let dev_emb = embed_texts(self.model, self.vocab, &dev_texts, config, self.max_len)?;
        let head = train_head(&train_emb, &labels.train, &labels.names, &self.train)?;
        Ok(evaluate(&head, &dev_emb, &labels.dev)?.get(self.metric))
    }

    /// Exhaustive grid search; any failing task aborts the search.
    pub fn search(&self, space: &SearchSpace, tasks: &[IntentTask]) -> Result<SearchResult> {
        space.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("search needs at least one task".into()));
        }
        for t in tasks {
            t.validate().map_err(|e| e.in_task(&t.name))?;
        }
        let configs = space.configs();
        let score = |config: &PruneConfig| -> Result<SearchEntry> {
            let per_task = tasks
                .iter()
                .map(|t| self.evaluate_config(Some(config), t))
                .collect::<Result<Vec<_>>>()?;
            Ok(SearchEntry {
                config: *config,
                mean: task_mean(&per_task),
                per_task,
            })
        };
        let table = if rayon::current_num_threads() > 1 {
            configs.par_iter().map(score).collect::<Result<Vec<_>>>()?
        } else {
            configs.iter().map(score).collect::<Result<Vec<_>>>()?
        };
        let best = best_entry(&table).expect("non-empty table").config;
        Ok(SearchResult {
            best,
            tasks: tasks.iter().map(|t| t.name.clone()).collect(),
            table,
        })
    }
}

/// Unweighted arithmetic mean, summed in task order.
pub fn task_mean(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Ordering used to pick the winner: higher mean, then higher `q`, then
/// higher `s`, then lower `l`.
pub fn rank(a: &SearchEntry, b: &SearchEntry) -> Ordering {
    a.mean
        .total_cmp(&b.mean)
        .then(a.config.q.total_cmp(&b.config.q))
        .then(a.config.s.cmp(&b.config.s))
        .then(b.config.l.cmp(&a.config.l))
}

pub fn best_entry(table: &[SearchEntry]) -> Option<&SearchEntry> {
    table.iter().max_by(|a, b| rank(a, b))
}
