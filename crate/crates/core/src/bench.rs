//! Dataset ingestion, k-shot sampling and the speed/accuracy harness.
//!
//! Timed regions cover tokenization, the forward pass, mean pooling and
//! normalization of the whole text list. One untimed warm-up pass precedes
//! the timed runs, and the reported time is the arithmetic mean of the runs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::LabeledText;
use crate::classifier::{accuracy, train_head, TrainSettings};
use crate::encoder::{embed_texts, SentenceEmbedding};
use crate::error::{Error, Result};
use crate::model_io::EncoderModel;
use crate::pruner::PruneConfig;
use crate::tokenizer::{Vocab, DEFAULT_MAX_LEN};

pub const DEFAULT_RUNS: usize = 7;
pub const DEFAULT_THREADS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<LabeledText>,
    /// Label names by id.
    pub labels: Vec<String>,
    pub label_index: HashMap<String, usize>,
}

impl Dataset {
    /// Ids assigned in order of first appearance.
    pub fn from_examples(name: impl Into<String>, examples: Vec<LabeledText>) -> Self {
        let mut labels = Vec::new();
        let mut label_index = HashMap::new();
        for ex in &examples {
            label_index.entry(ex.label.clone()).or_insert_with(|| {
                labels.push(ex.label.clone());
                labels.len() - 1
            });
        }
        Self {
            name: name.into(),
            examples,
            labels,
            label_index,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.examples
            .iter()
            .map(|e| self.label_index[&e.label])
            .collect()
    }

    /// Same examples re-indexed against another dataset's label ids.
    pub fn label_ids_in(&self, reference: &Dataset) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .map(|e| {
                reference.label_index.get(&e.label).copied().ok_or_else(|| {
                    Error::Label(format!(
                        "label `{}` in `{}` is absent from `{}`",
                        e.label, self.name, reference.name
                    ))
                })
            })
            .collect()
    }

    fn with_examples(&self, examples: Vec<LabeledText>) -> Self {
        Self {
            name: self.name.clone(),
            examples,
            labels: self.labels.clone(),
            label_index: self.label_index.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Csv,
    JsonLines,
}

impl DatasetFormat {
    /// `.jsonl`/`.ndjson`/`.json` are JSON lines; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson" | "json") => DatasetFormat::JsonLines,
            _ => DatasetFormat::Csv,
        }
    }
}

/// Read a labelled dataset. CSV files need a `text,label` header; JSON-lines
/// records are objects with `text` and `label`.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::ArtifactMissing(path.to_path_buf()));
    }
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let examples = match format {
        DatasetFormat::Csv => parse_csv(&data)?,
        DatasetFormat::JsonLines => parse_jsonl(&data)?,
    };
    if examples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(Dataset::from_examples(name, examples))
}

fn parse_csv(data: &str) -> Result<Vec<LabeledText>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(data.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format {
                line: 1,
                message: format!("header must contain `text` and `label`, missing `{name}`"),
            })
    };
    let (text_col, label_col) = (column("text")?, column("label")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        out.push(checked_example(field(text_col), field(label_col), line)?);
    }
    Ok(out)
}

fn parse_jsonl(data: &str) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, raw) in data.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Format {
            line,
            message: e.to_string(),
        })?;
        let get = |key: &str| match value.get(key) {
            Some(serde_json::Value::String(s)) => Ok(s.trim().to_string()),
            Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
            _ => Err(Error::Format {
                line,
                message: format!("missing string field `{key}`"),
            }),
        };
        out.push(checked_example(get("text")?, get("label")?, line)?);
    }
    Ok(out)
}

fn checked_example(text: String, label: String, line: usize) -> Result<LabeledText> {
    if text.is_empty() {
        return Err(Error::Format {
            line,
            message: "empty text".into(),
        });
    }
    if label.is_empty() {
        return Err(Error::Format {
            line,
            message: "empty label".into(),
        });
    }
    Ok(LabeledText { text, label })
}

/// A k-shot subset together with the labels that had fewer than `k` examples.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShot {
    pub dataset: Dataset,
    /// Positions of the chosen examples in the source dataset, ascending.
    pub indices: Vec<usize>,
    /// `(label, available)` for labels with fewer than `k` examples.
    pub shortfalls: Vec<(String, usize)>,
}

impl FewShot {
    /// Source examples that were not sampled.
    pub fn complement(&self, source: &Dataset) -> Dataset {
        let mut chosen = self.indices.iter().peekable();
        let rest = source
            .examples
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                if chosen.peek() == Some(&i) {
                    chosen.next();
                    false
                } else {
                    true
                }
            })
            .map(|(_, e)| e.clone())
            .collect();
        source.with_examples(rest)
    }
}

/// Sample `min(k, available)` examples per label uniformly without
/// replacement. The chosen examples keep their original relative order and
/// the label ids of `dataset`.
pub fn sample_few_shot(dataset: &Dataset, k: usize, seed: u64) -> Result<FewShot> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_labels()];
    for (i, id) in dataset.label_ids().into_iter().enumerate() {
        by_label[id].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(k * by_label.len());
    let mut shortfalls = Vec::new();
    for (id, members) in by_label.iter().enumerate() {
        if members.len() <= k {
            if members.len() < k {
                log::warn!(
                    "label `{}` has only {} of {k} requested examples",
                    dataset.labels[id],
                    members.len()
                );
                shortfalls.push((dataset.labels[id].clone(), members.len()));
            }
            indices.extend_from_slice(members);
        } else {
            indices.extend(
                sample(&mut rng, members.len(), k)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    indices.sort_unstable();
    let examples = indices
        .iter()
        .map(|&i| dataset.examples[i].clone())
        .collect();
    Ok(FewShot {
        dataset: dataset.with_examples(examples),
        indices,
        shortfalls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub runs: Vec<f64>,
    pub mean_seconds: f64,
    pub config_used: Option<PruneConfig>,
    pub thread_count: usize,
}

/// Run `f` inside a rayon pool capped at `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Wall-clock seconds to embed `texts`: one warm-up pass, then `runs` timed passes.
pub fn time_embeddings<S: AsRef<str> + Sync>(
    model: &EncoderModel,
    vocab: &Vocab,
    texts: &[S],
    prune: Option<&PruneConfig>,
    runs: usize,
    threads: usize,
) -> Result<TimingReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let times = with_threads(threads, || -> Result<Vec<f64>> {
        embed_texts(model, vocab, texts, prune, DEFAULT_MAX_LEN)?;
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            let out = embed_texts(model, vocab, texts, prune, DEFAULT_MAX_LEN)?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        Ok(times)
    })??;
    Ok(TimingReport {
        mean_seconds: times.iter().sum::<f64>() / times.len() as f64,
        runs: times,
        config_used: prune.copied(),
        thread_count: threads,
    })
}

/// Relative time saved: `(t_unpruned - t_pruned) / t_unpruned`.
pub fn speedup(t_unpruned: f64, t_pruned: f64) -> f64 {
    (t_unpruned - t_pruned) / t_unpruned
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub runs: usize,
    pub threads: usize,
    pub max_len: usize,
    pub train: TrainSettings,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            threads: DEFAULT_THREADS,
            max_len: DEFAULT_MAX_LEN,
            train: TrainSettings::default(),
        }
    }
}

/// Pruned-vs-unpruned comparison on one k-shot variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub k_shots: usize,
    pub seed: u64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub prune: PruneConfig,
    pub accuracy_unpruned: f64,
    pub accuracy_pruned: f64,
    pub accuracy_delta: f64,
    pub time_unpruned: TimingReport,
    pub time_pruned: TimingReport,
    pub speedup: f64,
    pub short_labels: Vec<(String, usize)>,
}

/// Sample a k-shot training set from `train`, then for the unpruned and the
/// pruned encoder: fit a head, score it on `test`, and time embedding the
/// k-shot training texts.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    model: &EncoderModel,
    vocab: &Vocab,
    train: &Dataset,
    test: &Dataset,
    k_shots: usize,
    prune: &PruneConfig,
    seed: u64,
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    prune.validate()?;
    let shots = sample_few_shot(train, k_shots, seed)?;
    let train_set = &shots.dataset;
    let train_labels = train_set.label_ids();
    let test_labels = test.label_ids_in(train_set)?;
    if test.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let train_texts = train_set.texts();
    let test_texts = test.texts();

    let score = |config: Option<&PruneConfig>| -> Result<f64> {
        let embed = |texts: &[&str]| -> Result<Vec<SentenceEmbedding>> {
            embed_texts(model, vocab, texts, config, settings.max_len)
        };
        let head = train_head(
            &embed(&train_texts)?,
            &train_labels,
            &train_set.labels,
            &settings.train,
        )?;
        accuracy(&head, &embed(&test_texts)?, &test_labels)
    };
    let (accuracy_unpruned, accuracy_pruned) =
        with_threads(settings.threads, || -> Result<(f64, f64)> {
            Ok((score(None)?, score(Some(prune))?))
        })??;

    let time_unpruned = time_embeddings(
        model,
        vocab,
        &train_texts,
        None,
        settings.runs,
        settings.threads,
    )?;
    let time_pruned = time_embeddings(
        model,
        vocab,
        &train_texts,
        Some(prune),
        settings.runs,
        settings.threads,
    )?;
    Ok(ExperimentReport {
        dataset: train.name.clone(),
        k_shots,
        seed,
        train_examples: train_set.len(),
        test_examples: test.len(),
        prune: *prune,
        accuracy_unpruned,
        accuracy_pruned,
        accuracy_delta: accuracy_pruned - accuracy_unpruned,
        speedup: speedup(time_unpruned.mean_seconds, time_pruned.mean_seconds),
        time_unpruned,
        time_pruned,
        short_labels: shots.shortfalls,
    })
}
