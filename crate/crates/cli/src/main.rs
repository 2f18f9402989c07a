use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tokprune::adaptation::{q_grid, Evaluator, IntentTask, SearchSpace, DEFAULT_Q_STEP};
use tokprune::bench::{
    load_dataset, run_experiment, sample_few_shot, with_threads, Dataset, DatasetFormat,
    ExperimentSettings, DEFAULT_RUNS, DEFAULT_THREADS,
};
use tokprune::classifier::{evaluate, save_head, train_head, Metric, TrainSettings};
use tokprune::encoder::embed_texts;
use tokprune::model_io::save_model;
use tokprune::tokenizer::DEFAULT_MAX_LEN;
use tokprune::{
    init_random_encoder, load_bundle, EncoderConfig, EncoderModel, Error, PruneConfig, Vocab,
};

#[derive(Parser)]
#[command(
    name = "tokprune",
    version,
    about = "Sentence embeddings with attention-based token pruning"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed one text per line; writes JSON lines `{"text", "embedding"}`.
    Embed {
        texts: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a classifier head on one file and score it on another.
    TrainEval {
        train: PathBuf,
        test: PathBuf,
        /// Also save the trained head to this directory.
        #[arg(long)]
        save_head: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid-search a pruning configuration over holdout tasks.
    Search {
        /// JSON manifest: `{"tasks": [{"name", "train", "dev"}]}`.
        manifest: PathBuf,
        /// JSON grid: `{"s": ..., "q": ..., "l": ...}`, each a list or a range.
        space: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Accuracy)]
        metric: MetricArg,
        #[command(flatten)]
        common: Common,
    },
    /// Compare pruned and unpruned accuracy and embedding time on a k-shot sample.
    Bench {
        dataset: PathBuf,
        /// Examples per label in the training sample.
        #[arg(short, long)]
        k: usize,
        /// Test file; defaults to the examples left out of the sample.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write a randomly initialized model directory, for testing.
    InitRandom {
        /// Vocabulary file, one token per line.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Directory with config.json, model.safetensors and vocab.txt.
    #[arg(long)]
    model_dir: PathBuf,
    /// Minimum sentence length that gets pruned.
    #[arg(long, default_value_t = 15, conflicts_with = "no_prune")]
    prune_s: usize,
    /// Fraction of tokens kept.
    #[arg(long, default_value_t = 0.8, conflicts_with = "no_prune")]
    prune_q: f64,
    /// 1-based layer after whose attention tokens are pruned.
    #[arg(long, default_value_t = 1, conflicts_with = "no_prune")]
    prune_l: usize,
    /// Encode without pruning.
    #[arg(long)]
    no_prune: bool,
    /// Upper bound on worker threads.
    #[arg(long, default_value_t = DEFAULT_THREADS)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    #[value(alias = "weighted_f1")]
    WeightedF1,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Accuracy => Metric::Accuracy,
            MetricArg::WeightedF1 => Metric::WeightedF1,
        }
    }
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

const INPUT_ERROR: u8 = 2;
const MODEL_ERROR: u8 = 3;
const LABEL_ERROR: u8 = 4;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Label(_) => LABEL_ERROR,
            _ => INPUT_ERROR,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: INPUT_ERROR,
            message: message.into(),
        }
    }

    fn model(e: Error) -> Self {
        Failure {
            code: MODEL_ERROR,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

impl Common {
    fn prune(&self) -> CliResult<Option<PruneConfig>> {
        if self.no_prune {
            return Ok(None);
        }
        Ok(Some(PruneConfig::new(
            self.prune_s,
            self.prune_q,
            self.prune_l,
        )?))
    }

    fn load(&self) -> CliResult<(EncoderModel, Vocab)> {
        let (model, vocab) = load_bundle(&self.model_dir).map_err(Failure::model)?;
        if let Some(p) = self.prune()? {
            if p.l > model.config.num_layers {
                return Err(Failure::input(format!(
                    "--prune-l {} exceeds the model's {} layers",
                    p.l, model.config.num_layers
                )));
            }
        }
        Ok((model, vocab))
    }

    fn emit(&self, body: &str) -> CliResult<()> {
        match &self.out {
            Some(path) => fs::write(path, body)
                .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display()))),
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout
                    .write_all(body.as_bytes())
                    .and_then(|_| stdout.flush())
                    .map_err(|e| Failure::input(format!("cannot write stdout: {e}")))
            }
        }
    }

    fn emit_json<T: Serialize>(&self, value: &T) -> CliResult<()> {
        let mut body =
            serde_json::to_string_pretty(value).map_err(|e| Failure::input(e.to_string()))?;
        body.push('\n');
        self.emit(&body)
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
        with_threads(self.threads, f)?
    }
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let content = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let lines: Vec<String> = content.lines().map(str::to_string).collect();
    if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
        return Err(Error::Format {
            line: i + 1,
            message: "empty text".into(),
        }
        .into());
    }
    if lines.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()).into());
    }
    Ok(lines)
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(path, DatasetFormat::from_path(path))?)
}

fn cmd_embed(texts: &Path, common: &Common) -> CliResult<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        text: &'a str,
        embedding: &'a [f32],
    }
    let texts = read_lines(texts)?;
    let (model, vocab) = common.load()?;
    let prune = common.prune()?;
    let embs = common.run(|| {
        Ok(embed_texts(
            &model,
            &vocab,
            &texts,
            prune.as_ref(),
            common.max_len,
        )?)
    })?;
    let mut body = String::new();
    for (text, e) in texts.iter().zip(&embs) {
        let line = serde_json::to_string(&Line {
            text,
            embedding: e.as_slice(),
        })
        .map_err(|e| Failure::input(e.to_string()))?;
        body.push_str(&line);
        body.push('\n');
    }
    common.emit(&body)
}

fn cmd_train_eval(
    train: &Path,
    test: &Path,
    save: Option<&Path>,
    common: &Common,
) -> CliResult<()> {
    let train = read_dataset(train)?;
    let test = read_dataset(test)?;
    let test_labels = test.label_ids_in(&train)?;
    let (model, vocab) = common.load()?;
    let prune = common.prune()?;
    let metrics = common.run(|| {
        let embed =
            |ds: &Dataset| embed_texts(&model, &vocab, &ds.texts(), prune.as_ref(), common.max_len);
        let settings = TrainSettings {
            seed: common.seed,
            ..TrainSettings::default()
        };
        let head = train_head(
            &embed(&train)?,
            &train.label_ids(),
            &train.labels,
            &settings,
        )?;
        if let Some(dir) = save {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))?;
            save_head(&head, dir)?;
        }
        Ok(evaluate(&head, &embed(&test)?, &test_labels)?)
    })?;
    common.emit_json(&metrics)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tasks: Vec<ManifestTask>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTask {
    name: String,
    train: PathBuf,
    dev: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IntValues {
    List(Vec<usize>),
    Range { from: usize, to: usize },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FloatValues {
    List(Vec<f64>),
    Range {
        from: f64,
        to: f64,
        step: Option<f64>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    s: IntValues,
    q: FloatValues,
    l: IntValues,
}

impl IntValues {
    fn values(self) -> Vec<usize> {
        match self {
            IntValues::List(v) => v,
            IntValues::Range { from, to } => (from..=to).collect(),
        }
    }
}

impl FloatValues {
    fn values(self) -> Vec<f64> {
        match self {
            FloatValues::List(v) => v,
            FloatValues::Range { from, to, step } => {
                q_grid(from, to, step.unwrap_or(DEFAULT_Q_STEP))
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let content = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&content).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn cmd_search(
    manifest_path: &Path,
    space_path: &Path,
    metric: Metric,
    common: &Common,
) -> CliResult<()> {
    let manifest: Manifest = read_json(manifest_path)?;
    if manifest.tasks.is_empty() {
        return Err(Failure::input("manifest lists no tasks"));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let tasks = manifest
        .tasks
        .into_iter()
        .map(|t| {
            Ok(IntentTask {
                train: read_dataset(&base.join(&t.train))?.examples,
                dev: read_dataset(&base.join(&t.dev))?.examples,
                name: t.name,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let space: SpaceFile = read_json(space_path)?;
    let space = SearchSpace {
        s_values: space.s.values(),
        q_values: space.q.values(),
        l_values: space.l.values(),
    };
    space.validate()?;
    let (model, vocab) = load_bundle(&common.model_dir).map_err(Failure::model)?;
    let evaluator = Evaluator {
        train: TrainSettings {
            seed: common.seed,
            ..TrainSettings::default()
        },
        metric,
        max_len: common.max_len,
        ..Evaluator::new(&model, &vocab)
    };
    let result = common.run(|| Ok(evaluator.search(&space, &tasks)?))?;
    common.emit_json(&result)
}

fn cmd_bench(
    dataset: &Path,
    k: usize,
    test: Option<&Path>,
    runs: usize,
    common: &Common,
) -> CliResult<()> {
    let prune = common
        .prune()?
        .ok_or_else(|| Failure::input("bench compares against pruning; drop --no-prune"))?;
    let train = read_dataset(dataset)?;
    let test = match test {
        Some(path) => read_dataset(path)?,
        None => sample_few_shot(&train, k, common.seed)?.complement(&train),
    };
    if test.is_empty() {
        return Err(Failure::input("no examples left for testing; pass --test"));
    }
    let (model, vocab) = common.load()?;
    let settings = ExperimentSettings {
        runs,
        threads: common.threads,
        max_len: common.max_len,
        train: TrainSettings {
            seed: common.seed,
            ..TrainSettings::default()
        },
    };
    let report = common.run(|| {
        Ok(run_experiment(
            &model,
            &vocab,
            &train,
            &test,
            k,
            &prune,
            common.seed,
            &settings,
        )?)
    })?;
    common.emit_json(&report)
}

fn cmd_init_random(
    vocab: &Path,
    layers: usize,
    heads: usize,
    d_model: usize,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let vocab = Vocab::from_file(vocab)?;
    let config = EncoderConfig::tiny(layers, heads, d_model, vocab.len());
    let model = init_random_encoder(&config, seed)?;
    fs::create_dir_all(out)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", out.display())))?;
    save_model(&model, &vocab, out)?;
    println!(
        "{}",
        serde_json::json!({ "model_dir": out, "config": config })
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Embed { texts, common } => cmd_embed(&texts, &common),
        Command::TrainEval {
            train,
            test,
            save_head,
            common,
        } => cmd_train_eval(&train, &test, save_head.as_deref(), &common),
        Command::Search {
            manifest,
            space,
            metric,
            common,
        } => cmd_search(&manifest, &space, metric.into(), &common),
        Command::Bench {
            dataset,
            k,
            test,
            runs,
            common,
        } => cmd_bench(&dataset, k, test.as_deref(), runs, &common),
        Command::InitRandom {
            vocab,
            layers,
            heads,
            d_model,
            seed,
            out,
        } => cmd_init_random(&vocab, layers, heads, d_model, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { INPUT_ERROR } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
