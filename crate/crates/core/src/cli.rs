//! Command-line front end.
//!
//! Every tunable can come from a flag, from a flat `key = value` file passed
//! with `--config`, or from the built-in default, in that order of priority.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{load_ohlc_csv, prepare, prepare_with_stats, NormStats, PipelineOptions, SampleSet};
use crate::error::Error;
use crate::nn::{init_model, FeatureMap, ModelConfig};
use crate::optim::HyperParams;
use crate::persist::{self, Checkpoint};
use crate::synthetic::{self, SynthOptions};
use crate::train::{self, grad_check_with, GradCheckOptions, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATS_FILE: &str = "norm_stats.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAIN_SAMPLES_FILE: &str = "train.bin";
pub const TEST_SAMPLES_FILE: &str = "test.bin";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Parser)]
#[command(name = "stockconv", version, about = "1-D CNN for intraday price direction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic OHLC series as CSV.
    Synth(SynthArgs),
    /// Label, split, normalize and window a CSV; write the sample files.
    Prepare(PrepareArgs),
    /// Train the network and write checkpoint, history and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on the train and test partitions of a CSV.
    Evaluate(EvaluateArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub rows: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    /// Emit a perfectly flat series instead.
    #[arg(long)]
    pub flat: bool,
}

#[derive(Debug, Args, Default)]
pub struct PipelineArgs {
    /// Flat `key = value` file with defaults for any long option.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub window_len: Option<usize>,
    /// Fraction of labeled rows used for training.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// OHLC CSV to prepare and train on.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    pub input: Option<PathBuf>,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_early_stopping: bool,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub bias_correction: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Normalization statistics; defaults to the file beside the checkpoint.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_value = "2,2,2")]
    pub filters: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4,4")]
    pub dense: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub window_len: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Check only this many randomly chosen parameters per seed.
    #[arg(long)]
    pub max_params: Option<usize>,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

const CONFIG_KEYS: &[&str] = &[
    "horizon",
    "window_len",
    "split",
    "batch_size",
    "max_epochs",
    "patience",
    "early_stopping",
    "dropout",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "bias_correction",
    "seed",
    "threshold",
];

/// Values read from a `--config` file.
#[derive(Debug, Default)]
struct ConfigFile {
    path: String,
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, path: &str) -> Result<Self, Error> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{path}:{}: expected key = value", n + 1)));
            };
            let key = key.trim().replace('-', "_");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("{path}:{}: unknown key '{key}'", n + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self {
            path: path.to_string(),
            values,
        })
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, Error> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("{}: bad value '{raw}' for {key}", self.path))
            }),
        }
    }

    fn flag(&self, key: &str, set: bool, default: bool) -> Result<bool, Error> {
        self.get(key, set.then_some(!default), default)
    }
}

fn pipeline_options(args: &PipelineArgs, file: &ConfigFile) -> Result<PipelineOptions, Error> {
    let d = PipelineOptions::default();
    Ok(PipelineOptions {
        horizon: file.get("horizon", args.horizon, d.horizon)?,
        window_len: file.get("window_len", args.window_len, d.window_len)?,
        train_fraction: file.get("split", args.split, d.train_fraction)?,
    })
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Prepare(a) => prepare_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments) -> Result<(), Error> {
    writeln!(out, "{msg}").map_err(|e| Error::io("<stdout>", e))
}

fn make_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), Error> {
    let frame = if a.flat {
        synthetic::flat_series(a.rows, 100.0)
    } else {
        synthetic::generate(&SynthOptions {
            rows: a.rows,
            seed: a.seed,
            noise: a.noise,
            amplitude: a.amplitude,
            ..SynthOptions::default()
        })
        .frame
    };
    if let Some(dir) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    synthetic::save_csv(&frame, &a.output).map_err(|e| Error::io(&a.output, e))?;
    say(out, format_args!("wrote {} rows to {}", frame.len(), a.output.display()))
}

fn prepare_cmd(a: PrepareArgs, out: &mut dyn Write) -> Result<(), Error> {
    let file = ConfigFile::load(a.pipeline.config.as_deref())?;
    let options = pipeline_options(&a.pipeline, &file)?;
    let raw = load_ohlc_csv(&a.input)?;
    let prepared = prepare(&raw, &options)?;
    make_dir(&a.out_dir)?;
    persist::save_samples(a.out_dir.join(TRAIN_SAMPLES_FILE), &prepared.train)?;
    persist::save_samples(a.out_dir.join(TEST_SAMPLES_FILE), &prepared.test)?;
    persist::save_json(a.out_dir.join(STATS_FILE), &prepared.stats)?;
    persist::save_json(a.out_dir.join(SUMMARY_FILE), &prepared.summary)?;
    let s = &prepared.summary;
    say(
        out,
        format_args!(
            "rows read {} (dropped {}), labeled {}, windows train {} / test {}, positive {:.3} / {:.3}",
            s.rows_read,
            s.rows_dropped,
            s.rows_labeled,
            s.train_windows,
            s.test_windows,
            s.train_positive_fraction,
            s.test_positive_fraction
        ),
    )
}

/// Fully resolved settings of a training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub pipeline: Option<PipelineOptions>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<(), Error> {
    let file = ConfigFile::load(a.pipeline.config.as_deref())?;
    let d = TrainConfig::default();
    let dh = HyperParams::default();
    let config = TrainConfig {
        max_epochs: file.get("max_epochs", a.max_epochs, d.max_epochs)?,
        patience: file.get("patience", a.patience, d.patience)?,
        batch_size: file.get("batch_size", a.batch_size, d.batch_size)?,
        early_stopping: file.flag("early_stopping", a.no_early_stopping, d.early_stopping)?,
        seed: file.get("seed", a.seed, d.seed)?,
        hyper: HyperParams {
            learning_rate: file.get("lr", a.lr, dh.learning_rate)?,
            beta1: file.get("beta1", a.beta1, dh.beta1)?,
            beta2: file.get("beta2", a.beta2, dh.beta2)?,
            epsilon: file.get("epsilon", a.epsilon, dh.epsilon)?,
            bias_correction: file.flag("bias_correction", a.bias_correction, dh.bias_correction)?,
        },
        validation_fraction: d.validation_fraction,
        threshold: file.get("threshold", a.threshold, d.threshold)?,
    };
    config.validate()?;
    let dropout = file.get("dropout", a.dropout, 0.5)?;

    make_dir(&a.out_dir)?;
    let (train_set, test_set, stats, pipeline) = match (&a.input, &a.data) {
        (Some(input), _) => {
            let options = pipeline_options(&a.pipeline, &file)?;
            let prepared = prepare(&load_ohlc_csv(input)?, &options)?;
            persist::save_json(a.out_dir.join(SUMMARY_FILE), &prepared.summary)?;
            (prepared.train, prepared.test, prepared.stats, Some(options))
        }
        (None, Some(dir)) => {
            let stats: NormStats = persist::load_json(dir.join(STATS_FILE))?;
            let train_set = persist::load_samples(dir.join(TRAIN_SAMPLES_FILE))?;
            let test_set = persist::load_samples(dir.join(TEST_SAMPLES_FILE))?;
            (train_set, test_set, stats, None)
        }
        (None, None) => return Err(Error::Config("either --input or --data is required".into())),
    };
    persist::save_json(a.out_dir.join(STATS_FILE), &stats)?;

    let mut model_config = ModelConfig::standard(train_set.window_len, dropout);
    model_config.in_channels = train_set.channels();
    let run_config = RunConfig {
        pipeline,
        model: model_config.clone(),
        train: config,
    };
    persist::save_json(a.out_dir.join(RUN_CONFIG_FILE), &run_config)?;

    let model = init_model(model_config, config.seed)?;
    let test_ref = (!test_set.is_empty()).then_some(&test_set);
    let quiet = a.quiet;
    let mut progress_err = None;
    let outcome = train::train_from(model, None, &train_set, test_ref, &config, &mut |r| {
        if quiet || progress_err.is_some() {
            return;
        }
        let test = match (r.test_loss, r.test_acc) {
            (Some(l), Some(acc)) => format!(" test_loss {l:.4} test_acc {acc:.4}"),
            _ => String::new(),
        };
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  loss {:.4} acc {:.4}  val_loss {:.4} val_acc {:.4}{test}  ({:.1}s)",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wall_time
        ) {
            progress_err = Some(e);
        }
    })?;
    if let Some(e) = progress_err {
        return Err(Error::io("<stdout>", e));
    }

    let history = &outcome.history;
    persist::save_checkpoint(
        a.out_dir.join(CHECKPOINT_FILE),
        &Checkpoint {
            model: outcome.model.clone(),
            hyper: config.hyper,
            best_epoch: history.best_epoch,
            optimizer: Some(outcome.optimizer.clone()),
        },
    )?;
    persist::save_text(a.out_dir.join(HISTORY_FILE), &history.to_csv())?;
    let train_eval = train::evaluate(&outcome.model, &train_set, config.threshold)?;
    let mut rows = vec![("train", &train_eval)];
    let test_eval = test_ref
        .map(|t| train::evaluate(&outcome.model, t, config.threshold))
        .transpose()?;
    if let Some(e) = &test_eval {
        rows.push(("test", e));
    }
    persist::save_text(a.out_dir.join(METRICS_FILE), &persist::metrics_csv(&rows))?;

    say(
        out,
        format_args!(
            "{} epochs{}, best epoch {} (val_loss {:.4})",
            history.len(),
            if history.stopped_early { " (early stop)" } else { "" },
            history.best_epoch,
            history.best_val_loss().unwrap_or(f64::NAN)
        ),
    )?;
    for (name, e) in &rows {
        say(
            out,
            format_args!(
                "{name}: acc {:.4} precision {:.4} recall {:.4} f1 {:.4} loss {:.4}",
                e.metrics.accuracy.value,
                e.metrics.precision.value,
                e.metrics.recall.value,
                e.metrics.f1.value,
                e.loss
            ),
        )?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut dyn Write) -> Result<(), Error> {
    let file = ConfigFile::load(a.pipeline.config.as_deref())?;
    let ckpt = persist::load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model;
    let expected = model.config().window_len;
    let threshold = file.get("threshold", a.threshold, 0.5)?;

    let (train_set, test_set): (SampleSet, SampleSet) = match (&a.input, &a.data) {
        (Some(input), _) => {
            let mut pipeline = a.pipeline;
            pipeline.window_len.get_or_insert(expected);
            let options = pipeline_options(&pipeline, &file)?;
            if options.window_len != expected {
                return Err(Error::WindowMismatch {
                    checkpoint: expected,
                    requested: options.window_len,
                });
            }
            let stats_path = a.stats.clone().unwrap_or_else(|| {
                a.checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(STATS_FILE)
            });
            let stats: NormStats = persist::load_json(&stats_path)?;
            prepare_with_stats(&load_ohlc_csv(input)?, &options, &stats)?
        }
        (None, Some(dir)) => (
            persist::load_samples(dir.join(TRAIN_SAMPLES_FILE))?,
            persist::load_samples(dir.join(TEST_SAMPLES_FILE))?,
        ),
        (None, None) => return Err(Error::Config("either --input or --data is required".into())),
    };
    for set in [&train_set, &test_set] {
        if !set.is_empty() && set.window_len != expected {
            return Err(Error::WindowMismatch {
                checkpoint: expected,
                requested: set.window_len,
            });
        }
    }

    let mut evals = Vec::new();
    for (name, set) in [("train", &train_set), ("test", &test_set)] {
        if !set.is_empty() {
            evals.push((name, train::evaluate(&model, set, threshold)?));
        }
    }
    let rows: Vec<_> = evals.iter().map(|(n, e)| (*n, e)).collect();
    let csv = persist::metrics_csv(&rows);
    if let Some(dir) = &a.out_dir {
        make_dir(dir)?;
        persist::save_text(dir.join(METRICS_FILE), &csv)?;
    }
    write!(out, "{csv}").map_err(|e| Error::io("<stdout>", e))
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<(), Error> {
    let (&[f0, f1, f2], &[d0, d1]) = (a.filters.as_slice(), a.dense.as_slice()) else {
        return Err(Error::Config(
            "--filters takes three widths and --dense two".into(),
        ));
    };
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let config = ModelConfig::stack(a.channels, a.window_len, [f0, f1, f2], [d0, d1], 0.0);
    let mut worst = 0.0f64;
    for seed in 0..a.seeds {
        let model = init_model(config.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let data = (0..a.channels * a.window_len)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let sample = FeatureMap::from_vec(a.channels, a.window_len, data)?;
        let label = (seed % 2) as u8;
        let options = GradCheckOptions {
            epsilon: a.epsilon,
            max_params: a.max_params,
            seed,
        };
        let corrupt = a.corrupt_backward;
        let report = grad_check_with(&model, &sample, label, &options, |g| {
            if corrupt {
                g.conv[0].0.mapv_inplace(|v| v * 1.5 + 1e-3);
            }
        })?;
        let at = report
            .worst
            .as_ref()
            .map(|w| format!("{}[{}]", w.param, w.index))
            .unwrap_or_else(|| "-".into());
        say(
            out,
            format_args!(
                "seed {seed}: {} params checked, {} at kinks, max relative error {:.3e} at {at} (analytic {:.6e}, numeric {:.6e})",
                report.checked, report.kinks, report.max_rel_error, report.analytic, report.numeric
            ),
        )?;
        worst = worst.max(report.max_rel_error);
    }
    if worst <= a.tolerance {
        say(out, format_args!("PASS: max relative error {worst:.3e} <= {:.1e}", a.tolerance))
    } else {
        say(out, format_args!("FAIL: max relative error {worst:.3e} > {:.1e}", a.tolerance))?;
        Err(Error::CheckFailed(format!(
            "gradient check exceeded tolerance {:.1e} (max relative error {worst:.3e})",
            a.tolerance
        )))
    }
}
