//! Command-line pipelines: generate, train, grid, analyze, triage, serve.
//!
//! Every command resolves its configuration from defaults, an optional
//! TOML file, `--set key.path=value` assignments and its own flags (in that
//! order), then writes the resolved configuration next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, grid, plot, read_predictions_csv, threshold_for_accuracy, triage_curve, write_predictions_csv, AnalysisError, ExperimentRecord,
    GridSpec, PredictionRow,
};
use crate::config::{self, ConfigError, Override};
use crate::image::{encode_png, GrayTensor, RawImage};
use crate::nn::{self, NnError};
use crate::score::Score;
use crate::service::{self, Service, ServiceConfig, ServiceError};
use crate::synth::{self, DatasetConfig, LabeledDrawing, SynthError};
use crate::train::{self, hex_digest, SplitSpec, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Synth(_) => "generate",
            CliError::Train(_) => "train",
            CliError::Analysis(_) => "analysis",
            CliError::Service(_) => "service",
            CliError::Nn(_) => "model",
            CliError::Invalid(_) => "invalid",
            CliError::Io(_) => "io",
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Debug, Parser)]
#[command(name = "cubescore", version, about = "Cube-drawing scoring experiments and review service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and planned outputs, then exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Train and evaluate one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        label_source: Option<String>,
        #[arg(long)]
        augment: Option<String>,
    },
    /// Run the factorial experiment grid, resuming from earlier records.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated architecture names.
        #[arg(long)]
        archs: Option<String>,
        /// Number of seeds, counting up from `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Statistics and figures over grid records, predictions or datasets.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV with `score` and `flag` columns.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Confidence triage curve and the threshold for a target accuracy.
    Triage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Run the review service over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Validation predictions used for the served triage curve.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    /// Hyperparameter regression over grid records.
    Ols,
    /// Confusion matrix of model predictions.
    Confusion,
    /// Gold against interviewer labels of a dataset.
    Channel,
    /// Most confident misclassifications.
    Errors,
    /// Share of flagged drawings per score.
    Association,
}

impl Analysis {
    fn name(self) -> &'static str {
        match self {
            Analysis::Ols => "ols",
            Analysis::Confusion => "confusion",
            Analysis::Channel => "channel",
            Analysis::Errors => "errors",
            Analysis::Association => "association",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { out: "data".into(), dataset: DatasetConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    /// Used only when `data` is unset.
    pub dataset: DatasetConfig,
    pub out: PathBuf,
    pub split: SplitSpec,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: None,
            dataset: DatasetConfig::default(),
            out: "runs/train".into(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridRunConfig {
    pub data: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub out: PathBuf,
    pub workers: usize,
    pub grid: GridSpec,
}

impl Default for GridRunConfig {
    fn default() -> Self {
        GridRunConfig { data: None, dataset: DatasetConfig::default(), out: "runs/grid".into(), workers: 1, grid: GridSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub records: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub top_k: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { records: None, predictions: None, data: None, input: None, out: "runs/analysis".into(), top_k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageConfig {
    pub predictions: PathBuf,
    pub out: PathBuf,
    pub target_accuracy: f64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        TriageConfig { predictions: "runs/train/val_predictions.csv".into(), out: "runs/triage".into(), target_accuracy: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub service: ServiceConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { addr: "127.0.0.1:8080".into(), checkpoint: None, predictions: None, service: ServiceConfig::default() }
    }
}

fn path_value(p: &Path) -> String {
    p.display().to_string()
}

fn u(v: usize) -> i64 {
    v as i64
}

fn resolve<T: Serialize + serde::de::DeserializeOwned + Default>(common: &Common, flags: Vec<Override>) -> Result<T, CliError> {
    let mut over = common.set.iter().map(|s| Override::parse(s)).collect::<Result<Vec<_>, _>>()?;
    over.extend(flags);
    Ok(config::resolve(common.config.as_deref(), &over)?)
}

fn seed_value(seed: u64) -> Result<i64, CliError> {
    i64::try_from(seed).map_err(|_| CliError::Invalid(format!("seed {seed} exceeds {}", i64::MAX)))
}

/// A resolved command, ready to run or print.
pub enum Plan {
    Generate(GenerateConfig),
    Train(TrainRunConfig),
    Grid(GridRunConfig),
    Analyze(Analysis, AnalyzeConfig),
    Triage(TriageConfig),
    Serve(ServeConfig),
}

impl Plan {
    pub fn name(&self) -> &'static str {
        match self {
            Plan::Generate(_) => "generate",
            Plan::Train(_) => "train",
            Plan::Grid(_) => "grid",
            Plan::Analyze(..) => "analyze",
            Plan::Triage(_) => "triage",
            Plan::Serve(_) => "serve",
        }
    }

    pub fn config_toml(&self) -> Result<String, CliError> {
        Ok(match self {
            Plan::Generate(c) => config::to_toml(c)?,
            Plan::Train(c) => config::to_toml(c)?,
            Plan::Grid(c) => config::to_toml(c)?,
            Plan::Analyze(_, c) => config::to_toml(c)?,
            Plan::Triage(c) => config::to_toml(c)?,
            Plan::Serve(c) => config::to_toml(c)?,
        })
    }

    fn outputs(&self) -> Vec<String> {
        let join = |dir: &Path, files: &[&str]| files.iter().map(|f| path_value(&dir.join(f))).collect::<Vec<_>>();
        match self {
            Plan::Generate(c) => join(&c.out, &[synth::MANIFEST_FILE, synth::DATASET_CONFIG_FILE, "tensors/", config::SNAPSHOT_FILE]),
            Plan::Train(c) => {
                join(&c.out, &[MODEL_FILE, RUN_FILE, PREDICTIONS_FILE, RUN_MANIFEST_FILE, TIMING_FILE, config::SNAPSHOT_FILE])
            }
            Plan::Grid(c) => join(&c.out, &[RECORDS_JSONL, RECORDS_CSV, TIMINGS_CSV, "model_comparison.svg", config::SNAPSHOT_FILE]),
            Plan::Analyze(what, c) => {
                let files: &[&str] = match what {
                    Analysis::Ols => &["ols.txt", "coefficients.csv", "coefficients.svg", "model_comparison.svg"],
                    Analysis::Confusion => &["confusion.csv", "confusion.svg"],
                    Analysis::Channel => &["channel.csv", "channel.svg"],
                    Analysis::Errors => &["errors.csv", "errors.png"],
                    Analysis::Association => &["association.csv"],
                };
                let mut v = join(&c.out, files);
                v.extend(join(&c.out, &[config::SNAPSHOT_FILE]));
                v
            }
            Plan::Triage(c) => {
                join(&c.out, &["triage_curve.csv", "triage_curve.json", "triage.svg", "threshold.json", config::SNAPSHOT_FILE])
            }
            Plan::Serve(c) => match &c.service.data_dir {
                Some(d) => join(d, &[service::EVENT_LOG_FILE, service::SNAPSHOT_FILE, "tensors/", config::SNAPSHOT_FILE]),
                None => Vec::new(),
            },
        }
    }

    /// Human-readable description for `--dry-run`.
    pub fn describe(&self) -> Result<String, CliError> {
        let mut s = format!("command: {}\n", self.name());
        if let Plan::Analyze(what, _) = self {
            s += &format!("analysis: {}\n", what.name());
        }
        if let Plan::Grid(c) = self {
            let cells = c.grid.cells().len();
            let done = existing_records(&c.out.join(RECORDS_JSONL), &c.grid)?.len();
            s += &format!("cells: {cells} ({done} already recorded, {} to train)\n", cells - done);
        }
        s += "outputs:\n";
        for o in self.outputs() {
            s += &format!("  {o}\n");
        }
        s += "resolved config:\n";
        s += &self.config_toml()?;
        Ok(s)
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Grid { .. } => "grid",
            Command::Analyze { .. } => "analyze",
            Command::Triage { .. } => "triage",
            Command::Serve { .. } => "serve",
        }
    }

    /// Resolves the configuration without touching the filesystem beyond
    /// reading the config file.
    pub fn plan(&self) -> Result<(Plan, bool), CliError> {
        match self {
            Command::Generate { common, n, out, input_size } => {
                let mut f = Vec::new();
                if let Some(n) = n {
                    f.push(Override::new("dataset.n", u(*n)));
                }
                if let Some(o) = out {
                    f.push(Override::new("out", path_value(o)));
                }
                if let Some(s) = input_size {
                    f.push(Override::new("dataset.input_size", u(*s)));
                }
                if let Some(seed) = common.seed {
                    f.push(Override::new("dataset.seed", seed_value(seed)?));
                }
                Ok((Plan::Generate(resolve(common, f)?), common.dry_run))
            }
            Command::Train { common, data, out, arch, epochs, label_source, augment } => {
                let mut f = Vec::new();
                if let Some(d) = data {
                    f.push(Override::new("data", path_value(d)));
                }
                if let Some(o) = out {
                    f.push(Override::new("out", path_value(o)));
                }
                if let Some(a) = arch {
                    f.push(Override::new("train.arch", a.as_str()));
                }
                if let Some(e) = epochs {
                    f.push(Override::new("train.epochs", u(*e)));
                }
                if let Some(l) = label_source {
                    f.push(Override::new("train.label_source", l.as_str()));
                }
                if let Some(a) = augment {
                    f.push(Override::new("train.augment.arm", a.as_str()));
                }
                if let Some(seed) = common.seed {
                    let s = seed_value(seed)?;
                    f.extend(["train.seed", "split.seed", "dataset.seed"].map(|k| Override::new(k, s)));
                }
                Ok((Plan::Train(resolve(common, f)?), common.dry_run))
            }
            Command::Grid { common, data, out, archs, seeds, profile, workers } => {
                let mut f = Vec::new();
                if let Some(p) = profile {
                    let (epochs, input) = match p {
                        Profile::Desk => ([10, 20], 64),
                        Profile::Paper => ([50, 100], 128),
                    };
                    f.push(Override::new("grid.epoch_arms", toml::Value::Array(epochs.iter().map(|&e| toml::Value::Integer(e)).collect())));
                    f.push(Override::new("grid.input_size", input));
                    f.push(Override::new("dataset.input_size", input));
                }
                if let Some(d) = data {
                    f.push(Override::new("data", path_value(d)));
                }
                if let Some(o) = out {
                    f.push(Override::new("out", path_value(o)));
                }
                if let Some(a) = archs {
                    let names: Vec<toml::Value> = a.split(',').map(|s| toml::Value::String(s.trim().to_string())).collect();
                    f.push(Override::new("grid.archs", toml::Value::Array(names)));
                }
                if let Some(w) = workers {
                    f.push(Override::new("workers", u(*w)));
                }
                let base = common.seed.map(seed_value).transpose()?;
                if let Some(b) = base {
                    f.push(Override::new("grid.split.seed", b));
                    f.push(Override::new("dataset.seed", b));
                }
                if seeds.is_some() || base.is_some() {
                    let count = match seeds {
                        Some(k) => *k,
                        None => resolve::<GridRunConfig>(common, Vec::new())?.grid.seeds.len(),
                    };
                    let start = base.unwrap_or(1);
                    let list = (0..count as i64).map(|i| toml::Value::Integer(start + i)).collect();
                    f.push(Override::new("grid.seeds", toml::Value::Array(list)));
                }
                Ok((Plan::Grid(resolve(common, f)?), common.dry_run))
            }
            Command::Analyze { what, common, records, predictions, data, input, out, top_k } => {
                let mut f = Vec::new();
                for (key, v) in [("records", records), ("predictions", predictions), ("data", data), ("input", input), ("out", out)] {
                    if let Some(p) = v {
                        f.push(Override::new(key, path_value(p)));
                    }
                }
                if let Some(k) = top_k {
                    f.push(Override::new("top_k", u(*k)));
                }
                Ok((Plan::Analyze(*what, resolve(common, f)?), common.dry_run))
            }
            Command::Triage { common, predictions, out, target } => {
                let mut f = Vec::new();
                if let Some(p) = predictions {
                    f.push(Override::new("predictions", path_value(p)));
                }
                if let Some(o) = out {
                    f.push(Override::new("out", path_value(o)));
                }
                if let Some(t) = target {
                    f.push(Override::new("target_accuracy", *t));
                }
                Ok((Plan::Triage(resolve(common, f)?), common.dry_run))
            }
            Command::Serve { common, addr, checkpoint, predictions, data_dir, threshold, static_dir } => {
                let mut f = Vec::new();
                if let Some(a) = addr {
                    f.push(Override::new("addr", a.as_str()));
                }
                for (key, v) in [
                    ("checkpoint", checkpoint),
                    ("predictions", predictions),
                    ("service.data_dir", data_dir),
                    ("service.static_dir", static_dir),
                ] {
                    if let Some(p) = v {
                        f.push(Override::new(key, path_value(p)));
                    }
                }
                if let Some(t) = threshold {
                    f.push(Override::new("service.threshold", *t));
                }
                Ok((Plan::Serve(resolve(common, f)?), common.dry_run))
            }
        }
    }
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const PREDICTIONS_FILE: &str = "val_predictions.csv";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const RECORDS_JSONL: &str = "records.jsonl";
pub const RECORDS_CSV: &str = "records.csv";
pub const TIMINGS_CSV: &str = "timings.csv";

/// Files whose contents are wall-clock measurements and so differ between
/// otherwise identical runs.
pub fn is_timing_file(name: &str) -> bool {
    name == TIMING_FILE || name == TIMINGS_CSV
}

fn load_or_generate(data: &Option<PathBuf>, dataset: &DatasetConfig, input_size: usize) -> Result<Vec<LabeledDrawing>, CliError> {
    let drawings = match data {
        Some(dir) => synth::load_dataset(dir)?,
        None => synth::generate_dataset(dataset)?,
    };
    if let Some(d) = drawings.iter().find(|d| d.tensor.height() != input_size || d.tensor.width() != input_size) {
        return Err(CliError::Invalid(format!(
            "drawing {} is {}x{}, the model expects {input_size}x{input_size}",
            d.id,
            d.tensor.height(),
            d.tensor.width()
        )));
    }
    Ok(drawings)
}

fn existing_records(path: &Path, spec: &GridSpec) -> Result<Vec<ExperimentRecord>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let cells = spec.cells();
    Ok(grid::read_records_jsonl(path)?.into_iter().filter(|r| cells.contains(&r.cell())).collect())
}

fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>, CliError> {
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => grid::read_records_jsonl(path)?,
        _ => grid::read_records_csv(path)?,
    })
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str, what: Analysis) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::Invalid(format!("analyze {} needs --{flag}", what.name())))
}

/// Side-by-side strip of tensors with a one-pixel blank gutter.
pub fn montage(tensors: &[&GrayTensor]) -> Option<RawImage> {
    let h = tensors.iter().map(|t| t.height()).max()?;
    let w: usize = tensors.iter().map(|t| t.width() + 1).sum::<usize>() - 1;
    let mut img = RawImage::blank(w, h);
    let mut x0 = 0;
    for t in tensors {
        let raw = t.to_raw();
        for y in 0..t.height() {
            for x in 0..t.width() {
                img.pixels_mut()[y * w + x0 + x] = raw.pixels()[y * t.width() + x];
            }
        }
        x0 += t.width() + 1;
    }
    Some(img)
}

#[derive(Deserialize)]
struct AssociationRow {
    score: Score,
    flag: bool,
}

/// Runs a resolved plan and returns the text printed on success.
pub fn execute(plan: &Plan) -> Result<String, CliError> {
    match plan {
        Plan::Generate(c) => {
            let drawings = synth::generate_dataset(&c.dataset)?;
            synth::write_dataset(&c.out, &c.dataset, &drawings)?;
            config::write_snapshot(&c.out, "generate", c)?;
            let counts = Score::ALL.map(|s| drawings.iter().filter(|d| d.gold == s).count());
            let agree = drawings.iter().filter(|d| d.gold == d.interviewer).count();
            Ok(format!(
                "wrote {} drawings to {} (gold counts {:?}, interviewer agreement {:.1}%)\n",
                drawings.len(),
                c.out.display(),
                counts,
                100.0 * agree as f64 / drawings.len() as f64
            ))
        }
        Plan::Train(c) => {
            c.train.validate()?;
            let data = load_or_generate(&c.data, &c.dataset, c.train.input_size)?;
            let gold: Vec<Score> = data.iter().map(|d| d.gold).collect();
            let split = train::split(&gold, &c.split)?;
            let run = train::train(&data, &split, &c.train)?;
            fs::create_dir_all(&c.out)?;
            let ckpt = run.checkpoint();
            fs::write(c.out.join(MODEL_FILE), &ckpt)?;
            fs::write(c.out.join(RUN_FILE), json(&run.result))?;
            fs::write(c.out.join(TIMING_FILE), json(&serde_json::json!({ "seconds": run.result.seconds })))?;
            let mut summary = format!("train accuracy {:.4}\n", run.result.train_accuracy);
            if let Some(v) = &run.result.validation {
                let rows: Vec<PredictionRow> =
                    split.val.iter().zip(&v.probabilities).map(|(&i, p)| PredictionRow::new(data[i].id, data[i].gold, *p)).collect();
                write_predictions_csv(&c.out.join(PREDICTIONS_FILE), &rows)?;
                summary += &format!("gold validation accuracy {:.4}\n", v.accuracy);
                summary += &analysis::ConfusionMatrix { counts: v.confusion }.display();
            }
            let config_text = config::to_toml(c)?;
            let manifest = serde_json::json!({
                "config_sha256": hex_digest(config_text.as_bytes()),
                "checkpoint": { "path": MODEL_FILE, "sha256": hex_digest(&ckpt) },
                "run": RUN_FILE,
                "predictions": run.result.validation.as_ref().map(|_| PREDICTIONS_FILE),
            });
            fs::write(c.out.join(RUN_MANIFEST_FILE), json(&manifest))?;
            config::write_snapshot(&c.out, "train", c)?;
            Ok(summary)
        }
        Plan::Grid(c) => {
            let data = load_or_generate(&c.data, &c.dataset, c.grid.input_size)?;
            fs::create_dir_all(&c.out)?;
            config::write_snapshot(&c.out, "grid", c)?;
            let jsonl = c.out.join(RECORDS_JSONL);
            let existing = existing_records(&jsonl, &c.grid)?;
            let log_error = Mutex::new(None);
            let run = grid::run_grid(&data, &c.grid, &existing, c.workers, |r| {
                if let Err(e) = grid::append_record_jsonl(&jsonl, r) {
                    log_error.lock().expect("log slot").get_or_insert(e);
                }
            })?;
            if let Some(e) = log_error.into_inner().expect("log slot") {
                return Err(e.into());
            }
            grid::write_records_jsonl(&jsonl, &run.records)?;
            grid::write_records_csv(&c.out.join(RECORDS_CSV), &run.records)?;
            grid::write_timings(&c.out.join(TIMINGS_CSV), &run.records)?;
            fs::write(c.out.join("model_comparison.svg"), plot::model_comparison_plot(&run.records))?;
            Ok(format!("{} cells recorded, {} trained in this run\n", run.records.len(), run.computed))
        }
        Plan::Analyze(what, c) => {
            let mut report = String::new();
            let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
            match what {
                Analysis::Ols => {
                    let records = read_records(require(&c.records, "records", *what)?)?;
                    let fits = analysis::ols_fits(&records)?;
                    for f in &fits {
                        report += &analysis::ols::format_fit(f);
                        report.push('\n');
                    }
                    files.push(("ols.txt", report.clone().into_bytes()));
                    files.push(("coefficients.csv", plot::coefficients_csv(&fits).into_bytes()));
                    files.push(("coefficients.svg", plot::coefficient_plot(&fits).into_bytes()));
                    files.push(("model_comparison.svg", plot::model_comparison_plot(&records).into_bytes()));
                }
                Analysis::Confusion => {
                    let rows = read_predictions_csv(require(&c.predictions, "predictions", *what)?)?;
                    let pred: Vec<Score> = rows.iter().map(|r| r.predicted).collect();
                    let truth: Vec<Score> = rows.iter().map(|r| r.truth).collect();
                    let m = analysis::confusion_matrix(&pred, &truth)?;
                    report = format!("accuracy {:.4}\n{}", m.accuracy(), m.display());
                    files.push(("confusion.csv", plot::confusion_csv(&m).into_bytes()));
                    files.push(("confusion.svg", plot::confusion_plot(&m, "Model prediction against gold").into_bytes()));
                }
                Analysis::Channel => {
                    let data = synth::load_dataset(require(&c.data, "data", *what)?)?;
                    let pred: Vec<Score> = data.iter().map(|d| d.interviewer).collect();
                    let truth: Vec<Score> = data.iter().map(|d| d.gold).collect();
                    let m = analysis::confusion_matrix(&pred, &truth)?;
                    report = format!("agreement {:.4}\n{}", m.accuracy(), m.display());
                    files.push(("channel.csv", plot::confusion_csv(&m).into_bytes()));
                    files.push(("channel.svg", plot::confusion_plot(&m, "Interviewer against gold").into_bytes()));
                }
                Analysis::Errors => {
                    let rows = read_predictions_csv(require(&c.predictions, "predictions", *what)?)?;
                    let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
                    let probs: Vec<[f64; 3]> = rows.iter().map(|r| r.probabilities()).collect();
                    let truth: Vec<Score> = rows.iter().map(|r| r.truth).collect();
                    let errors = match analysis::top_confident_errors(&ids, &probs, &truth, c.top_k) {
                        Ok(e) => e,
                        Err(AnalysisError::FewerThanK { requested, found }) => {
                            report += &format!("only {} of {requested} requested errors exist\n", found.len());
                            found
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let mut csv = String::from("rank,id,truth,predicted,confidence\n");
                    for (k, e) in errors.iter().enumerate() {
                        csv += &format!("{},{},{},{},{}\n", k + 1, e.id, e.truth, e.predicted, e.confidence);
                    }
                    report += &csv;
                    files.push(("errors.csv", csv.into_bytes()));
                    if let Some(dir) = &c.data {
                        let data = synth::load_dataset(dir)?;
                        let tensors: Vec<&GrayTensor> =
                            errors.iter().filter_map(|e| data.iter().find(|d| d.id == e.id)).map(|d| &d.tensor).collect();
                        if let Some(img) = montage(&tensors) {
                            files.push(("errors.png", encode_png(&img).map_err(|e| CliError::Invalid(e.to_string()))?));
                        }
                    }
                }
                Analysis::Association => {
                    let mut rd = csv::Reader::from_path(require(&c.input, "input", *what)?).map_err(AnalysisError::from)?;
                    let rows: Vec<AssociationRow> = rd.deserialize().collect::<Result<_, _>>().map_err(AnalysisError::from)?;
                    let scores: Vec<Score> = rows.iter().map(|r| r.score).collect();
                    let flags: Vec<bool> = rows.iter().map(|r| r.flag).collect();
                    let table = analysis::association_table(&scores, &flags)?;
                    let mut csv = String::from("score,n,flagged_percent\n");
                    for s in Score::ALL {
                        let n = scores.iter().filter(|&&x| x == s).count();
                        let pct = table[s.index()].map_or(String::new(), |p| format!("{p:.2}"));
                        csv += &format!("{s},{n},{pct}\n");
                    }
                    report = csv.clone();
                    files.push(("association.csv", csv.into_bytes()));
                }
            }
            fs::create_dir_all(&c.out)?;
            for (name, bytes) in files {
                fs::write(c.out.join(name), bytes)?;
            }
            config::write_snapshot(&c.out, &format!("analyze {}", what.name()), c)?;
            Ok(report)
        }
        Plan::Triage(c) => {
            let rows = read_predictions_csv(&c.predictions)?;
            let probs: Vec<[f64; 3]> = rows.iter().map(|r| r.probabilities()).collect();
            let truth: Vec<Score> = rows.iter().map(|r| r.truth).collect();
            let curve = triage_curve(&probs, &truth)?;
            let choice = threshold_for_accuracy(&curve, c.target_accuracy)?;
            fs::create_dir_all(&c.out)?;
            fs::write(c.out.join("triage_curve.csv"), plot::triage_csv(&curve))?;
            fs::write(c.out.join("triage_curve.json"), json(&curve))?;
            fs::write(c.out.join("triage.svg"), plot::triage_plot(&curve))?;
            fs::write(c.out.join("threshold.json"), json(&serde_json::json!({ "target_accuracy": c.target_accuracy, "choice": choice })))?;
            config::write_snapshot(&c.out, "triage", c)?;
            Ok(match choice.confidence {
                Some(t) => format!(
                    "confidence >= {t:.4} keeps {} of {} ({:.1}%) at accuracy {:.4}\n",
                    choice.count,
                    curve.len(),
                    100.0 * choice.coverage,
                    choice.accuracy.unwrap_or(0.0)
                ),
                None => format!("no confidence threshold reaches accuracy {}\n", c.target_accuracy),
            })
        }
        Plan::Serve(c) => {
            let addr: SocketAddr = c.addr.parse().map_err(|e| CliError::Invalid(format!("address {}: {e}", c.addr)))?;
            let model = c.checkpoint.as_deref().map(nn::load_checkpoint).transpose()?.map(|(m, _)| m);
            let mut svc = Service::open(c.service.clone(), model)?;
            if let Some(p) = &c.predictions {
                let rows = read_predictions_csv(p)?;
                let probs: Vec<[f64; 3]> = rows.iter().map(|r| r.probabilities()).collect();
                let truth: Vec<Score> = rows.iter().map(|r| r.truth).collect();
                svc = svc.with_curve(triage_curve(&probs, &truth)?);
            }
            if let Some(dir) = &c.service.data_dir {
                config::write_snapshot(dir, "serve", c)?;
            }
            eprintln!("listening on http://{addr}");
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::http::serve(svc, addr))?;
            Ok(String::new())
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 on success, 2 for bad arguments, 1 for failures
/// reported as a JSON object on stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command = cli.command.name();
    let result = cli.command.plan().and_then(|(plan, dry_run)| if dry_run { plan.describe() } else { execute(&plan) });
    match result {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            0
        }
        Err(e) => {
            let report = serde_json::json!({ "error": { "command": command, "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{report}");
            1
        }
    }
}
