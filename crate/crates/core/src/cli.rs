//! The `etn` command line: `generate`, `train` and `sweep`.
//!
//! Experiments are described by a TOML file:
//!
//! ```toml
//! seeds = [0, 1, 2]
//! plot = false
//! out = "runs/default"      # optional; --out and ETN_OUT_ROOT also apply
//! # data = "task.csv"       # a CSV task instead of a [task] table
//!
//! [task]                    # datagen::TaskSpec fields
//! target_classes = [0, 1, 2, 3]
//!
//! [train]                   # trainer::TrainConfig fields
//! variant = "etn"
//! total_iterations = 3000
//! ```
//!
//! Omitted fields take their defaults. Command-line flags override the file.
//! Each run directory receives the fully resolved configuration as
//! `config.toml`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, PdaTask, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, line_chart};
use crate::trainer::{self, SweepRow, TrainConfig, Variant};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "ETN_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "etn", version, about = "Partial domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task and write it as CSV.
    Generate(GenerateArgs),
    /// Train one variant over one or more seeds.
    Train(TrainArgs),
    /// Train variants over a grid of target label-set sizes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Task spec (bare fields or an experiment file with a [task] table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to the config's `out`, else `$ETN_OUT_ROOT/<command>`, else `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also write SVG charts.
    #[arg(long)]
    pub plot: bool,
    /// Override `train.total_iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// CSV task to train on instead of the configured spec.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated target label-set sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub target_sizes: Vec<usize>,
    /// Comma-separated variants. Defaults to all five.
    #[arg(long = "variant", value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub plot: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: None,
            data: None,
            train: TrainConfig::default(),
            out: None,
            seeds: default_seeds(),
            plot: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| prefix(path, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checks the invariants that hold for every subcommand.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.task.is_some() && self.data.is_some() {
            p.push("give either a [task] spec or a data path, not both".to_owned());
        }
        if self.seeds.is_empty() {
            p.push("seeds must be nonempty".to_owned());
        }
        let mut seen = BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                p.push(format!("duplicate seed {s}"));
            }
        }
        for r in [
            self.task.as_ref().map(TaskSpec::validate),
            Some(self.train.validate()),
        ]
        .into_iter()
        .flatten()
        {
            if let Err(Error::Validation(mut v)) = r {
                p.append(&mut v);
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    fn apply(&mut self, c: &CommonArgs) {
        if let Some(s) = c.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = &c.seeds {
            self.seeds = s.clone();
        }
        if let Some(o) = &c.out {
            self.out = Some(o.clone());
        }
        if let Some(n) = c.iterations {
            self.train.total_iterations = n;
        }
        self.plot |= c.plot;
    }

    fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }

    fn spec(&self) -> TaskSpec {
        self.task.clone().unwrap_or_default()
    }
}

fn prefix(path: &Path, e: Error) -> Error {
    match e {
        Error::Validation(v) => Error::Validation(
            v.into_iter()
                .map(|m| format!("{}: {m}", path.display()))
                .collect(),
        ),
        other => other,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Process exit code for an error: 2 for usage and validation problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Validation(_) | Error::Parse { .. } | Error::NotApplicable(_) => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the exit code. Diagnostics
/// go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                Error::Validation(v) => {
                    eprintln!("error: invalid configuration");
                    for m in v {
                        eprintln!("  - {m}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

fn load_spec(path: &Path) -> Result<TaskSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?;
    let spec = if table.contains_key("task") || table.contains_key("train") {
        ExperimentConfig::from_toml(&text)
            .map_err(|e| prefix(path, e))?
            .spec()
    } else {
        toml::from_str(&text)
            .map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?
    };
    Ok(spec)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => load_spec(p)?,
        None => TaskSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let task = datagen::generate(&spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    datagen::export_csv(&task, &a.out)?;
    eprintln!(
        "wrote {} source + {} target rows to {}",
        task.source.len(),
        task.target.len(),
        a.out.display()
    );
    Ok(())
}

/// Result of one seed of `etn train`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub accuracy: f64,
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn run_one(cfg: &ExperimentConfig, fixed: Option<&PdaTask>, seed: u64, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let generated;
    let task = match fixed {
        Some(t) => t,
        None => {
            generated = datagen::generate(&TaskSpec {
                seed,
                ..cfg.spec()
            })?;
            &generated
        }
    };
    let config = TrainConfig {
        seed,
        ..cfg.train.fitted_to(task)
    };
    let mut resolved = cfg.clone();
    resolved.train = config.clone();
    resolved.seeds = vec![seed];
    resolved.out = Some(dir.to_path_buf());
    if resolved.data.is_none() {
        resolved.task = Some(TaskSpec {
            seed,
            ..cfg.spec()
        });
    }
    write_resolved(dir, &resolved)?;

    let start = Instant::now();
    let (params, history) = match trainer::train(task, &config) {
        Ok(r) => r,
        Err(Error::Diverged(snap)) => {
            let path = dir.join("divergence.json");
            let body = serde_json::to_string_pretty(&*snap).map_err(|e| Error::Format(e.to_string()))?;
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            eprintln!("diagnostic snapshot written to {}", path.display());
            return Err(Error::Diverged(snap));
        }
        Err(e) => return Err(e),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let report = eval::build_report(&params, task, &config, history, elapsed)?;
    eval::emit_report(&report, task, dir, cfg.plot)?;
    params.save(&dir.join("checkpoint.bin"))?;
    Ok(RunOutcome {
        seed,
        dir: dir.to_path_buf(),
        accuracy: report.final_target_accuracy,
    })
}

fn run_in_pool<T: Send, F: Fn(usize) -> T + Sync + Send>(jobs: usize, n: usize, f: F) -> Result<Vec<T>> {
    if jobs <= 1 {
        return Ok((0..n).map(f).collect());
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<RunOutcome>> {
    if a.common.jobs == 0 {
        return Err(Error::Usage("--jobs must be >= 1".into()));
    }
    let mut cfg = load_config(a.common.config.as_deref())?;
    cfg.apply(&a.common);
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
        cfg.task = None;
    }
    cfg.validate()?;
    let fixed = match &cfg.data {
        Some(p) => Some(datagen::load_csv(p)?),
        None => None,
    };
    let root = cfg.output_dir("train");
    let results = run_in_pool(a.common.jobs, cfg.seeds.len(), |k| {
        let seed = cfg.seeds[k];
        run_one(&cfg, fixed.as_ref(), seed, &root.join(format!("seed_{seed}")))
    })?;
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;

    let accs: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let path = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["variant", "seeds", "mean_accuracy", "std_accuracy"]).map_err(io)?;
    w.write_record([
        cfg.train.variant.to_string(),
        accs.len().to_string(),
        mean.to_string(),
        std.to_string(),
    ])
    .map_err(io)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    for o in &outcomes {
        eprintln!("seed {}: target accuracy {:.4}", o.seed, o.accuracy);
    }
    eprintln!("{}: mean {mean:.4} std {std:.4}", cfg.train.variant);
    Ok(outcomes)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    if a.common.jobs == 0 {
        return Err(Error::Usage("--jobs must be >= 1".into()));
    }
    let mut cfg = load_config(a.common.config.as_deref())?;
    cfg.apply(&a.common);
    if cfg.data.is_some() {
        return Err(Error::Usage(
            "sweep builds its tasks from a spec; a data path cannot be swept".into(),
        ));
    }
    cfg.validate()?;
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let mut seen = BTreeSet::new();
    if let Some(v) = variants.iter().find(|v| !seen.insert(**v)) {
        return Err(Error::Validation(vec![format!("duplicate variant {v}")]));
    }
    let spec = cfg.spec();
    let rows = trainer::sweep_class_overlap(
        &spec,
        &a.target_sizes,
        &variants,
        &cfg.seeds,
        &cfg.train,
        a.common.jobs,
    )?;

    let root = cfg.output_dir("sweep");
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    write_resolved(&root, &cfg)?;
    let path = root.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["target_classes", "variant", "seed", "accuracy", "status"]).map_err(io)?;
    for r in &rows {
        w.write_record([
            r.target_classes.to_string(),
            r.variant.to_string(),
            r.seed.to_string(),
            r.accuracy.map(|x| x.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if cfg.plot {
        let series: Vec<(String, Vec<(f64, f64)>)> = variants
            .iter()
            .map(|&v| {
                let pts = a
                    .target_sizes
                    .iter()
                    .filter_map(|&t| {
                        let accs: Vec<f64> = rows
                            .iter()
                            .filter(|r| r.variant == v && r.target_classes == t)
                            .filter_map(|r| r.accuracy)
                            .collect();
                        (!accs.is_empty()).then(|| (t as f64, mean_std(&accs).0))
                    })
                    .collect();
                (v.to_string(), pts)
            })
            .collect();
        let svg = root.join("sweep.svg");
        fs::write(&svg, line_chart("Accuracy by number of target classes", "target classes", &series))
            .map_err(|e| Error::io(&svg, e))?;
    }

    let failed = rows.iter().filter(|r| r.accuracy.is_none()).count();
    eprintln!(
        "{} cells, {failed} failed, results in {}",
        rows.len(),
        path.display()
    );
    if failed == rows.len() && !rows.is_empty() {
        return Err(Error::Numeric("every sweep cell failed".into()));
    }
    Ok(rows)
}
