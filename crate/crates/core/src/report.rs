//! Experiment configs, multi-seed runs, report files and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Method, NegativePolicy};
use crate::par::{self, Execution};
use crate::stream::{self, Dataset, StreamConfig, SyntheticDatasetSpec};
use crate::trainer::{self, ModelConfig, RunReport, TrainerConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where the data comes from: a dataset file or a synthetic spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDatasetSpec>,
    /// Seed of the synthetic generator.
    #[serde(default)]
    pub seed: u64,
}

impl DatasetConfig {
    pub fn synthetic(spec: SyntheticDatasetSpec, seed: u64) -> Self {
        DatasetConfig {
            path: None,
            synthetic: Some(spec),
            seed,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => stream::load_dataset(p),
            (None, Some(spec)) => stream::make_synthetic(spec, self.seed),
            _ => Err(Error::Config(
                "dataset: exactly one of `path` or `synthetic` is required".into(),
            )),
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_buffer_size")]
    pub buffer_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_ten")]
    pub replay_batch_size: usize,
    #[serde(default = "default_ten")]
    pub eval_every: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Prototype-head temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Temperature of the incoming metric loss, when it should differ from `tau`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incoming_tau: Option<f64>,
    #[serde(default)]
    pub negative_policy: NegativePolicy,
    #[serde(default = "default_margin")]
    pub triplet_margin: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_true")]
    pub track_drift: bool,
    #[serde(default = "default_true")]
    pub track_grad_norms: bool,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub stream: StreamSection,
    pub dataset: DatasetConfig,
}

/// Stream settings plus an optional blurriness target that replaces `blur`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(flatten)]
    pub config: StreamConfig,
    /// Target mean distinct labels per batch for blurry streams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blurriness: Option<f64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_buffer_size() -> usize {
    100
}
fn default_lr() -> f64 {
    trainer::DEFAULT_LR
}
fn default_ten() -> usize {
    10
}
fn default_gamma() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    crate::network::DEFAULT_TAU
}
fn default_margin() -> f64 {
    0.2
}
fn default_hidden() -> Vec<usize> {
    crate::network::DEFAULT_HIDDEN.to_vec()
}
fn default_feature_dim() -> usize {
    crate::network::DEFAULT_FEATURE_DIM
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Defaults everywhere except the method and the data.
    pub fn new(method: Method, dataset: DatasetConfig) -> Self {
        let text = format!("method = \"{}\"\n[dataset]\n", method.name());
        let mut cfg: ExperimentConfig = toml::from_str(&text).expect("defaults parse");
        cfg.dataset = dataset;
        cfg
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            method: self.method,
            gamma: self.gamma,
            tau: self.incoming_tau,
            negative_policy: self.negative_policy,
            triplet_margin: self.triplet_margin,
        }
    }

    pub fn trainer_config(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            loss: self.loss_config(),
            lr: self.lr,
            replay_batch_size: self.replay_batch_size,
            eval_every: self.eval_every,
            buffer_size: self.buffer_size,
            model: ModelConfig {
                hidden: self.hidden.clone(),
                feature_dim: self.feature_dim,
                tau: self.tau,
            },
            seed,
            track_drift: self.track_drift,
            track_grad_norms: self.track_grad_norms,
            execution: self.execution,
        }
    }

    /// Stream config of one seeded run (the shuffle seed is offset by the run seed).
    pub fn stream_config(&self, dataset: &Dataset, seed: u64) -> Result<StreamConfig> {
        let mut sc = self.stream.config.clone();
        sc.seed = sc.seed.wrapping_add(seed);
        if let Some(level) = self.stream.blurriness {
            sc.mode = stream::StreamMode::Blurry;
            sc.blur = stream::calibrate_blur(&dataset.train_counts(), sc.batch_size, level)?;
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        self.trainer_config(0).validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn config_error(e: toml::de::Error) -> Error {
    Error::Config(e.to_string().trim_end().to_string())
}

/// Parses a config document, applies `key=value` overrides (dotted keys for
/// sections, values in TOML syntax with bare strings accepted), and rejects
/// unknown keys.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = text.parse().map_err(config_error)?;
    for (key, raw) in overrides {
        let value = parse_value(raw);
        let mut table = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: `{p}` is not a section")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    // Re-rendering keeps source spans, so errors point at the offending key.
    let merged = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
    let cfg: ExperimentConfig = toml::from_str(&merged).map_err(config_error)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

/// Mean and standard error (sample std / √n) of per-seed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, stderr, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub aaa: Option<Stat>,
    pub final_accuracy: Option<Stat>,
    pub forgetting: Option<Stat>,
    pub current_task_accuracy: Option<Stat>,
    pub mean_drift: Option<Stat>,
    pub train_flops: Option<Stat>,
    pub inference_flops: Option<Stat>,
    pub memory_bytes: Option<Stat>,
}

impl Aggregate {
    pub fn from_runs<'a>(runs: impl Iterator<Item = &'a RunReport> + Clone) -> Aggregate {
        let col = |f: &dyn Fn(&RunReport) -> Option<f64>| -> Option<Stat> {
            Stat::of(&runs.clone().filter_map(f).collect::<Vec<_>>())
        };
        Aggregate {
            aaa: col(&|r| r.metrics.aaa()),
            final_accuracy: col(&|r| r.metrics.final_accuracy()),
            forgetting: col(&|r| r.metrics.forgetting()),
            current_task_accuracy: col(&|r| r.metrics.mean_current_task_accuracy()),
            mean_drift: col(&|r| {
                let d = &r.metrics.drift;
                (!d.is_empty()).then(|| d.iter().map(|v| v.value).sum::<f64>() / d.len() as f64)
            }),
            train_flops: col(&|r| Some(r.ledger.train_flops as f64)),
            inference_flops: col(&|r| Some(r.ledger.inference_flops as f64)),
            memory_bytes: col(&|r| Some(r.ledger.mean_memory_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SeedOutcome {
    Ok { report: Box<RunReport> },
    Aborted { seed: u64, diagnostic: String },
}

/// Multi-seed result of one experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub library_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedOutcome>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    pub fn completed(&self) -> impl Iterator<Item = &RunReport> + Clone {
        self.runs.iter().filter_map(|r| match r {
            SeedOutcome::Ok { report } => Some(report.as_ref()),
            SeedOutcome::Aborted { .. } => None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ExperimentReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Label used in comparison rows.
    pub fn label(&self) -> String {
        let c = &self.config;
        let mut s = format!("{} M={}", c.method, c.buffer_size);
        if c.method.is_metric() {
            let p = match c.negative_policy {
                NegativePolicy::IncomingOnly => "incoming",
                NegativePolicy::AllClasses => "all",
            };
            let _ = write!(s, " neg={p}");
        }
        if let Some(n) = &c.name {
            s = format!("{n} ({s})");
        }
        s
    }
}

/// Runs every seed of `cfg`. Aborted seeds are recorded and do not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, timestamp: Option<String>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    // Config problems that need the dataset surface here, not as aborted seeds.
    cfg.stream_config(&dataset, 0)?.validate(dataset.num_classes)?;
    let outcomes = par::map(&cfg.seeds, cfg.execution, |&seed| {
        let result = cfg
            .stream_config(&dataset, seed)
            .and_then(|sc| trainer::run(&dataset, &sc, &cfg.trainer_config(seed)));
        match result {
            Ok(report) => SeedOutcome::Ok {
                report: Box::new(report),
            },
            Err(e) => SeedOutcome::Aborted {
                seed,
                diagnostic: e.to_string(),
            },
        }
    });
    let mut report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        library_version: LIBRARY_VERSION.to_string(),
        timestamp,
        config: cfg.clone(),
        runs: outcomes,
        aggregate: Aggregate::from_runs(std::iter::empty()),
    };
    report.aggregate = Aggregate::from_runs(report.completed());
    Ok(report)
}

/// Writes `report.json`, the stream metadata sidecar and the plot-data files.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    if let Some(first) = report.completed().next() {
        std::fs::write(
            dir.join("stream_meta.json"),
            serde_json::to_string_pretty(&first.stream)? + "\n",
        )?;
    }
    let mut aa = String::from("seed\tstep\tanytime_accuracy\tcurrent_task_accuracy\n");
    let mut drift = String::from("seed\tstep\tdrift\n");
    let mut grads = String::from("seed\tstep\told_feature_grad_norm\told_prototype_grad_norm\n");
    let mut matrix = String::from("seed\tstep\ttask\taccuracy\n");
    for r in report.completed() {
        let m = &r.metrics;
        for (i, &s) in m.eval_steps.iter().enumerate() {
            let _ = writeln!(aa, "{}\t{s}\t{}\t{}", r.seed, m.anytime_accuracy[i], m.current_task_accuracy[i]);
            for (t, a) in m.accuracy[i].iter().enumerate() {
                let _ = writeln!(matrix, "{}\t{s}\t{t}\t{a}", r.seed);
            }
        }
        for v in &m.drift {
            let _ = writeln!(drift, "{}\t{}\t{}", r.seed, v.step, v.value);
        }
        for (f, p) in m.old_feature_grad_norm.iter().zip(&m.old_prototype_grad_norm) {
            let _ = writeln!(grads, "{}\t{}\t{}\t{}", r.seed, f.step, f.value, p.value);
        }
    }
    std::fs::write(dir.join("anytime_accuracy.tsv"), aa)?;
    std::fs::write(dir.join("drift.tsv"), drift)?;
    std::fs::write(dir.join("grad_norms.tsv"), grads)?;
    std::fs::write(dir.join("accuracy_matrix.tsv"), matrix)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    ExperimentReport::from_json(&std::fs::read_to_string(path)?)
}

/// Columns of the comparison table.
pub const COMPARE_COLUMNS: [&str; 4] = ["aaa", "final_accuracy", "train_flops", "memory_bytes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub stat: Option<Stat>,
    pub best: bool,
    /// Within one standard error of the best entry.
    pub within_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn stream_signature(cfg: &ExperimentConfig) -> (StreamSection, DatasetConfig) {
    (cfg.stream.clone(), cfg.dataset.clone())
}

/// Rows = reports, columns = AAA, final accuracy, training FLOPs, memory.
/// Accuracy columns prefer higher values, cost columns lower ones.
pub fn compare(reports: &[ExperimentReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config("compare needs at least two reports".into()));
    }
    let sig = stream_signature(&reports[0].config);
    for r in &reports[1..] {
        if stream_signature(&r.config) != sig {
            return Err(Error::Config(format!(
                "report `{}` uses a different stream or dataset than `{}`; results are not comparable",
                r.label(),
                reports[0].label()
            )));
        }
    }
    let pick = |a: &Aggregate, col: &str| match col {
        "aaa" => a.aaa,
        "final_accuracy" => a.final_accuracy,
        "train_flops" => a.train_flops,
        "memory_bytes" => a.memory_bytes,
        _ => None,
    };
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label(),
            cells: BTreeMap::new(),
        })
        .collect();
    for col in COMPARE_COLUMNS {
        let higher = matches!(col, "aaa" | "final_accuracy");
        let stats: Vec<Option<Stat>> = reports.iter().map(|r| pick(&r.aggregate, col)).collect();
        let best = stats
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s)))
            .reduce(|a, b| {
                let better = if higher { b.1.mean > a.1.mean } else { b.1.mean < a.1.mean };
                if better {
                    b
                } else {
                    a
                }
            });
        for (i, s) in stats.iter().enumerate() {
            let (is_best, within) = match (best, s) {
                (Some((bi, bs)), Some(s)) => {
                    let gap = if higher { bs.mean - s.mean } else { s.mean - bs.mean };
                    (bi == i, gap <= bs.stderr.max(s.stderr))
                }
                _ => (false, false),
            };
            rows[i].cells.insert(
                col.to_string(),
                Cell {
                    stat: *s,
                    best: is_best,
                    within_error: within,
                },
            );
        }
    }
    Ok(Comparison {
        columns: COMPARE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

impl Comparison {
    /// Plain-text table; `*` marks entries within one standard error of the best.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<36}", "method");
        for c in &self.columns {
            let _ = write!(out, " {c:>24}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<36}", r.label);
            for c in &self.columns {
                let cell = &r.cells[c];
                let text = match cell.stat {
                    Some(s) if c.ends_with("accuracy") || c == "aaa" => {
                        format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.stderr)
                    }
                    Some(s) => format!("{:.4e} ± {:.1e}", s.mean, s.stderr),
                    None => "-".into(),
                };
                let mark = if cell.within_error { "*" } else { " " };
                let _ = write!(out, " {:>23}{mark}", text);
            }
            out.push('\n');
        }
        out
    }
}
