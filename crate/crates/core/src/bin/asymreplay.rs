use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asymreplay::error::Error;
use asymreplay::par;
use asymreplay::report::{self, ExperimentConfig, ExperimentReport};
use asymreplay::stream::{self, SyntheticDatasetSpec};
use asymreplay::Method;

#[derive(Parser)]
#[command(name = "asymreplay", version, about = "Online continual learning with replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config over its seeds and write a report directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a grid of methods and buffer sizes, then compare them.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Comma-separated buffer sizes.
        #[arg(long, value_delimiter = ',')]
        buffer_sizes: Vec<usize>,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Tabulate finished reports against each other.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Print JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset file.
    GenDataset {
        #[arg(long)]
        input_dim: usize,
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        mean_scale: f64,
        #[arg(long, default_value_t = 0.05)]
        validation_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags named after config keys. Values are handed to the config parser
/// untouched so type errors name the key.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Arbitrary `key=value` override, dotted for sections (e.g. stream.blur=0.5).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Leave the timestamp out so reports are byte-identical across reruns.
    #[arg(long)]
    no_timestamp: bool,
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    buffer_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    replay_batch_size: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    incoming_tau: Option<String>,
    #[arg(long)]
    negative_policy: Option<String>,
    #[arg(long)]
    triplet_margin: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    feature_dim: Option<String>,
    #[arg(long)]
    execution: Option<String>,
    #[arg(long)]
    track_drift: Option<String>,
    #[arg(long)]
    track_grad_norms: Option<String>,
    /// stream.mode
    #[arg(long)]
    mode: Option<String>,
    /// stream.classes_per_task
    #[arg(long)]
    classes_per_task: Option<String>,
    /// stream.batch_size
    #[arg(long)]
    batch_size: Option<String>,
    /// stream.blur
    #[arg(long)]
    blur: Option<String>,
    /// stream.blurriness
    #[arg(long)]
    blurriness: Option<String>,
    /// stream.seed
    #[arg(long)]
    stream_seed: Option<String>,
    /// dataset.path
    #[arg(long)]
    dataset: Option<String>,
    /// dataset.seed
    #[arg(long)]
    dataset_seed: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let list = |v: &String| format!("[{v}]");
        let quoted = |v: &String| toml::Value::String(v.clone()).to_string();
        let named: [(&str, Option<String>); 23] = [
            ("method", self.method.clone()),
            ("seeds", self.seeds.as_ref().map(list)),
            ("buffer_size", self.buffer_size.clone()),
            ("lr", self.lr.clone()),
            ("replay_batch_size", self.replay_batch_size.clone()),
            ("eval_every", self.eval_every.clone()),
            ("gamma", self.gamma.clone()),
            ("tau", self.tau.clone()),
            ("incoming_tau", self.incoming_tau.clone()),
            ("negative_policy", self.negative_policy.clone()),
            ("triplet_margin", self.triplet_margin.clone()),
            ("hidden", self.hidden.as_ref().map(list)),
            ("feature_dim", self.feature_dim.clone()),
            ("execution", self.execution.clone()),
            ("track_drift", self.track_drift.clone()),
            ("track_grad_norms", self.track_grad_norms.clone()),
            ("stream.mode", self.mode.clone()),
            ("stream.classes_per_task", self.classes_per_task.clone()),
            ("stream.batch_size", self.batch_size.clone()),
            ("stream.blur", self.blur.clone()),
            ("stream.blurriness", self.blurriness.clone()),
            ("stream.seed", self.stream_seed.clone()),
            ("dataset.seed", self.dataset_seed.clone()),
        ];
        let mut out: Vec<(String, String)> = named
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect();
        if let Some(p) = &self.dataset {
            out.push(("dataset.path".into(), quoted(p)));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn load(&self) -> Result<ExperimentConfig, Error> {
        report::parse_config(self.config.as_deref(), &self.overrides()?)
    }

    fn timestamp(&self) -> Option<String> {
        if self.no_timestamp {
            return None;
        }
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()?
            .as_secs();
        Some(secs.to_string())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn finish(report: &ExperimentReport, dir: &Path) -> Result<(), Error> {
    report::write_report(report, dir)?;
    let aborted = report.runs.len() - report.completed().count();
    eprintln!(
        "{}: {} seed(s) ok, {aborted} aborted -> {}",
        report.label(),
        report.completed().count(),
        dir.display()
    );
    for r in &report.runs {
        if let report::SeedOutcome::Aborted { seed, diagnostic } = r {
            eprintln!("  seed {seed}: {diagnostic}");
        }
    }
    if aborted > 0 {
        return Err(Error::Contract(format!("{aborted} seed(s) aborted")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let report = report::run_experiment(&cfg, config.timestamp())?;
            finish(&report, &out)
        }
        Command::Sweep {
            config,
            methods,
            buffer_sizes,
            jobs,
            out,
        } => {
            let base = config.load()?;
            let methods = if methods.is_empty() { vec![base.method] } else { methods };
            let sizes = if buffer_sizes.is_empty() { vec![base.buffer_size] } else { buffer_sizes };
            let cells: Vec<ExperimentConfig> = methods
                .iter()
                .flat_map(|&m| {
                    let base = &base;
                    sizes.iter().map(move |&s| {
                        let mut c = base.clone();
                        c.method = m;
                        c.buffer_size = s;
                        c
                    })
                })
                .collect();
            for c in &cells {
                c.validate()?;
            }
            let stamp = config.timestamp();
            let sweep = || par::map(&cells, base.execution, |c| report::run_experiment(c, stamp.clone()));
            #[cfg(feature = "parallel")]
            let results = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Config(format!("jobs: {e}")))?
                .install(sweep);
            #[cfg(not(feature = "parallel"))]
            let results = {
                let _ = jobs;
                sweep()
            };
            let mut reports = Vec::new();
            let mut failed = None;
            for (c, r) in cells.iter().zip(results) {
                let r = r?;
                let dir = out.join(format!("{}_M{}", c.method, c.buffer_size));
                if let Err(e) = finish(&r, &dir) {
                    failed = Some(e);
                }
                reports.push(r);
            }
            if reports.len() > 1 {
                let table = report::compare(&reports)?;
                std::fs::write(out.join("comparison.txt"), table.to_text())?;
                std::fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&table)? + "\n")?;
                print!("{}", table.to_text());
            }
            failed.map_or(Ok(()), Err)
        }
        Command::Compare { reports, json } => {
            let loaded = reports
                .iter()
                .map(|p| {
                    let p = if p.is_dir() { p.join("report.json") } else { p.clone() };
                    report::read_report(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let table = report::compare(&loaded)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", table.to_text());
            }
            Ok(())
        }
        Command::GenDataset {
            input_dim,
            num_classes,
            samples_per_class,
            noise,
            mean_scale,
            validation_fraction,
            test_fraction,
            seed,
            out,
        } => {
            let mut spec = SyntheticDatasetSpec::new(input_dim, num_classes, samples_per_class, noise);
            spec.mean_scale = mean_scale;
            spec.validation_fraction = validation_fraction;
            spec.test_fraction = test_fraction;
            spec.validate()?;
            let ds = stream::make_synthetic(&spec, seed)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            ds.save(&mut w)?;
            std::io::Write::flush(&mut w)?;
            eprintln!(
                "wrote {} ({} train / {} val / {} test)",
                out.display(),
                ds.train.len(),
                ds.validation.len(),
                ds.test.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
