//! Command-line front end: dataset generation, training replicas,
//! gradient diagnostics, and result tables.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod gen_data;
pub mod report;
pub mod train_cmd;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use ctrnn_lab::cells::Arch;
use ctrnn_lab::data::Task;
use ctrnn_lab::diagnostics::{FlowNorm, DEFAULT_EPSILON};

use config::{Preset, RunConfig};
use diagnose::Suite;
pub use error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "ctrnn-lab",
    version,
    about = "Train and diagnose continuous-time recurrent networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file: a JSON object or `key=value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Dataset root; caches live in `<data>/cache`, MNIST IDX files in
    /// `<data>/mnist`.
    #[arg(long, env = "CTRNN_LAB_DATA", default_value = "data")]
    pub data: PathBuf,
}

impl RunArgs {
    /// Config file, then `--set`, then the dedicated flags, over the preset.
    pub fn resolve(&self, seed_key: &str, seed: Option<u64>) -> CliResult<RunConfig> {
        let mut user = match &self.config {
            Some(p) => config::load_config_file(p)?,
            None => Map::new(),
        };
        for s in &self.set {
            let (k, v) = config::parse_assignment(s).map_err(CliError::Usage)?;
            user.insert(k, v);
        }
        if let Some(t) = self.task {
            user.insert("task".into(), Value::String(t.name().into()));
        }
        if let Some(a) = self.arch {
            user.insert("arch".into(), Value::String(a.name().into()));
        }
        if let Some(s) = seed {
            user.insert(seed_key.into(), Value::from(s));
        }
        config::resolve(self.preset, user)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.data.join("cache")
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or verify) the train and test caches of a task.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Data seed of the generator.
        #[arg(long)]
        seed: Option<u64>,
        /// Cache directory; defaults to `<data>/cache`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory with the MNIST IDX files; defaults to `<data>/mnist`.
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
    /// Train seeded replicas of one architecture on a cached task.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Base training seed; replica `r` uses `seed + r`.
        #[arg(long)]
        seed: Option<u64>,
        /// Replicas trained concurrently; defaults to the replica count
        /// capped at the number of logical cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run a diagnostic suite; exits 1 when a check fails.
    Diagnose {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value = "odernn")]
        arch: Arch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// `row_sum`, `inf` or `spectral`.
        #[arg(long, default_value = "row_sum")]
        norm: FlowNorm,
        /// Hidden width of the theorem3 probes.
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value = "results/diagnostics")]
        out: PathBuf,
    },
    /// Merge result records into tables and plot-data CSVs.
    Report {
        /// Directory searched recursively for `result.json` files.
        #[arg(default_value = "results")]
        result_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |source| ctrnn_lab::Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)?;
    Ok(())
}

fn default_jobs(replicas: usize) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    replicas.min(cores).max(1)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            run,
            seed,
            out,
            mnist_dir,
        } => {
            let cfg = run.resolve("data_seed", seed)?;
            let dir = out.unwrap_or_else(|| run.cache_dir());
            let mnist = mnist_dir.unwrap_or_else(|| run.data.join("mnist"));
            for g in gen_data::gen_data(&cfg, &dir, &mnist)? {
                println!("{:?} {} ({} sequences)", g.status, g.path.display(), g.sequences);
            }
            Ok(())
        }
        Command::Train { run, seed, jobs, out } => {
            let cfg = run.resolve("seed", seed)?;
            let jobs = jobs.unwrap_or_else(|| default_jobs(cfg.replicas));
            let record = train_cmd::cmd_train(&cfg, &run.cache_dir(), &out, jobs)?;
            println!(
                "{} {}: {:.4} ± {:.4} over {} replica(s){}",
                record.task,
                record.arch,
                record.mean,
                record.std,
                record.replicas.len(),
                if record.partial { " [partial]" } else { "" }
            );
            Ok(())
        }
        Command::Diagnose {
            suite,
            arch,
            seed,
            epsilon,
            norm,
            hidden,
            probes,
            out,
        } => {
            if !(epsilon > 0.0 && epsilon < 1.0) {
                return Err(CliError::usage("epsilon must lie in (0, 1)"));
            }
            let report = match suite {
                Suite::Jacobians => diagnose::jacobians_suite(seed)?,
                Suite::Flow => diagnose::flow_suite(arch, seed, epsilon, norm)?,
                Suite::Theorem3 => {
                    if arch != Arch::OdeLstm && arch != Arch::OdeRnn {
                        log::warn!("theorem3 always probes odelstm cells");
                    }
                    diagnose::theorem3_suite(seed, hidden, probes, epsilon)?
                }
            };
            write_file(
                &out.join(format!("{}.json", report.suite)),
                &train_cmd::json_bytes(&report)?,
            )?;
            for (name, body) in &report.files {
                write_file(&out.join(name), body.as_bytes())?;
            }
            for c in &report.checks {
                println!("{} {}", if c.pass { "ok  " } else { "FAIL" }, c.line());
            }
            let failures = report.failures();
            if failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::Assertion(failures))
            }
        }
        Command::Report { result_dir, out } => {
            let out = out.unwrap_or_else(|| result_dir.clone());
            let rows = report::cmd_report(&result_dir, &out)?;
            print!("{}", report::markdown_table(&rows));
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
