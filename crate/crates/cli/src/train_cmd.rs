//! `train`: seeded replicas of one architecture on one task, their
//! per-replica artifacts, and the aggregate result record.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use ctrnn_lab::cells::Arch;
use ctrnn_lab::data::{IrregularSequence, Task};
use ctrnn_lab::model::{LossMode, Model, ModelDims};
use ctrnn_lab::train::{evaluate, split_validation, train, Divergence, Metric};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::gen_data::{load_split, Split};
use crate::write_file;

pub const REVISION: &str = env!("CTRNN_LAB_REVISION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEcho {
    pub name: String,
    pub rho: f64,
    pub eps: f64,
    /// The reference experiments do not report these constants; the values
    /// above are this implementation's defaults unless overridden.
    pub constants_reported: bool,
}

/// Per-replica summary. Every field except `wall_ms` is a deterministic
/// function of the config and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub task: Task,
    pub arch: Arch,
    pub replica: usize,
    pub seed: u64,
    pub param_count: usize,
    pub epochs_run: usize,
    pub optimizer_steps: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test_metric: f64,
    pub metric: Metric,
    pub diverged: Option<Divergence>,
    pub optimizer: OptimizerEcho,
    pub config: RunConfig,
    pub wall_ms: u64,
}

impl ReplicaSummary {
    /// Canonical JSON with the wall-clock field removed.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        v.as_object_mut().expect("object").remove("wall_ms");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEntry {
    pub replica: usize,
    pub seed: u64,
    pub test_metric: f64,
    pub diverged: bool,
}

/// Aggregate over the replicas of one (task, arch) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: Task,
    pub arch: Arch,
    pub metric: Metric,
    pub replicas_requested: usize,
    pub replicas: Vec<ReplicaEntry>,
    /// Mean and sample standard deviation over replicas that did not diverge.
    pub mean: f64,
    pub std: f64,
    pub single_sample: bool,
    /// Set when a replica diverged or is missing.
    pub partial: bool,
    pub revision: String,
    pub wall_ms: u64,
    pub config: RunConfig,
}

/// `(mean, sample std)`; the std of fewer than two values is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ResultRecord {
    pub fn from_replicas(cfg: &RunConfig, summaries: &[ReplicaSummary], wall_ms: u64) -> Self {
        let replicas: Vec<ReplicaEntry> = summaries
            .iter()
            .map(|s| ReplicaEntry {
                replica: s.replica,
                seed: s.seed,
                test_metric: s.test_metric,
                diverged: s.diverged.is_some(),
            })
            .collect();
        let ok: Vec<f64> = replicas.iter().filter(|r| !r.diverged).map(|r| r.test_metric).collect();
        let (mean, std) = mean_std(&ok);
        ResultRecord {
            task: cfg.task,
            arch: cfg.train.arch,
            metric: metric_for(cfg.train.loss_mode),
            replicas_requested: cfg.replicas,
            single_sample: ok.len() == 1,
            partial: ok.len() < cfg.replicas,
            mean,
            std,
            replicas,
            revision: REVISION.to_string(),
            wall_ms,
            config: cfg.clone(),
        }
    }
}

pub fn metric_for(mode: LossMode) -> Metric {
    match mode {
        LossMode::FinalStep => Metric::AccuracyFinal,
        LossMode::PerStep => Metric::AccuracyPerStep,
    }
}

/// Everything one replica produces; files are written by the caller.
pub struct ReplicaOutput {
    pub summary: ReplicaSummary,
    pub history_csv: String,
    pub model: Model,
}

pub struct Splits {
    pub train: Vec<IrregularSequence>,
    pub val: Vec<IrregularSequence>,
    pub test: Vec<IrregularSequence>,
}

impl Splits {
    /// Loads cached train/test data and holds out the seeded validation part.
    pub fn load(cfg: &RunConfig, cache_dir: &Path) -> CliResult<Self> {
        let train = load_split(cfg, cache_dir, Split::Train)?;
        let test = load_split(cfg, cache_dir, Split::Test)?;
        let (train, val) = split_validation(train, cfg.val_fraction, cfg.data_seed)?;
        Ok(Splits { train, val, test })
    }
}

pub fn run_replica(cfg: &RunConfig, replica: usize, data: &Splits) -> CliResult<ReplicaOutput> {
    let start = Instant::now();
    let mut tc = cfg.train.clone();
    tc.seed = cfg.train.seed.wrapping_add(replica as u64);
    let dims = ModelDims {
        in_dim: data.train[0].dim(),
        hidden: tc.hidden_dim,
        classes: cfg.classes(),
    };
    let model = Model::init(tc.arch, dims, tc.init, tc.solver, tc.seed)?;
    let param_count = model.param_count();
    let outcome = train(model, &data.train, &data.val, &tc)?;
    let metric = metric_for(tc.loss_mode);
    let test_metric = evaluate(&outcome.model, &data.test, metric)?;
    let mut echo = cfg.clone();
    echo.train.seed = tc.seed;
    let summary = ReplicaSummary {
        task: cfg.task,
        arch: tc.arch,
        replica,
        seed: tc.seed,
        param_count,
        epochs_run: outcome.history.len(),
        optimizer_steps: outcome.optimizer_steps,
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
        test_metric,
        metric,
        diverged: outcome.diverged.clone(),
        optimizer: OptimizerEcho {
            name: "rmsprop".into(),
            rho: tc.rho,
            eps: tc.eps,
            constants_reported: false,
        },
        config: echo,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    log::info!(
        "{} {} replica {replica}: test {:.4} (best epoch {})",
        cfg.task,
        tc.arch,
        test_metric,
        outcome.best_epoch
    );
    Ok(ReplicaOutput {
        summary,
        history_csv: outcome.history_csv(),
        model: outcome.model,
    })
}

/// `<out>/<task>/<arch>`.
pub fn run_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join(cfg.task.name()).join(cfg.train.arch.name())
}

pub fn replica_dir(run: &Path, replica: usize) -> PathBuf {
    run.join(format!("replica-{replica}"))
}

/// Runs all replicas with at most `jobs` in flight and writes
/// `history.csv`, `summary.json` and `params.bin` per replica plus
/// `result.json` for the run.
pub fn cmd_train(cfg: &RunConfig, cache_dir: &Path, out: &Path, jobs: usize) -> CliResult<ResultRecord> {
    let start = Instant::now();
    let data = Splits::load(cfg, cache_dir)?;
    let jobs = jobs.clamp(1, cfg.replicas);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<ReplicaOutput>>>> = Mutex::new((0..cfg.replicas).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= cfg.replicas {
                    break;
                }
                let res = run_replica(cfg, r, &data);
                slots.lock().expect("no poisoned workers")[r] = Some(res);
            });
        }
    });

    let dir = run_dir(out, cfg);
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (r, slot) in slots.into_inner().expect("workers joined").into_iter().enumerate() {
        match slot.expect("every replica ran") {
            Ok(o) => {
                let rd = replica_dir(&dir, r);
                write_file(&rd.join("history.csv"), o.history_csv.as_bytes())?;
                write_file(&rd.join("summary.json"), json_bytes(&o.summary)?.as_slice())?;
                o.model.save(&rd.join("params.bin"))?;
                summaries.push(o.summary);
            }
            Err(e) => {
                log::error!("replica {r} failed: {e}");
                failures.push(e);
            }
        }
    }
    if summaries.is_empty() {
        return Err(failures
            .into_iter()
            .next()
            .unwrap_or_else(|| CliError::usage("no replicas ran")));
    }
    let record = ResultRecord::from_replicas(cfg, &summaries, start.elapsed().as_millis() as u64);
    let record = ResultRecord {
        partial: record.partial || !failures.is_empty(),
        ..record
    };
    write_file(&dir.join("result.json"), json_bytes(&record)?.as_slice())?;
    Ok(record)
}

pub fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(ctrnn_lab::Error::from)?;
    s.push('\n');
    Ok(s.into_bytes())
}
