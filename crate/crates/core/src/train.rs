//! Masked sequence losses, RMSprop, and the epoch loop.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{Arch, InitMode, ParamTensors};
use crate::data::{make_batches, IrregularBatch, IrregularSequence, Label};
use crate::error::{Error, Result};
use crate::model::{LossMode, Model};
use crate::solver::SolverSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// `None` selects the architecture's default integrator.
    pub solver: Option<SolverSpec>,
    pub loss_mode: LossMode,
    pub init: InitMode,
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::OdeLstm,
            hidden_dim: 64,
            batch_size: 256,
            learning_rate: 5e-3,
            epochs: 500,
            seed: 0,
            solver: None,
            loss_mode: LossMode::FinalStep,
            init: InitMode::Training,
            rho: RMSPROP_RHO,
            eps: RMSPROP_EPS,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Epoch budget used for real-world data.
    pub const REAL_DATA_EPOCHS: usize = 200;

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::contract("batch size and hidden size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return Err(Error::contract("rmsprop needs 0 <= rho < 1 and eps > 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Index of the last observed step of each row, from a `batch × maxlen`
/// 0/1 mask.
fn last_valid(mask: &Tensor) -> Result<Vec<usize>> {
    (0..mask.rows())
        .map(|i| {
            mask.row(i)
                .iter()
                .rposition(|m| *m != 0.0)
                .ok_or_else(|| Error::contract(format!("sequence {i} has no observed step")))
        })
        .collect()
}

fn step_label(label: &Label, t: usize) -> usize {
    match label {
        Label::Class(c) => *c,
        Label::PerStep(l) => l[t],
    }
}

/// Mean cross-entropy. `logits` pairs a step index with `batch × classes`
/// logits; final-step mode needs an entry at each row's last observed step,
/// per-step mode one for every step.
pub fn sequence_loss<'t>(
    logits: &[(usize, Var<'t>)],
    labels: &[Label],
    mask: &Tensor,
    mode: LossMode,
) -> Result<Var<'t>> {
    let rows = mask.rows();
    if labels.len() != rows {
        return Err(Error::dim(
            "sequence_loss",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    let last = last_valid(mask)?;
    let observed: f64 = mask.data().iter().sum();
    let mut total: Option<Var<'t>> = None;
    let mut covered = vec![false; rows];
    for (t, z) in logits {
        if z.rows() != rows || *t >= mask.cols() {
            return Err(Error::dim(
                "sequence_loss",
                format!(
                    "logits at step {t} have {} rows, mask is {rows}x{}",
                    z.rows(),
                    mask.cols()
                ),
            ));
        }
        let weights: Vec<f64> = (0..rows)
            .map(|i| match mode {
                LossMode::FinalStep if last[i] == *t => {
                    covered[i] = true;
                    1.0 / rows as f64
                }
                LossMode::FinalStep => 0.0,
                LossMode::PerStep => {
                    covered[i] |= mask.get(i, *t) != 0.0;
                    mask.get(i, *t) / observed
                }
            })
            .collect();
        if weights.iter().all(|w| *w == 0.0) {
            continue;
        }
        let y: Vec<usize> = labels.iter().map(|l| step_label(l, *t)).collect();
        let term = z.softmax_cross_entropy(Rc::new(y), Rc::new(weights))?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(Error::contract(format!("no logits cover sequence {i}")));
    }
    total.ok_or_else(|| Error::contract("no logits supplied"))
}

/// Running mean of squared gradients, one accumulator per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub rho: f64,
    pub eps: f64,
    pub acc: Vec<Tensor>,
}

impl RmspropState {
    pub fn new(params: &impl ParamTensors, rho: f64, eps: f64) -> Self {
        RmspropState {
            rho,
            eps,
            acc: params
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }
}

/// `acc ← ρ·acc + (1−ρ)·g²`, `θ ← θ − lr·g/√(acc+ε)`. Nothing is modified
/// if any gradient entry is non-finite.
pub fn rmsprop_step(params: &mut impl ParamTensors, grads: &[Tensor], state: &mut RmspropState, lr: f64) -> Result<()> {
    let named = params.tensors();
    if grads.len() != named.len() || state.acc.len() != named.len() {
        return Err(Error::dim(
            "rmsprop_step",
            format!(
                "{} params, {} grads, {} accumulators",
                named.len(),
                grads.len(),
                state.acc.len()
            ),
        ));
    }
    for ((name, p), g) in named.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "rmsprop_step",
                format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {name}"),
            });
        }
    }
    let (rho, eps) = (state.rho, state.eps);
    for ((p, g), acc) in params.tensors_mut().into_iter().zip(grads).zip(&mut state.acc) {
        for ((w, g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *a = rho * *a + (1.0 - rho) * g * g;
            *w -= lr * g / (*a + eps).sqrt();
        }
    }
    Ok(())
}

/// Scales `grads` in place so that their joint 2-norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Loss and parameter gradients (in [`ParamTensors`] order) on one batch.
pub fn loss_and_grads(model: &Model, batch: &IrregularBatch, mode: LossMode) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let fwd = model.forward(&tape, batch, mode)?;
    let loss = sequence_loss(&fwd.logits, &batch.labels, &batch.mask, mode)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), fwd.leaves.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Worst disagreement between a parameter tensor's reverse-mode gradient
/// and central finite differences of the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub param: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares every parameter gradient of the batch loss with central
/// differences of step `h`. The relative error of an entry is
/// `|g − d| / max(|g|, |d|, floor)`.
pub fn check_gradients(
    model: &Model,
    batch: &IrregularBatch,
    mode: LossMode,
    h: f64,
    floor: f64,
) -> Result<Vec<GradientCheck>> {
    let (_, grads) = loss_and_grads(model, batch, mode)?;
    let loss_at = |m: &Model| -> Result<f64> {
        let tape = Tape::new();
        let fwd = m.forward(&tape, batch, mode)?;
        Ok(sequence_loss(&fwd.logits, &batch.labels, &batch.mask, mode)?
            .value()
            .item())
    };
    let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let len = grads[k].len();
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for i in 0..len {
            let mut plus = model.clone();
            plus.tensors_mut()[k].data_mut()[i] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[k].data_mut()[i] -= h;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let g = grads[k].data()[i];
            let err = (g - fd).abs();
            abs = abs.max(err);
            rel = rel.max(err / g.abs().max(fd.abs()).max(floor));
        }
        out.push(GradientCheck {
            param: name.to_string(),
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AccuracyFinal,
    AccuracyPerStep,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, v)| {
                if *v > best.1 {
                    (i, *v)
                } else {
                    best
                }
            },
        )
        .0
}

/// Batch size used when scoring; scoring needs no gradients, so it is
/// limited only by memory.
pub const EVAL_BATCH: usize = 500;

/// Fraction of correct argmax predictions.
pub fn evaluate(model: &Model, data: &[IrregularSequence], metric: Metric) -> Result<f64> {
    let mode = match metric {
        Metric::AccuracyFinal => LossMode::FinalStep,
        Metric::AccuracyPerStep => LossMode::PerStep,
    };
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in make_batches(data, EVAL_BATCH, 0, false)? {
        let tape = Tape::new();
        let fwd = model.forward(&tape, &batch, mode)?;
        let last = last_valid(&batch.mask)?;
        for (t, z) in &fwd.logits {
            let z = z.value();
            #[allow(clippy::needless_range_loop)]
            for i in 0..batch.batch_size() {
                let scored = match mode {
                    LossMode::FinalStep => last[i] == *t,
                    LossMode::PerStep => batch.mask.get(i, *t) != 0.0,
                };
                if scored {
                    total += 1;
                    correct += usize::from(argmax(z.row(i)) == step_label(&batch.labels[i], *t));
                }
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val: f64,
    pub model: Model,
    pub optimizer_steps: usize,
    pub diverged: Option<Divergence>,
}

impl TrainOutcome {
    /// `epoch,train_loss,val_metric,wall_ms` with a header row.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_metric,wall_ms\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_metric, r.wall_ms
            ));
        }
        out
    }
}

/// Seeded split of `data` into `(train, validation)` holding out
/// `round(fraction · n)` sequences, at least one of each when `n ≥ 2`.
pub fn split_validation(
    data: Vec<IrregularSequence>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<IrregularSequence>, Vec<IrregularSequence>)> {
    if !(0.0..1.0).contains(&fraction) || data.len() < 2 {
        return Err(Error::contract(
            "validation split needs 0 <= fraction < 1 and two sequences",
        ));
    }
    let n = data.len();
    let held = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for i in &order[..held] {
        is_val[*i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = data.into_iter().zip(is_val).partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        val.into_iter().map(|(s, _)| s).collect(),
    ))
}

fn metric_for(mode: LossMode) -> Metric {
    match mode {
        LossMode::FinalStep => Metric::AccuracyFinal,
        LossMode::PerStep => Metric::AccuracyPerStep,
    }
}

/// Trains `model` for `cfg.epochs` epochs and returns the parameters with
/// the best validation accuracy (earliest on ties). A non-finite loss or
/// gradient stops training and is reported in [`TrainOutcome::diverged`].
pub fn train(
    mut model: Model,
    train_data: &[IrregularSequence],
    val_data: &[IrregularSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::contract("training and validation data must be non-empty"));
    }
    let metric = metric_for(cfg.loss_mode);
    let mut opt = RmspropState::new(&model, cfg.rho, cfg.eps);
    let mut best_val = evaluate(&model, val_data, metric)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut diverged = None;
    let start = Instant::now();

    'epochs: for epoch in 1..=cfg.epochs {
        let batches = make_batches(
            train_data,
            cfg.batch_size,
            cfg.seed.wrapping_mul(0x1000_0000_01b3).wrapping_add(epoch as u64),
            true,
        )?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let outcome = loss_and_grads(&model, batch, cfg.loss_mode).and_then(|(loss, mut grads)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "loss".into() });
                }
                if let Some(c) = cfg.clip_norm {
                    clip_global_norm(&mut grads, c);
                }
                rmsprop_step(&mut model, &grads, &mut opt, cfg.learning_rate)?;
                Ok(loss)
            });
            match outcome {
                Ok(loss) => loss_sum += loss * batch.batch_size() as f64,
                Err(e @ Error::NonFinite { .. }) => {
                    log::warn!("epoch {epoch}: {e}");
                    diverged = Some(Divergence {
                        epoch,
                        detail: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            steps += 1;
        }
        let val_metric = evaluate(&model, val_data, metric)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_data.len() as f64,
            val_metric,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} val {:.4}",
            record.train_loss,
            record.val_metric
        );
        history.push(record);
        if val_metric > best_val {
            best_val = val_metric;
            best = model.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
        model: best,
        optimizer_steps: steps,
        diverged,
    })
}
