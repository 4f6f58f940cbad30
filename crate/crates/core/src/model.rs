//! A recurrent cell followed by a linear readout to class logits.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::cells::init::glorot;
use crate::cells::{init_params, Arch, CellDims, CellParams, CellState, InitMode, ParamTensors};
use crate::data::IrregularBatch;
use crate::error::{Error, Result};
use crate::solver::{Elapsed, SolverSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the loss reads the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// The last observed step of each sequence.
    FinalStep,
    /// Every observed step.
    PerStep,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_step" => Ok(LossMode::FinalStep),
            "per_step" => Ok(LossMode::PerStep),
            _ => Err(Error::contract(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cell: CellParams,
    /// `hidden × classes`.
    pub readout_w: Tensor,
    /// `1 × classes`.
    pub readout_b: Tensor,
    /// Integrator for ODE-based cells; ignored by the others.
    pub solver: SolverSpec,
    pub in_dim: usize,
}

/// Logits recorded on a tape, keyed by step index. Steps at which no
/// output is needed are absent.
pub struct Forward<'t> {
    pub leaves: Vec<Var<'t>>,
    pub logits: Vec<(usize, Var<'t>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Model {
    pub fn init(arch: Arch, dims: ModelDims, mode: InitMode, solver: Option<SolverSpec>, seed: u64) -> Result<Self> {
        if dims.classes < 2 {
            return Err(Error::contract("a classifier needs at least 2 classes"));
        }
        let cell = init_params(
            arch,
            CellDims {
                in_dim: dims.in_dim,
                hidden: dims.hidden,
            },
            mode,
            seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(Model {
            cell,
            readout_w: glorot(&mut rng, dims.hidden, dims.classes),
            readout_b: Tensor::zeros(1, dims.classes),
            solver: solver
                .or(arch.default_solver())
                .unwrap_or_else(SolverSpec::ode_rnn_default),
            in_dim: dims.in_dim,
        })
    }

    pub fn arch(&self) -> Arch {
        self.cell.arch()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            in_dim: self.in_dim,
            hidden: self.cell.hidden(),
            classes: self.readout_w.cols(),
        }
    }

    pub fn classes(&self) -> usize {
        self.readout_w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Runs the cell over `batch` from a zero state. In final-step mode
    /// logits are produced only at steps where some sequence ends; padding
    /// steps after a sequence's end never reach its logits.
    pub fn forward<'t>(&self, tape: &'t Tape, batch: &IrregularBatch, mode: LossMode) -> Result<Forward<'t>> {
        if batch.dim() != self.in_dim {
            return Err(Error::dim(
                "Model::forward",
                format!("batch features {} vs model input {}", batch.dim(), self.in_dim),
            ));
        }
        let cell = self.cell.bind(tape)?;
        let w = tape.var(self.readout_w.clone());
        let b = tape.var(self.readout_b.clone());
        let mut leaves = cell.leaves();
        leaves.extend([w, b]);

        let mut needed = vec![mode == LossMode::PerStep; batch.maxlen()];
        for v in &batch.valid_len {
            if *v > 0 {
                needed[v - 1] = true;
            }
        }
        let rows = batch.batch_size();
        let mut state = CellState::zeros(tape, rows, self.cell.hidden(), self.arch().has_memory_cell());
        let mut logits = Vec::new();
        for (t, need) in needed.iter().enumerate() {
            let x = tape.constant(batch.step_features(t).clone());
            let dts = batch.step_elapsed(t);
            let elapsed = if dts.iter().all(|d| *d == dts[0]) {
                Elapsed::Uniform(dts[0])
            } else {
                Elapsed::PerRow(Rc::new(dts))
            };
            state = cell.step(x, &state, &elapsed, self.solver)?;
            if *need {
                logits.push((t, state.h.matmul(w)?.add_row(b)?));
            }
        }
        Ok(Forward { leaves, logits })
    }

    /// Writes parameters as a JSON header listing each tensor's name,
    /// shape, and offset, followed by the values as little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload = Vec::with_capacity(self.param_count());
        for (name, t) in self.tensors() {
            entries.push(TensorEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        }
        let header = ParamsHeader {
            arch: self.arch(),
            dims: self.dims(),
            solver: self.solver,
            forget_bias: self.forget_bias(),
            tensors: entries,
        };
        blob::write(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (ParamsHeader, Vec<f64>) = blob::read(path)?;
        let fail = |detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail,
        };
        let mut model = Model::init(header.arch, header.dims, InitMode::Training, Some(header.solver), 0)
            .map_err(|e| fail(e.to_string()))?;
        if let Some(k) = header.forget_bias {
            model.cell.set_forget_bias(k);
        }
        let names: Vec<&str> = model.tensors().iter().map(|(n, _)| *n).collect();
        if names.len() != header.tensors.len() {
            return Err(fail(format!(
                "{} tensors stored, {} expected",
                header.tensors.len(),
                names.len()
            )));
        }
        let expected: Vec<String> = names.iter().map(|n| n.to_string()).collect();
        for (t, (entry, name)) in model.tensors_mut().into_iter().zip(header.tensors.iter().zip(expected)) {
            if entry.name != name || (entry.rows, entry.cols) != t.shape() {
                return Err(fail(format!(
                    "tensor {} {}x{} does not match {name} {}x{}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    t.rows(),
                    t.cols()
                )));
            }
            let end = entry.offset + t.len();
            let Some(src) = payload.get(entry.offset..end) else {
                return Err(fail(format!("tensor {name} runs past the payload")));
            };
            t.data_mut().copy_from_slice(src);
        }
        Ok(model)
    }

    fn forget_bias(&self) -> Option<f64> {
        match &self.cell {
            CellParams::Lstm(p) | CellParams::AugmentedLstm(p) => Some(p.forget_bias),
            CellParams::OdeLstm(p) => Some(p.lstm.forget_bias),
            _ => None,
        }
    }
}

impl ParamTensors for Model {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.cell.tensors();
        out.push(("readout_w", &self.readout_w));
        out.push(("readout_b", &self.readout_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.cell.tensors_mut();
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsHeader {
    arch: Arch,
    dims: ModelDims,
    solver: SolverSpec,
    forget_bias: Option<f64>,
    tensors: Vec<TensorEntry>,
}
