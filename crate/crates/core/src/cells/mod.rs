//! Recurrent cells under a common step contract.
//!
//! | arch             | state    | between observations                 |
//! |------------------|----------|--------------------------------------|
//! | `lstm`           | `(c, h)` | unchanged                            |
//! | `odernn`         | `h`      | ODE flow, `τ = 0`                    |
//! | `ctrnn`          | `h`      | ODE flow with learned `τ`            |
//! | `odelstm`        | `(c, h)` | `c` unchanged, `h` follows ODE flow  |
//! | `grud`           | `h`      | `h·exp(−elapsed·τ)`                  |
//! | `augmented_lstm` | `(c, h)` | unchanged, elapsed fed as a feature  |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{Elapsed, SolverSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub mod grud;
pub mod init;
pub mod lstm;
pub mod odelstm;
pub mod odernn;

pub use grud::{decay_state, grud_step, GrudParams, GrudVars};
pub use init::InitMode;
pub use lstm::{augmented_lstm_step, lstm_step, LstmParams, LstmVars, DEFAULT_FORGET_BIAS};
pub use odelstm::{odelstm_step, OdeLstmParams, OdeLstmVars};
pub use odernn::{odernn_step, OdeRnnParams, OdeRnnVars, Tau};

/// Named trainable tensors, always listed in the same order.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)>;
    /// Same order as [`ParamTensors::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lstm,
    #[serde(rename = "odernn")]
    OdeRnn,
    #[serde(rename = "ctrnn")]
    CtRnn,
    #[serde(rename = "odelstm")]
    OdeLstm,
    #[serde(rename = "grud")]
    GruD,
    AugmentedLstm,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Lstm,
        Arch::OdeRnn,
        Arch::CtRnn,
        Arch::OdeLstm,
        Arch::GruD,
        Arch::AugmentedLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::OdeRnn => "odernn",
            Arch::CtRnn => "ctrnn",
            Arch::OdeLstm => "odelstm",
            Arch::GruD => "grud",
            Arch::AugmentedLstm => "augmented_lstm",
        }
    }

    pub fn has_memory_cell(self) -> bool {
        matches!(self, Arch::Lstm | Arch::OdeLstm | Arch::AugmentedLstm)
    }

    /// Solver used between observations, where the arch has one.
    pub fn default_solver(self) -> Option<SolverSpec> {
        match self {
            Arch::OdeRnn | Arch::CtRnn => Some(SolverSpec::ode_rnn_default()),
            Arch::OdeLstm => Some(SolverSpec::ode_lstm_default()),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown architecture {s:?}")))
    }
}

/// Recurrent state. `c` is present only for cells with a memory cell.
#[derive(Debug, Clone, Copy)]
pub struct CellState<'t> {
    pub h: Var<'t>,
    pub c: Option<Var<'t>>,
}

impl<'t> CellState<'t> {
    /// All-zero initial state for `rows` sequences.
    pub fn zeros(tape: &'t Tape, rows: usize, hidden: usize, with_memory: bool) -> Self {
        CellState {
            h: tape.constant(Tensor::zeros(rows, hidden)),
            c: with_memory.then(|| tape.constant(Tensor::zeros(rows, hidden))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellParams {
    Lstm(LstmParams),
    OdeRnn(OdeRnnParams),
    CtRnn(OdeRnnParams),
    OdeLstm(OdeLstmParams),
    GruD(GrudParams),
    AugmentedLstm(LstmParams),
}

impl CellParams {
    pub fn arch(&self) -> Arch {
        match self {
            CellParams::Lstm(_) => Arch::Lstm,
            CellParams::OdeRnn(_) => Arch::OdeRnn,
            CellParams::CtRnn(_) => Arch::CtRnn,
            CellParams::OdeLstm(_) => Arch::OdeLstm,
            CellParams::GruD(_) => Arch::GruD,
            CellParams::AugmentedLstm(_) => Arch::AugmentedLstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            CellParams::Lstm(p) | CellParams::AugmentedLstm(p) => p.hidden(),
            CellParams::OdeRnn(p) | CellParams::CtRnn(p) => p.hidden(),
            CellParams::OdeLstm(p) => p.lstm.hidden(),
            CellParams::GruD(p) => p.hidden(),
        }
    }

    /// Sets the constant forget-gate offset on LSTM-family cells.
    pub fn set_forget_bias(&mut self, k: f64) {
        match self {
            CellParams::Lstm(p) | CellParams::AugmentedLstm(p) => p.forget_bias = k,
            CellParams::OdeLstm(p) => p.lstm.forget_bias = k,
            _ => {}
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<CellVars<'t>> {
        Ok(match self {
            CellParams::Lstm(p) => CellVars::Lstm(p.bind(tape)?),
            CellParams::AugmentedLstm(p) => CellVars::AugmentedLstm(p.bind(tape)?),
            CellParams::OdeRnn(p) | CellParams::CtRnn(p) => CellVars::OdeRnn(p.bind(tape)?),
            CellParams::OdeLstm(p) => CellVars::OdeLstm(p.bind(tape)?),
            CellParams::GruD(p) => CellVars::GruD(p.bind(tape)?),
        })
    }
}

impl ParamTensors for CellParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            CellParams::Lstm(p) | CellParams::AugmentedLstm(p) => p.tensors(),
            CellParams::OdeRnn(p) | CellParams::CtRnn(p) => p.tensors(),
            CellParams::OdeLstm(p) => p.tensors(),
            CellParams::GruD(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            CellParams::Lstm(p) | CellParams::AugmentedLstm(p) => p.tensors_mut(),
            CellParams::OdeRnn(p) | CellParams::CtRnn(p) => p.tensors_mut(),
            CellParams::OdeLstm(p) => p.tensors_mut(),
            CellParams::GruD(p) => p.tensors_mut(),
        }
    }
}

/// Cell parameters recorded on a tape.
pub enum CellVars<'t> {
    Lstm(LstmVars<'t>),
    AugmentedLstm(LstmVars<'t>),
    OdeRnn(OdeRnnVars<'t>),
    OdeLstm(OdeLstmVars<'t>),
    GruD(GrudVars<'t>),
}

impl<'t> CellVars<'t> {
    /// Leaves in [`ParamTensors::tensors`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        match self {
            CellVars::Lstm(v) | CellVars::AugmentedLstm(v) => v.leaves.clone(),
            CellVars::OdeRnn(v) => v.leaves.clone(),
            CellVars::OdeLstm(v) => v.leaves(),
            CellVars::GruD(v) => v.leaves.clone(),
        }
    }

    /// Advances `state` by one observation `x` that arrived `elapsed` after
    /// the previous one.
    pub fn step(
        &self,
        x: Var<'t>,
        state: &CellState<'t>,
        elapsed: &Elapsed,
        solver: SolverSpec,
    ) -> Result<CellState<'t>> {
        match self {
            CellVars::Lstm(p) => lstm_step(p, x, state),
            CellVars::AugmentedLstm(p) => augmented_lstm_step(p, x, elapsed, state),
            CellVars::OdeRnn(p) => Ok(CellState {
                h: odernn_step(p, x, state.h, elapsed, solver)?,
                c: None,
            }),
            CellVars::OdeLstm(p) => odelstm_step(p, x, state, elapsed, solver),
            CellVars::GruD(p) => Ok(CellState {
                h: grud_step(p, x, state.h, elapsed)?,
                c: None,
            }),
        }
    }
}

/// Sizes of a cell: input features per observation and hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub in_dim: usize,
    pub hidden: usize,
}

/// Fresh parameters for `arch`. For the augmented LSTM, `dims.in_dim` is
/// the raw feature width; the elapsed-time column is added here.
pub fn init_params(arch: Arch, dims: CellDims, mode: InitMode, seed: u64) -> Result<CellParams> {
    if dims.in_dim == 0 || dims.hidden == 0 {
        return Err(Error::contract("cell dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let CellDims { in_dim, hidden } = dims;
    Ok(match arch {
        Arch::Lstm => CellParams::Lstm(LstmParams::init(&mut rng, in_dim, hidden, mode)),
        Arch::AugmentedLstm => CellParams::AugmentedLstm(LstmParams::init(&mut rng, in_dim + 1, hidden, mode)),
        Arch::OdeRnn => CellParams::OdeRnn(OdeRnnParams::init(&mut rng, Some(in_dim), hidden, false, mode)),
        Arch::CtRnn => CellParams::CtRnn(OdeRnnParams::init(&mut rng, Some(in_dim), hidden, true, mode)),
        Arch::OdeLstm => CellParams::OdeLstm(OdeLstmParams::init(&mut rng, in_dim, hidden, mode)),
        Arch::GruD => CellParams::GruD(GrudParams::init(&mut rng, in_dim, hidden, mode)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!(matches!("gru_ode".parse::<Arch>(), Err(Error::Contract(_))));
    }

    #[test]
    fn theorem_mode_keeps_memory_weights_small() {
        let dims = CellDims { in_dim: 3, hidden: 16 };
        for seed in 0..5 {
            let CellParams::OdeLstm(p) = init_params(Arch::OdeLstm, dims, InitMode::Theorem, seed).unwrap() else {
                unreachable!()
            };
            for t in [&p.lstm.r_z, &p.lstm.r_i, &p.lstm.r_f, &p.lstm.w_f] {
                assert!(t.max_abs() <= 0.01);
            }
            assert_eq!(p.lstm.b_f.max_abs(), 0.0);
            assert!(p.lstm.r_o.max_abs() > 0.01);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let dims = CellDims { in_dim: 2, hidden: 8 };
        for arch in Arch::ALL {
            let a = init_params(arch, dims, InitMode::Training, 42).unwrap();
            let b = init_params(arch, dims, InitMode::Training, 42).unwrap();
            assert_eq!(a, b);
            let c = init_params(arch, dims, InitMode::Training, 43).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn zero_dims_rejected() {
        let dims = CellDims { in_dim: 0, hidden: 8 };
        assert!(init_params(Arch::Lstm, dims, InitMode::Training, 0).is_err());
    }

    #[test]
    fn tensor_lists_align_with_leaves() {
        let dims = CellDims { in_dim: 2, hidden: 3 };
        for arch in Arch::ALL {
            let mut p = init_params(arch, dims, InitMode::Training, 1).unwrap();
            let tape = Tape::new();
            let leaves = p.bind(&tape).unwrap().leaves();
            let named: Vec<Tensor> = p.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            assert_eq!(leaves.len(), named.len(), "{arch}");
            for (l, t) in leaves.iter().zip(&named) {
                assert_eq!(*l.value(), *t);
            }
            assert_eq!(p.tensors_mut().len(), named.len());
        }
    }
}
