use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{glorot, orthogonal, softplus_inverse, InitMode};
use super::ParamTensors;
use crate::error::{Error, Result};
use crate::solver::{integrate, Elapsed, SolverSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-unit dampening `τ ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau {
    /// `τ = 0`, no dampening term at all.
    Zero,
    /// Trained through `τ = softplus(raw)`; holds the raw `1 × hidden` row.
    Learned(Tensor),
    /// Held at the given `1 × hidden` row, bypassing softplus.
    Fixed(Tensor),
}

impl Tau {
    pub(crate) fn bind<'t>(&self, tape: &'t Tape) -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
        Ok(match self {
            Tau::Zero => (None, None),
            Tau::Learned(raw) => {
                let leaf = tape.var(raw.clone());
                (Some(leaf.softplus()?), Some(leaf))
            }
            Tau::Fixed(t) => (Some(tape.constant(t.clone())), None),
        })
    }

    /// Effective `τ` values.
    pub fn values(&self, hidden: usize) -> Tensor {
        match self {
            Tau::Zero => Tensor::zeros(1, hidden),
            Tau::Learned(raw) => raw.map(crate::tape::softplus),
            Tau::Fixed(t) => t.clone(),
        }
    }
}

/// Vector field `f(h) = tanh(x·W_x + h·W_h + b) − τ ⊙ h`. Without `w_x` the
/// field is autonomous, which is the form the ODE-LSTM output flow uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeRnnParams {
    pub w_x: Option<Tensor>,
    pub w_h: Tensor,
    pub b: Tensor,
    pub tau: Tau,
}

impl OdeRnnParams {
    pub fn zeros(in_dim: Option<usize>, hidden: usize) -> Self {
        OdeRnnParams {
            w_x: in_dim.map(|d| Tensor::zeros(d, hidden)),
            w_h: Tensor::zeros(hidden, hidden),
            b: Tensor::zeros(1, hidden),
            tau: Tau::Zero,
        }
    }

    /// `in_dim = None` gives the autonomous field. `learn_tau` turns on the
    /// CT-RNN dampening, started at `τ = 1`.
    pub fn init(rng: &mut ChaCha8Rng, in_dim: Option<usize>, hidden: usize, learn_tau: bool, mode: InitMode) -> Self {
        let w_x = in_dim.map(|d| glorot(rng, d, hidden));
        let w_h = match mode {
            InitMode::Training => orthogonal(rng, hidden),
            InitMode::Theorem => glorot(rng, hidden, hidden),
        };
        let tau = if learn_tau {
            Tau::Learned(Tensor::full(1, hidden, softplus_inverse(1.0)))
        } else {
            Tau::Zero
        };
        OdeRnnParams {
            w_x,
            w_h,
            b: Tensor::zeros(1, hidden),
            tau,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<OdeRnnVars<'t>> {
        let mut leaves = Vec::new();
        let w_x = self.w_x.as_ref().map(|w| {
            let v = tape.var(w.clone());
            leaves.push(v);
            v
        });
        let w_h = tape.var(self.w_h.clone());
        let b = tape.var(self.b.clone());
        leaves.push(w_h);
        leaves.push(b);
        let (tau, raw) = self.tau.bind(tape)?;
        leaves.extend(raw);
        Ok(OdeRnnVars {
            w_x,
            w_h,
            b,
            tau,
            leaves,
        })
    }
}

impl ParamTensors for OdeRnnParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(w) = &self.w_x {
            out.push(("w_x", w));
        }
        out.push(("w_h", &self.w_h));
        out.push(("b", &self.b));
        if let Tau::Learned(raw) = &self.tau {
            out.push(("tau_raw", raw));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w_x {
            out.push(w);
        }
        out.push(&mut self.w_h);
        out.push(&mut self.b);
        if let Tau::Learned(raw) = &mut self.tau {
            out.push(raw);
        }
        out
    }
}

pub struct OdeRnnVars<'t> {
    pub w_x: Option<Var<'t>>,
    pub w_h: Var<'t>,
    pub b: Var<'t>,
    /// Effective `τ`, absent when pinned to zero.
    pub tau: Option<Var<'t>>,
    pub leaves: Vec<Var<'t>>,
}

impl<'t> OdeRnnVars<'t> {
    /// Evaluates the field. `drive` is the precomputed `x·W_x + b`; when it
    /// is absent the bias alone is used.
    pub fn field(&self, h: Var<'t>, drive: Option<Var<'t>>) -> Result<Var<'t>> {
        let pre = h.matmul(self.w_h)?;
        let pre = match drive {
            Some(u) => pre.add(u)?,
            None => pre.add_row(self.b)?,
        };
        let act = pre.tanh()?;
        match self.tau {
            Some(tau) => act.sub(h.mul_row(tau)?),
            None => Ok(act),
        }
    }

    /// `x·W_x + b`, held fixed over one interval.
    pub fn drive(&self, x: Var<'t>) -> Result<Var<'t>> {
        let w_x = self
            .w_x
            .ok_or_else(|| Error::contract("autonomous field has no input kernel"))?;
        if x.cols() != w_x.rows() {
            return Err(Error::dim(
                "odernn_step",
                format!("input width {} but kernel expects {}", x.cols(), w_x.rows()),
            ));
        }
        x.matmul(w_x)?.add_row(self.b)
    }
}

/// Evolves `h` across `elapsed` under `dh/dt = tanh(x·W_x + h·W_h + b) − τ⊙h`.
pub fn odernn_step<'t>(
    p: &OdeRnnVars<'t>,
    x: Var<'t>,
    h: Var<'t>,
    elapsed: &Elapsed,
    spec: SolverSpec,
) -> Result<Var<'t>> {
    let drive = p.drive(x)?;
    let field = |h: Var<'t>, u: Option<Var<'t>>| p.field(h, u);
    integrate(&field, h, Some(drive), elapsed, spec)
}
