use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{glorot, orthogonal, softplus_inverse, InitMode};
use super::odernn::Tau;
use super::ParamTensors;
use crate::error::{Error, Result};
use crate::solver::Elapsed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Exponential state decay between observations followed by a gated
/// recurrent update with reset `r`, update `u` and candidate `c` gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrudParams {
    pub w_r: Tensor,
    pub w_u: Tensor,
    pub w_c: Tensor,
    pub u_r: Tensor,
    pub u_u: Tensor,
    pub u_c: Tensor,
    pub b_r: Tensor,
    pub b_u: Tensor,
    pub b_c: Tensor,
    pub tau: Tau,
}

impl GrudParams {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(in_dim, hidden);
        let u = || Tensor::zeros(hidden, hidden);
        let b = || Tensor::zeros(1, hidden);
        GrudParams {
            w_r: w(),
            w_u: w(),
            w_c: w(),
            u_r: u(),
            u_u: u(),
            u_c: u(),
            b_r: b(),
            b_u: b(),
            b_c: b(),
            tau: Tau::Zero,
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, mode: InitMode) -> Self {
        let mut p = Self::zeros(in_dim, hidden);
        p.w_r = glorot(rng, in_dim, hidden);
        p.w_u = glorot(rng, in_dim, hidden);
        p.w_c = glorot(rng, in_dim, hidden);
        let recurrent = |rng: &mut ChaCha8Rng| match mode {
            InitMode::Training => orthogonal(rng, hidden),
            InitMode::Theorem => glorot(rng, hidden, hidden),
        };
        p.u_r = recurrent(rng);
        p.u_u = recurrent(rng);
        p.u_c = recurrent(rng);
        p.tau = Tau::Learned(Tensor::full(1, hidden, softplus_inverse(1.0)));
        p
    }

    pub fn hidden(&self) -> usize {
        self.u_r.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<GrudVars<'t>> {
        let mut leaves: Vec<Var<'t>> = self
            .tensors()
            .into_iter()
            .filter(|(n, _)| *n != "tau_raw")
            .map(|(_, t)| tape.var(t.clone()))
            .collect();
        let w = leaves[0].concat_cols(leaves[1])?.concat_cols(leaves[2])?;
        let u_ru = leaves[3].concat_cols(leaves[4])?;
        let u_c = leaves[5];
        let b = leaves[6].concat_cols(leaves[7])?.concat_cols(leaves[8])?;
        let (tau, raw) = self.tau.bind(tape)?;
        leaves.extend(raw);
        Ok(GrudVars {
            w,
            u_ru,
            u_c,
            b,
            tau,
            hidden: self.hidden(),
            leaves,
        })
    }
}

impl ParamTensors for GrudParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_r", &self.w_r),
            ("w_u", &self.w_u),
            ("w_c", &self.w_c),
            ("u_r", &self.u_r),
            ("u_u", &self.u_u),
            ("u_c", &self.u_c),
            ("b_r", &self.b_r),
            ("b_u", &self.b_u),
            ("b_c", &self.b_c),
        ];
        if let Tau::Learned(raw) = &self.tau {
            out.push(("tau_raw", raw));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.w_r,
            &mut self.w_u,
            &mut self.w_c,
            &mut self.u_r,
            &mut self.u_u,
            &mut self.u_c,
            &mut self.b_r,
            &mut self.b_u,
            &mut self.b_c,
        ];
        if let Tau::Learned(raw) = &mut self.tau {
            out.push(raw);
        }
        out
    }
}

pub struct GrudVars<'t> {
    w: Var<'t>,
    u_ru: Var<'t>,
    u_c: Var<'t>,
    b: Var<'t>,
    tau: Option<Var<'t>>,
    hidden: usize,
    pub leaves: Vec<Var<'t>>,
}

/// `h ⊙ exp(−elapsed·τ)`, row by row.
pub fn decay_state<'t>(tau: Option<Var<'t>>, h: Var<'t>, elapsed: &Elapsed) -> Result<Var<'t>> {
    let Some(tau) = tau else { return Ok(h) };
    let rows = h.rows();
    let column = match elapsed {
        Elapsed::Uniform(v) => Tensor::full(rows, 1, *v),
        Elapsed::PerRow(vs) => {
            if vs.len() != rows {
                return Err(Error::dim(
                    "grud_step",
                    format!("{} elapsed values for {rows} rows", vs.len()),
                ));
            }
            Tensor::column(vs)
        }
    };
    if column.data().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::contract("elapsed time must be positive"));
    }
    let rate = h.tape().constant(column).matmul(tau)?;
    h.mul(rate.exp_neg()?)
}

pub fn grud_step<'t>(p: &GrudVars<'t>, x: Var<'t>, h: Var<'t>, elapsed: &Elapsed) -> Result<Var<'t>> {
    let n = p.hidden;
    let h = decay_state(p.tau, h, elapsed)?;
    let xin = x.matmul(p.w)?.add_row(p.b)?;
    let rec = h.matmul(p.u_ru)?;
    let r = xin.slice_cols(0, n)?.add(rec.slice_cols(0, n)?)?.sigmoid()?;
    let u = xin.slice_cols(n, n)?.add(rec.slice_cols(n, n)?)?.sigmoid()?;
    let cand = xin.slice_cols(2 * n, n)?.add(r.mul(h)?.matmul(p.u_c)?)?.tanh()?;
    h.add(u.mul(cand.sub(h)?)?)
}
