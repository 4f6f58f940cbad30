use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::InitMode;
use super::lstm::{lstm_step, LstmParams, LstmVars};
use super::odernn::{OdeRnnParams, OdeRnnVars};
use super::{CellState, ParamTensors};
use crate::error::{Error, Result};
use crate::solver::{integrate, Elapsed, SolverSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// LSTM gates plus the autonomous field that evolves the output state
/// between observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeLstmParams {
    pub lstm: LstmParams,
    pub flow: OdeRnnParams,
}

impl OdeLstmParams {
    pub fn new(lstm: LstmParams, flow: OdeRnnParams) -> Result<Self> {
        if flow.w_x.is_some() {
            return Err(Error::contract("ODE-LSTM output flow must be autonomous"));
        }
        if flow.hidden() != lstm.hidden() {
            return Err(Error::dim(
                "OdeLstmParams",
                format!("flow dim {} vs lstm hidden {}", flow.hidden(), lstm.hidden()),
            ));
        }
        Ok(OdeLstmParams { lstm, flow })
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        OdeLstmParams {
            lstm: LstmParams::zeros(in_dim, hidden),
            flow: OdeRnnParams::zeros(None, hidden),
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, mode: InitMode) -> Self {
        let lstm = LstmParams::init(rng, in_dim, hidden, mode);
        let flow = OdeRnnParams::init(rng, None, hidden, false, mode);
        OdeLstmParams { lstm, flow }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<OdeLstmVars<'t>> {
        Ok(OdeLstmVars {
            lstm: self.lstm.bind(tape)?,
            flow: self.flow.bind(tape)?,
        })
    }
}

impl ParamTensors for OdeLstmParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.lstm.tensors();
        out.extend(self.flow.tensors().into_iter().map(|(n, t)| {
            let n = match n {
                "w_h" => "flow_w_h",
                "b" => "flow_b",
                "tau_raw" => "flow_tau_raw",
                other => other,
            };
            (n, t)
        }));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.lstm.tensors_mut();
        out.extend(self.flow.tensors_mut());
        out
    }
}

pub struct OdeLstmVars<'t> {
    pub lstm: LstmVars<'t>,
    pub flow: OdeRnnVars<'t>,
}

impl<'t> OdeLstmVars<'t> {
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = self.lstm.leaves.clone();
        out.extend(self.flow.leaves.iter().copied());
        out
    }
}

/// LSTM update followed by integrating the fresh output state across the
/// elapsed time. The memory cell bypasses the solver.
pub fn odelstm_step<'t>(
    p: &OdeLstmVars<'t>,
    x: Var<'t>,
    state: &CellState<'t>,
    elapsed: &Elapsed,
    spec: SolverSpec,
) -> Result<CellState<'t>> {
    let gated = lstm_step(&p.lstm, x, state)?;
    let field = |h: Var<'t>, _: Option<Var<'t>>| p.flow.field(h, None);
    let h = integrate(&field, gated.h, None, elapsed, spec)?;
    Ok(CellState { h, c: gated.c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_flow_reduces_to_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = OdeLstmParams::init(&mut rng, 2, 5, InitMode::Training);
        p.flow = OdeRnnParams::zeros(None, 5);
        let tape = Tape::new();
        let v = p.bind(&tape).unwrap();
        let x = tape.constant(Tensor::from_rows(&[[0.3, -0.8], [1.2, 0.4]]));
        let mut a = CellState::zeros(&tape, 2, 5, true);
        let mut b = a;
        for dt in [0.1, 3.0, 0.5] {
            a = odelstm_step(&v, x, &a, &Elapsed::Uniform(dt), SolverSpec::euler(4)).unwrap();
            b = lstm_step(&v.lstm, x, &b).unwrap();
            assert_eq!(a.h.value().data(), b.h.value().data());
            assert_eq!(a.c.unwrap().value().data(), b.c.unwrap().value().data());
        }
    }

    #[test]
    fn tiny_elapsed_barely_moves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = OdeLstmParams::init(&mut rng, 1, 6, InitMode::Training);
        let tape = Tape::new();
        let v = p.bind(&tape).unwrap();
        let x = tape.constant(Tensor::from_rows(&[[0.7]]));
        let state = CellState::zeros(&tape, 1, 6, true);
        let gated = lstm_step(&v.lstm, x, &state).unwrap();
        let out = odelstm_step(&v, x, &state, &Elapsed::Uniform(1e-9), SolverSpec::euler(4)).unwrap();
        assert!(out.h.value().max_abs_diff(&gated.h.value()) <= 1e-7);
    }

    #[test]
    fn rejects_driven_flow() {
        let lstm = LstmParams::zeros(1, 2);
        assert!(OdeLstmParams::new(lstm.clone(), OdeRnnParams::zeros(Some(1), 2)).is_err());
        assert!(OdeLstmParams::new(lstm.clone(), OdeRnnParams::zeros(None, 3)).is_err());
        assert!(OdeLstmParams::new(lstm, OdeRnnParams::zeros(None, 2)).is_ok());
    }
}
