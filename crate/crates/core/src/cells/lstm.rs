use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{glorot, orthogonal, uniform, InitMode, THEOREM_INIT_BOUND};
use super::{CellState, ParamTensors};
use crate::error::{Error, Result};
use crate::solver::Elapsed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate kernels for the input update `z`, input gate `i`, forget gate `f`
/// and output gate `o`. Input kernels are `in_dim × hidden`, recurrent
/// kernels `hidden × hidden`, biases `1 × hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_z: Tensor,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub r_z: Tensor,
    pub r_i: Tensor,
    pub r_f: Tensor,
    pub r_o: Tensor,
    pub b_z: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    /// Constant added to the forget-gate pre-activation on top of `b_f`.
    /// Not trained.
    pub forget_bias: f64,
}

pub const DEFAULT_FORGET_BIAS: f64 = 1.0;

impl LstmParams {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(in_dim, hidden);
        let r = || Tensor::zeros(hidden, hidden);
        let b = || Tensor::zeros(1, hidden);
        LstmParams {
            w_z: w(),
            w_i: w(),
            w_f: w(),
            w_o: w(),
            r_z: r(),
            r_i: r(),
            r_f: r(),
            r_o: r(),
            b_z: b(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            forget_bias: DEFAULT_FORGET_BIAS,
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, mode: InitMode) -> Self {
        let mut p = Self::zeros(in_dim, hidden);
        match mode {
            InitMode::Training => {
                p.w_z = glorot(rng, in_dim, hidden);
                p.w_i = glorot(rng, in_dim, hidden);
                p.w_f = glorot(rng, in_dim, hidden);
                p.w_o = glorot(rng, in_dim, hidden);
                p.r_z = orthogonal(rng, hidden);
                p.r_i = orthogonal(rng, hidden);
                p.r_f = orthogonal(rng, hidden);
                p.r_o = orthogonal(rng, hidden);
            }
            InitMode::Theorem => {
                let small = |rng: &mut ChaCha8Rng, r, c| uniform(rng, r, c, THEOREM_INIT_BOUND);
                p.w_z = glorot(rng, in_dim, hidden);
                p.w_i = glorot(rng, in_dim, hidden);
                p.w_f = small(rng, in_dim, hidden);
                p.w_o = glorot(rng, in_dim, hidden);
                p.r_z = small(rng, hidden, hidden);
                p.r_i = small(rng, hidden, hidden);
                p.r_f = small(rng, hidden, hidden);
                p.r_o = glorot(rng, hidden, hidden);
            }
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden(&self) -> usize {
        self.r_z.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<LstmVars<'t>> {
        let leaves: Vec<Var<'t>> = self.tensors().into_iter().map(|(_, t)| tape.var(t.clone())).collect();
        let cat4 = |a: usize| -> Result<Var<'t>> {
            leaves[a]
                .concat_cols(leaves[a + 1])?
                .concat_cols(leaves[a + 2])?
                .concat_cols(leaves[a + 3])
        };
        Ok(LstmVars {
            w: cat4(0)?,
            r: cat4(4)?,
            b: cat4(8)?,
            hidden: self.hidden(),
            in_dim: self.in_dim(),
            forget_bias: self.forget_bias,
            leaves,
        })
    }
}

impl ParamTensors for LstmParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_z", &self.w_z),
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("r_z", &self.r_z),
            ("r_i", &self.r_i),
            ("r_f", &self.r_f),
            ("r_o", &self.r_o),
            ("b_z", &self.b_z),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.r_z,
            &mut self.r_i,
            &mut self.r_f,
            &mut self.r_o,
            &mut self.b_z,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
        ]
    }
}

/// LSTM parameters recorded on a tape, with the four gates fused into one
/// kernel per role.
pub struct LstmVars<'t> {
    w: Var<'t>,
    r: Var<'t>,
    b: Var<'t>,
    hidden: usize,
    in_dim: usize,
    forget_bias: f64,
    /// Leaves in [`ParamTensors::tensors`] order.
    pub leaves: Vec<Var<'t>>,
}

/// One LSTM update of `(c, h)` from input `x`.
pub fn lstm_step<'t>(p: &LstmVars<'t>, x: Var<'t>, state: &CellState<'t>) -> Result<CellState<'t>> {
    if x.cols() != p.in_dim {
        return Err(Error::dim(
            "lstm_step",
            format!("input width {} but kernel expects {}", x.cols(), p.in_dim),
        ));
    }
    let c = state
        .c
        .ok_or_else(|| Error::contract("lstm_step needs a memory cell"))?;
    let n = p.hidden;
    let pre = x.matmul(p.w)?.add(state.h.matmul(p.r)?)?.add_row(p.b)?;
    let z = pre.slice_cols(0, n)?.tanh()?;
    let i = pre.slice_cols(n, n)?.sigmoid()?;
    let f = pre.slice_cols(2 * n, n)?.add_scalar(p.forget_bias)?.sigmoid()?;
    let o = pre.slice_cols(3 * n, n)?.sigmoid()?;
    let c_next = z.mul(i)?.add(c.mul(f)?)?;
    let h_next = c_next.tanh()?.mul(o)?;
    Ok(CellState {
        h: h_next,
        c: Some(c_next),
    })
}

/// LSTM step on the input with the elapsed time appended as one more feature
/// column.
pub fn augmented_lstm_step<'t>(
    p: &LstmVars<'t>,
    x: Var<'t>,
    elapsed: &Elapsed,
    state: &CellState<'t>,
) -> Result<CellState<'t>> {
    let rows = x.rows();
    let column = match elapsed {
        Elapsed::Uniform(v) => Tensor::full(rows, 1, *v),
        Elapsed::PerRow(vs) => {
            if vs.len() != rows {
                return Err(Error::dim(
                    "augmented_lstm_step",
                    format!("{} elapsed values for {rows} rows", vs.len()),
                ));
            }
            Tensor::column(vs)
        }
    };
    let augmented = x.concat_cols(x.tape().constant(column))?;
    lstm_step(p, augmented, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;
    use rand::SeedableRng;

    const SIGMA_ONE: f64 = 0.7310585786300049;

    #[test]
    fn zero_weights_give_sigma_one_forget_gate() {
        assert!((sigmoid(1.0) - SIGMA_ONE).abs() < 1e-16);
        assert!((SIGMA_ONE - 0.7310586).abs() < 1e-7);
        let tape = Tape::new();
        let p = LstmParams::zeros(2, 3).bind(&tape).unwrap();
        let state = CellState::zeros(&tape, 1, 3, true);
        let x = tape.constant(Tensor::zeros(1, 2));
        let next = lstm_step(&p, x, &state).unwrap();
        assert_eq!(*next.h.value(), Tensor::zeros(1, 3));
        assert_eq!(*next.c.unwrap().value(), Tensor::zeros(1, 3));
    }

    #[test]
    fn zero_weights_scale_memory_by_sigma_one() {
        let tape = Tape::new();
        let p = LstmParams::zeros(1, 1).bind(&tape).unwrap();
        let state = CellState {
            h: tape.constant(Tensor::scalar(0.0)),
            c: Some(tape.var(Tensor::scalar(2.0))),
        };
        let x = tape.constant(Tensor::scalar(-3.7));
        let next = lstm_step(&p, x, &state).unwrap();
        let c = next.c.unwrap().value().item();
        assert!((c - 1.4621172).abs() < 1e-7);
        assert!((next.h.value().item() - 1.4621172f64.tanh() * 0.5).abs() < 1e-7);
    }

    #[test]
    fn memory_jacobian_is_diag_sigma_one() {
        let tape = Tape::new();
        let mut params = LstmParams::zeros(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        params.w_z = glorot(&mut rng, 2, 3);
        params.w_o = glorot(&mut rng, 2, 3);
        params.r_o = glorot(&mut rng, 3, 3);
        let p = params.bind(&tape).unwrap();
        let c = tape.var(Tensor::from_rows(&[[0.3, -1.0, 2.0]]));
        let state = CellState {
            h: tape.constant(Tensor::from_rows(&[[0.1, 0.2, -0.3]])),
            c: Some(c),
        };
        let x = tape.constant(Tensor::from_rows(&[[0.5, -0.5]]));
        let c_next = lstm_step(&p, x, &state).unwrap().c.unwrap();
        for i in 0..3 {
            let mut seed = Tensor::zeros(1, 3);
            seed.set(0, i, 1.0);
            let row = tape.vjp(c_next, seed).unwrap().wrt(c);
            for j in 0..3 {
                let expect = if i == j { SIGMA_ONE } else { 0.0 };
                assert!((row.get(0, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let tape = Tape::new();
        let p = LstmParams::zeros(2, 3).bind(&tape).unwrap();
        let state = CellState::zeros(&tape, 1, 3, true);
        let x = tape.constant(Tensor::zeros(1, 4));
        assert!(matches!(lstm_step(&p, x, &state), Err(Error::Dimension { .. })));
    }

    #[test]
    fn augmented_with_silent_time_column_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut aug = LstmParams::init(&mut rng, 3, 4, InitMode::Training);
        for w in [&mut aug.w_z, &mut aug.w_i, &mut aug.w_f, &mut aug.w_o] {
            for c in 0..4 {
                w.set(2, c, 0.0);
            }
        }
        let mut plain = aug.clone();
        for w in [&mut plain.w_z, &mut plain.w_i, &mut plain.w_f, &mut plain.w_o] {
            *w = w.slice_rows(0, 2);
        }
        let tape = Tape::new();
        let (pa, pp) = (aug.bind(&tape).unwrap(), plain.bind(&tape).unwrap());
        let x = tape.constant(Tensor::from_rows(&[[0.4, -0.9], [1.0, 0.0]]));
        let state = CellState {
            h: tape.constant(Tensor::from_rows(&[[0.1, 0.0, -0.2, 0.3], [0.0; 4]])),
            c: Some(tape.constant(Tensor::from_rows(&[[1.0, -1.0, 0.5, 0.0], [0.2; 4]]))),
        };
        let a = augmented_lstm_step(&pa, x, &Elapsed::per_row(vec![0.7, 2.5]), &state).unwrap();
        let b = lstm_step(&pp, x, &state).unwrap();
        assert_eq!(a.h.value().data(), b.h.value().data());
        assert_eq!(a.c.unwrap().value().data(), b.c.unwrap().value().data());
    }

    #[test]
    fn augmented_output_depends_on_elapsed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = LstmParams::init(&mut rng, 2, 3, InitMode::Training);
        let tape = Tape::new();
        let p = params.bind(&tape).unwrap();
        let x = tape.constant(Tensor::from_rows(&[[0.5]]));
        let state = CellState::zeros(&tape, 1, 3, true);
        let a = augmented_lstm_step(&p, x, &Elapsed::Uniform(0.1), &state).unwrap();
        let b = augmented_lstm_step(&p, x, &Elapsed::Uniform(0.9), &state).unwrap();
        assert!(a.h.value().max_abs_diff(&b.h.value()) > 1e-6);
    }

    #[test]
    fn time_column_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = LstmParams::init(&mut rng, 3, 3, InitMode::Training);
        let loss = |p: &LstmParams| -> (f64, Tensor) {
            let tape = Tape::new();
            let v = p.bind(&tape).unwrap();
            let x = tape.constant(Tensor::from_rows(&[[0.3, -0.6], [0.9, 0.1]]));
            let mut state = CellState::zeros(&tape, 2, 3, true);
            for dt in [0.25, 0.5] {
                state = augmented_lstm_step(&v, x, &Elapsed::per_row(vec![dt, 2.0 * dt]), &state).unwrap();
            }
            let y = state.h.sum().unwrap();
            let g = tape.backward(y).unwrap();
            (y.value().item(), g.wrt(v.leaves[2]))
        };
        let (_, grad) = loss(&params);
        let h = 1e-6;
        for c in 0..3 {
            let mut plus = params.clone();
            plus.w_f.set(2, c, plus.w_f.get(2, c) + h);
            let mut minus = params.clone();
            minus.w_f.set(2, c, minus.w_f.get(2, c) - h);
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let an = grad.get(2, c);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-5, "col {c}: {an} vs {fd}");
        }
    }
}
