//! Weight initializers. All draws come from one seeded ChaCha stream, so a
//! seed fixes every parameter bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Which weight regime to start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Glorot-uniform input kernels, orthogonal recurrent kernels, zero biases.
    Training,
    /// Memory-path weights (`R_z`, `R_i`, `R_f`, `W_f`) drawn from
    /// `U(-0.01, 0.01)` and `b_f = 0`; everything else Glorot-uniform.
    Theorem,
}

impl std::str::FromStr for InitMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "training" => Ok(InitMode::Training),
            "theorem" => Ok(InitMode::Theorem),
            other => Err(crate::Error::contract(format!("unknown init mode {other:?}"))),
        }
    }
}

pub const THEOREM_INIT_BOUND: f64 = 0.01;

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, fan_in, fan_out, glorot_bound(fan_in, fan_out))
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw, which is
/// Haar-distributed.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (v, q) in tail[0].iter_mut().zip(&head[k]) {
                    *v -= dot * q;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-10 {
                ok = false;
                break;
            }
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            let mut t = Tensor::zeros(n, n);
            for (j, col) in cols.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    t.set(i, j, *v);
                }
            }
            return t;
        }
    }
}

/// Inverse of `softplus`, for initializing unconstrained rates.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}
