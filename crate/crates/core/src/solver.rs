//! Fixed-step explicit integrators recorded on the tape, so that
//! backpropagation runs through every substep.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExplicitEuler,
    RungeKutta4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ExplicitEuler => "euler",
            Method::RungeKutta4 => "rk4",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" | "explicit_euler" => Ok(Method::ExplicitEuler),
            "rk4" | "runge_kutta4" => Ok(Method::RungeKutta4),
            other => Err(Error::contract(format!("unknown solver method {other:?}"))),
        }
    }
}

/// Integrator choice plus the number of equal substeps taken across each
/// observation interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSolverSpec")]
pub struct SolverSpec {
    pub method: Method,
    substeps: usize,
}

#[derive(Deserialize)]
struct RawSolverSpec {
    method: Method,
    substeps: usize,
}

impl TryFrom<RawSolverSpec> for SolverSpec {
    type Error = Error;

    fn try_from(raw: RawSolverSpec) -> Result<Self> {
        SolverSpec::new(raw.method, raw.substeps)
    }
}

impl SolverSpec {
    pub fn new(method: Method, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::contract("solver substeps must be at least 1"));
        }
        Ok(SolverSpec { method, substeps })
    }

    pub fn euler(substeps: usize) -> Self {
        Self::new(Method::ExplicitEuler, substeps).expect("substeps >= 1")
    }

    pub fn rk4(substeps: usize) -> Self {
        Self::new(Method::RungeKutta4, substeps).expect("substeps >= 1")
    }

    /// Step ratio 1/3 with RK4, used by ODE-RNN and CT-RNN.
    pub fn ode_rnn_default() -> Self {
        Self::rk4(3)
    }

    /// Step ratio 1/4 with explicit Euler, used by the ODE-LSTM output flow.
    pub fn ode_lstm_default() -> Self {
        Self::euler(4)
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }
}

/// Right-hand side `dh/dt = f(h, u)`. The external input `u` is held fixed
/// over the whole interval.
pub trait VectorField<'t> {
    fn eval(&self, h: Var<'t>, input: Option<Var<'t>>) -> Result<Var<'t>>;
}

impl<'t, F> VectorField<'t> for F
where
    F: Fn(Var<'t>, Option<Var<'t>>) -> Result<Var<'t>>,
{
    fn eval(&self, h: Var<'t>, input: Option<Var<'t>>) -> Result<Var<'t>> {
        self(h, input)
    }
}

/// Pins a closure to the higher-ranked signature expected of tape-generic
/// vector fields, which closure inference does not pick on its own.
pub fn field_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t>, Option<Var<'t>>) -> Result<Var<'t>>,
{
    f
}

/// Time elapsed over an interval: one value shared by every batch row, or
/// one value per row.
#[derive(Debug, Clone)]
pub enum Elapsed {
    Uniform(f64),
    PerRow(Rc<Vec<f64>>),
}

impl Elapsed {
    pub fn per_row(values: Vec<f64>) -> Self {
        Elapsed::PerRow(Rc::new(values))
    }

    fn validate(&self, rows: usize) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match self {
            Elapsed::Uniform(v) if !ok(*v) => Err(Error::contract(format!(
                "elapsed time must be positive and finite, got {v}"
            ))),
            Elapsed::PerRow(vs) if vs.len() != rows => Err(Error::dim(
                "integrate",
                format!("{} elapsed values for {rows} state rows", vs.len()),
            )),
            Elapsed::PerRow(vs) => match vs.iter().find(|v| !ok(**v)) {
                Some(v) => Err(Error::contract(format!(
                    "elapsed time must be positive and finite, got {v}"
                ))),
                None => Ok(()),
            },
            Elapsed::Uniform(_) => Ok(()),
        }
    }

    fn divided(&self, k: f64) -> Elapsed {
        match self {
            Elapsed::Uniform(v) => Elapsed::Uniform(v / k),
            Elapsed::PerRow(vs) => Elapsed::per_row(vs.iter().map(|v| v / k).collect()),
        }
    }

    fn scale<'t>(&self, v: Var<'t>, k: f64) -> Result<Var<'t>> {
        match self {
            Elapsed::Uniform(dt) => v.scale(dt * k),
            Elapsed::PerRow(dts) if k == 1.0 => v.scale_rows(Rc::clone(dts)),
            Elapsed::PerRow(dts) => v.scale_rows(Rc::new(dts.iter().map(|d| d * k).collect())),
        }
    }
}

impl From<f64> for Elapsed {
    fn from(v: f64) -> Self {
        Elapsed::Uniform(v)
    }
}

/// Integrates `field` from `h0` across `elapsed` with `spec.substeps()` equal
/// steps.
pub fn integrate<'t>(
    field: &impl VectorField<'t>,
    h0: Var<'t>,
    input: Option<Var<'t>>,
    elapsed: &Elapsed,
    spec: SolverSpec,
) -> Result<Var<'t>> {
    elapsed.validate(h0.rows())?;
    let dt = elapsed.divided(spec.substeps as f64);
    let mut h = h0;
    for k in 0..spec.substeps {
        h = match spec.method {
            Method::ExplicitEuler => {
                let f = field.eval(h, input)?;
                h.add(dt.scale(f, 1.0)?)?
            }
            Method::RungeKutta4 => {
                let k1 = field.eval(h, input)?;
                let k2 = field.eval(h.add(dt.scale(k1, 0.5)?)?, input)?;
                let k3 = field.eval(h.add(dt.scale(k2, 0.5)?)?, input)?;
                let k4 = field.eval(h.add(dt.scale(k3, 1.0)?)?, input)?;
                let mid = k2.add(k3)?.scale(2.0)?;
                let weighted = k1.add(mid)?.add(k4)?;
                h.add(dt.scale(weighted, 1.0 / 6.0)?)?
            }
        };
        if !h.value().is_finite() {
            return Err(Error::NonFinite {
                op: format!("{} substep {} of {}", spec.method, k + 1, spec.substeps),
            });
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvergenceOrder {
    /// Every tested step size reproduced the reference solution.
    Exact,
    Slope(f64),
}

/// Least-squares slope of `log(error)` against `log(step)` over substep
/// counts 2, 4, 8, 16, 32, measured against the known solution `exact`.
pub fn convergence_order<F>(
    field: F,
    h0: &Tensor,
    elapsed: f64,
    method: Method,
    exact: &Tensor,
) -> Result<ConvergenceOrder>
where
    F: for<'t> Fn(Var<'t>, Option<Var<'t>>) -> Result<Var<'t>>,
{
    let mut points = Vec::new();
    for n in [2usize, 4, 8, 16, 32] {
        let tape = Tape::new();
        let h = tape.var(h0.clone());
        let end = integrate(&field, h, None, &elapsed.into(), SolverSpec::new(method, n)?)?;
        let err = end.value().max_abs_diff(exact);
        if err > 0.0 {
            points.push(((elapsed / n as f64).ln(), err.ln()));
        }
    }
    if points.is_empty() {
        return Ok(ConvergenceOrder::Exact);
    }
    if points.len() < 2 {
        return Err(Error::contract(
            "too few non-zero errors to estimate a convergence order",
        ));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(ConvergenceOrder::Slope(sxy / sxx))
}
