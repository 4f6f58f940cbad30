//! State-to-state Jacobians: closed forms for explicit solvers, reverse-mode
//! and finite-difference evaluation, per-unit vanishing/exploding
//! classification by row sums, and chained gradient-flow traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{init_params, Arch, CellDims, CellParams, CellState, InitMode, OdeRnnParams, Tau};
use crate::data::IrregularSequence;
use crate::error::{Error, Result};
use crate::solver::{Elapsed, SolverSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Margin below 1 within which a unit still counts as neutral.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Classic fourth-order Runge-Kutta weights.
pub const RK4_WEIGHTS: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitClass {
    Vanishing,
    Exploding,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub matrix: Tensor,
    pub row_sums: Vec<f64>,
    pub classes: Vec<UnitClass>,
    pub epsilon: f64,
}

impl JacobianReport {
    pub fn count(&self, class: UnitClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }

    pub fn non_neutral_fraction(&self) -> f64 {
        1.0 - self.count(UnitClass::Neutral) as f64 / self.classes.len() as f64
    }
}

/// Unit `i` vanishes when `|Σ_j J_ij| < 1 − ε`, explodes when it exceeds 1,
/// and is neutral otherwise.
pub fn classify_units(jacobian: &Tensor, epsilon: f64) -> Result<JacobianReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::contract(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let row_sums = jacobian.row_sums();
    let classes = row_sums
        .iter()
        .map(|s| match s.abs() {
            m if m < 1.0 - epsilon => UnitClass::Vanishing,
            m if m > 1.0 => UnitClass::Exploding,
            _ => UnitClass::Neutral,
        })
        .collect();
    Ok(JacobianReport {
        matrix: jacobian.clone(),
        row_sums,
        classes,
        epsilon,
    })
}

fn square(op: &'static str, m: &Tensor, tau: &[f64]) -> Result<usize> {
    let n = m.rows();
    if m.cols() != n || tau.len() != n {
        return Err(Error::dim(
            op,
            format!("{:?} linearization with {} dampening values", m.shape(), tau.len()),
        ));
    }
    Ok(n)
}

/// `I + T·∂f/∂h − T·diag(τ)` for one explicit Euler step of size `elapsed`.
pub fn euler_jacobian_closed(dfdh: &Tensor, elapsed: f64, tau: &[f64]) -> Result<Tensor> {
    rk_jacobian_closed(std::slice::from_ref(dfdh), &[1.0], elapsed, tau)
}

/// `I + T·Σ_i b_i·∂f/∂h|K_i − T·diag(τ)` from per-stage linearizations.
pub fn rk_jacobian_closed(stages: &[Tensor], weights: &[f64], elapsed: f64, tau: &[f64]) -> Result<Tensor> {
    if stages.is_empty() || stages.len() != weights.len() {
        return Err(Error::dim(
            "rk_jacobian_closed",
            format!("{} stages, {} weights", stages.len(), weights.len()),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::contract(format!("stage weights sum to {total}, not 1")));
    }
    let n = square("rk_jacobian_closed", &stages[0], tau)?;
    let mut out = Tensor::identity(n);
    for (s, b) in stages.iter().zip(weights) {
        if s.shape() != (n, n) {
            return Err(Error::dim("rk_jacobian_closed", "stage shapes differ"));
        }
        out.add_assign(&s.scaled(elapsed * b));
    }
    for (i, t) in tau.iter().enumerate() {
        out.set(i, i, out.get(i, i) - elapsed * t);
    }
    Ok(out)
}

/// `J_ij = ∂out_i/∂state_j` for a single-row `state`, assembled from one
/// reverse pass per output unit. `step` records its computation on the
/// tape owning its argument.
pub fn autodiff_jacobian<F>(state: &Tensor, step: F) -> Result<Tensor>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if state.rows() != 1 {
        return Err(Error::dim("autodiff_jacobian", "state must be a single row"));
    }
    let tape = Tape::new();
    let s = tape.var(state.clone());
    let out = step(s)?;
    if out.rows() != 1 {
        return Err(Error::dim("autodiff_jacobian", "output must be a single row"));
    }
    let (n_out, n_in) = (out.cols(), state.cols());
    let mut jac = Tensor::zeros(n_out, n_in);
    for i in 0..n_out {
        let mut seed = Tensor::zeros(1, n_out);
        seed.set(0, i, 1.0);
        let g = tape.vjp(out, seed)?.wrt(s);
        jac.data_mut()[i * n_in..(i + 1) * n_in].copy_from_slice(g.data());
    }
    Ok(jac)
}

/// Central-difference Jacobian of `f` at a single-row `state`.
pub fn finite_diff_jacobian(state: &Tensor, h: f64, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n_in = state.cols();
    let mut cols = Vec::with_capacity(n_in);
    for j in 0..n_in {
        let mut plus = state.clone();
        let mut minus = state.clone();
        plus.set(0, j, state.get(0, j) + h);
        minus.set(0, j, state.get(0, j) - h);
        let (a, b) = (f(&plus)?, f(&minus)?);
        cols.push(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let n_out = cols.first().map_or(0, Vec::len);
    let mut jac = Tensor::zeros(n_out, n_in);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac.set(i, j, *v);
        }
    }
    Ok(jac)
}

/// Pre-dampening field of an ODE-RNN, `tanh(x·W_x + h·W_h + b)`, recorded
/// on `h`'s tape.
fn odernn_activation<'t>(p: &OdeRnnParams, x: Option<&Tensor>, h: Var<'t>) -> Result<Var<'t>> {
    let v = p.bind(h.tape())?;
    let pre = h.matmul(v.w_h)?;
    let pre = match x {
        Some(x) => pre.add(v.drive(h.tape().constant(x.clone()))?)?,
        None => pre.add_row(v.b)?,
    };
    pre.tanh()
}

/// `∂f/∂h` of the pre-dampening field at a single-row `h`.
pub fn odernn_field_jacobian(p: &OdeRnnParams, x: Option<&Tensor>, h: &Tensor) -> Result<Tensor> {
    autodiff_jacobian(h, |hv| odernn_activation(p, x, hv))
}

/// Per-unit dampening `τ` of an ODE-RNN field.
pub fn odernn_tau(p: &OdeRnnParams) -> Vec<f64> {
    p.tau.values(p.hidden()).into_data()
}

/// Reverse-mode Jacobian of one full ODE-RNN interval.
pub fn odernn_step_jacobian(
    p: &OdeRnnParams,
    x: &Tensor,
    h: &Tensor,
    elapsed: f64,
    solver: SolverSpec,
) -> Result<Tensor> {
    autodiff_jacobian(h, |hv| {
        let v = p.bind(hv.tape())?;
        crate::cells::odernn_step(
            &v,
            hv.tape().constant(x.clone()),
            hv,
            &Elapsed::Uniform(elapsed),
            solver,
        )
    })
}

/// Linear field `f(h) = h·A − τ⊙h`; its linearization is `Aᵀ − diag(τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    pub a: Tensor,
    pub tau: Vec<f64>,
}

impl LinearField {
    pub fn random(n: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("n×n");
        let tau = (0..n).map(|_| rng.gen_range(0.0..scale)).collect();
        LinearField { a, tau }
    }

    pub fn eval<'t>(&self, h: Var<'t>) -> Result<Var<'t>> {
        let tape = h.tape();
        let a = tape.constant(self.a.clone());
        let tau = tape.constant(Tensor::row_vector(&self.tau));
        h.matmul(a)?.sub(h.mul_row(tau)?)
    }

    /// `∂f/∂h` without the dampening term, i.e. `Aᵀ`.
    pub fn dfdh(&self) -> Tensor {
        self.a.transpose()
    }

    /// `M = Aᵀ − diag(τ)`, the full linearization.
    pub fn generator(&self) -> Tensor {
        let mut m = self.dfdh();
        for (i, t) in self.tau.iter().enumerate() {
            m.set(i, i, m.get(i, i) - t);
        }
        m
    }
}

/// One RK4 step of `field` from `h` with the stage offsets `K_i − h` held
/// constant, so each `∂K_i/∂h` is the identity. This is the structure the
/// weighted-stage closed form describes.
pub fn rk4_frozen_stages<'t, F>(field: F, h: Var<'t>, elapsed: f64) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = h.tape();
    let offsets = rk4_stage_offsets(&field, h, elapsed)?;
    let mut acc: Option<Var<'t>> = None;
    for (off, b) in offsets.into_iter().zip(RK4_WEIGHTS) {
        let k = field(h.add(tape.constant(off))?)?.scale(elapsed * b)?;
        acc = Some(match acc {
            Some(a) => a.add(k)?,
            None => k,
        });
    }
    h.add(acc.expect("four stages"))
}

/// Values of `K_i − h` for the four RK4 stages.
fn rk4_stage_offsets<'t, F>(field: &F, h: Var<'t>, elapsed: f64) -> Result<Vec<Tensor>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = h.tape();
    let h0 = h.value();
    let mut offsets = vec![Tensor::zeros(h0.rows(), h0.cols())];
    for c in [0.5, 0.5, 1.0] {
        let k_prev = tape
            .constant((*h0).clone())
            .add(tape.constant(offsets.last().expect("stage").clone()))?;
        let f = field(k_prev)?.value();
        offsets.push(f.scaled(elapsed * c));
    }
    Ok(offsets)
}

/// The stage points `K_i` of one RK4 step from single-row `h`.
pub fn rk4_stage_points<F>(field: F, h: &Tensor, elapsed: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let hv = tape.constant(h.clone());
    let offsets = rk4_stage_offsets(&field, hv, elapsed)?;
    offsets
        .into_iter()
        .map(|o| {
            let mut k = h.clone();
            k.add_assign(&o);
            Ok(k)
        })
        .collect()
}

/// `Σ_{k=0}^{4} (T·M)^k / k!`, the exact one-step RK4 Jacobian of a linear
/// field with generator `M`.
pub fn rk4_linear_jacobian(m: &Tensor, elapsed: f64) -> Result<Tensor> {
    let n = m.rows();
    let tm = m.scaled(elapsed);
    let mut term = Tensor::identity(n);
    let mut out = Tensor::identity(n);
    for k in 1..=4 {
        term = term.matmul(&tm)?.scaled(1.0 / k as f64);
        out.add_assign(&term);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowNorm {
    /// `max_i |Σ_j m_ij|`, the quantity Definition-style unit classification
    /// reads. Unlike the induced ∞-norm, signed entries may cancel.
    RowSum,
    /// Induced ∞-norm, `max_i Σ_j |m_ij|`.
    Inf,
    Spectral,
}

impl FlowNorm {
    pub fn apply(self, m: &Tensor) -> f64 {
        match self {
            FlowNorm::RowSum => m.row_sums().iter().fold(0.0, |a, s| a.max(s.abs())),
            FlowNorm::Inf => m.inf_norm(),
            FlowNorm::Spectral => m.spectral_norm(),
        }
    }
}

impl std::str::FromStr for FlowNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_sum" => Ok(FlowNorm::RowSum),
            "inf" => Ok(FlowNorm::Inf),
            "spectral" => Ok(FlowNorm::Spectral),
            _ => Err(Error::contract(format!("unknown norm {s:?}"))),
        }
    }
}

/// `values[k] = ‖∂s_T/∂s_{T−k}‖` for `k = 0..=T`; `values[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub norm: FlowNorm,
    pub values: Vec<f64>,
    /// Per lag, units classified `[vanishing, exploding, neutral]` by the
    /// row sums of the lag's Jacobian block, summed over probes.
    pub counts: Vec<[usize; 3]>,
}

/// Traces along the output state and, for cells with one, the memory cell.
/// `end_to_end` is the full-state Jacobian across the whole sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub h_path: FlowTrace,
    pub c_path: Option<FlowTrace>,
    pub end_to_end: Tensor,
}

fn split_state<'t>(s: Var<'t>, hidden: usize, memory: bool) -> Result<CellState<'t>> {
    Ok(if memory {
        CellState {
            c: Some(s.slice_cols(0, hidden)?),
            h: s.slice_cols(hidden, hidden)?,
        }
    } else {
        CellState { h: s, c: None }
    })
}

fn join_state<'t>(s: &CellState<'t>) -> Result<Var<'t>> {
    match s.c {
        Some(c) => c.concat_cols(s.h),
        None => Ok(s.h),
    }
}

/// Pins a closure to the higher-ranked signature expected by
/// [`autodiff_jacobian`].
pub fn state_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    f
}

/// Runs `cell` over the observed steps of `seq` from a zero state and
/// returns the per-step full-state Jacobians `∂s_t/∂s_{t−1}`. The state is
/// `[c, h]` for cells with a memory cell and `h` otherwise.
pub fn step_jacobians(cell: &CellParams, solver: SolverSpec, seq: &IrregularSequence) -> Result<Vec<Tensor>> {
    let hidden = cell.hidden();
    let memory = cell.arch().has_memory_cell();
    let width = if memory { 2 * hidden } else { hidden };
    let mut state = Tensor::zeros(1, width);
    let mut out = Vec::with_capacity(seq.valid_len);
    for t in 0..seq.valid_len {
        let x = Tensor::row_vector(seq.features.row(t));
        let elapsed = Elapsed::Uniform(seq.elapsed[t]);
        let step = state_fn(|s| {
            let tape = s.tape();
            let vars = cell.bind(tape)?;
            let next = vars.step(
                tape.constant(x.clone()),
                &split_state(s, hidden, memory)?,
                &elapsed,
                solver,
            )?;
            join_state(&next)
        });
        out.push(autodiff_jacobian(&state, step)?);
        let tape = Tape::new();
        state = (*step(tape.constant(state.clone()))?.value()).clone();
    }
    Ok(out)
}

fn block(m: &Tensor, start: usize, width: usize) -> Tensor {
    let mut b = Tensor::zeros(width, width);
    for i in 0..width {
        for j in 0..width {
            b.set(i, j, m.get(start + i, start + j));
        }
    }
    b
}

/// Norms of chained Jacobian products over increasing lags, averaged over
/// probe sequences, which must all have the same observed length ≥ 2.
pub fn flow_trace(
    cell: &CellParams,
    solver: SolverSpec,
    probes: &[IrregularSequence],
    norm: FlowNorm,
    epsilon: f64,
) -> Result<FlowReport> {
    let Some(first) = probes.first() else {
        return Err(Error::contract("flow trace needs at least one probe sequence"));
    };
    let len = first.valid_len;
    if len < 2 || probes.iter().any(|p| p.valid_len != len) {
        return Err(Error::contract(
            "flow trace probes need equal observed lengths of at least 2",
        ));
    }
    let hidden = cell.hidden();
    let memory = cell.arch().has_memory_cell();
    let width = if memory { 2 * hidden } else { hidden };
    let mut h_sum = vec![0.0; len + 1];
    let mut c_sum = vec![0.0; len + 1];
    let mut h_counts = vec![[0usize; 3]; len + 1];
    let mut c_counts = vec![[0usize; 3]; len + 1];
    let tally = |m: &Tensor, into: &mut [usize; 3]| -> Result<()> {
        let r = classify_units(m, epsilon)?;
        into[0] += r.count(UnitClass::Vanishing);
        into[1] += r.count(UnitClass::Exploding);
        into[2] += r.count(UnitClass::Neutral);
        Ok(())
    };
    let mut end_sum = Tensor::zeros(width, width);
    for probe in probes {
        let jacs = step_jacobians(cell, solver, probe)?;
        let mut prod = Tensor::identity(width);
        for k in 0..=len {
            if k > 0 {
                prod = prod.matmul(&jacs[len - k])?;
            }
            let h_block = if memory {
                block(&prod, hidden, hidden)
            } else {
                prod.clone()
            };
            h_sum[k] += norm.apply(&h_block);
            tally(&h_block, &mut h_counts[k])?;
            if memory {
                let c_block = block(&prod, 0, hidden);
                c_sum[k] += norm.apply(&c_block);
                tally(&c_block, &mut c_counts[k])?;
            }
        }
        end_sum.add_assign(&prod);
    }
    let n = probes.len() as f64;
    let mean = |v: Vec<f64>, counts| FlowTrace {
        norm,
        values: v.into_iter().map(|x| x / n).collect(),
        counts,
    };
    Ok(FlowReport {
        h_path: mean(h_sum, h_counts),
        c_path: memory.then(|| mean(c_sum, c_counts)),
        end_to_end: end_sum.scaled(1.0 / n),
    })
}

/// Hand-built ODE-RNN configurations with known long-horizon behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPreset {
    /// `W_h = 0.5·I`, `τ = 0`: each interval multiplies the gradient by
    /// `(1 + 0.5·T/n)^n`.
    Exploding,
    /// `W_h = 0`, `τ = 1`: each interval multiplies it by `(1 − T/n)^n`.
    Vanishing,
}

impl FlowPreset {
    pub const HIDDEN: usize = 4;
    pub const STEPS: usize = 64;

    pub fn solver(self) -> SolverSpec {
        SolverSpec::euler(4)
    }

    pub fn cell(self) -> CellParams {
        let mut p = OdeRnnParams::zeros(Some(1), Self::HIDDEN);
        match self {
            FlowPreset::Exploding => {
                p.w_h = Tensor::identity(Self::HIDDEN).scaled(0.5);
                CellParams::OdeRnn(p)
            }
            FlowPreset::Vanishing => {
                p.tau = Tau::Fixed(Tensor::full(1, Self::HIDDEN, 1.0));
                CellParams::CtRnn(p)
            }
        }
    }

    /// 64 zero inputs one time unit apart; the state stays at the origin.
    pub fn probe(self) -> IrregularSequence {
        IrregularSequence {
            features: Tensor::zeros(Self::STEPS, 1),
            elapsed: vec![1.0; Self::STEPS],
            label: crate::data::Label::Class(0),
            valid_len: Self::STEPS,
        }
    }

    /// Per-interval gain `(1 + (T/n)(a − τ))^n` at `T = 1`.
    pub fn step_gain(self) -> f64 {
        let n = self.solver().substeps() as i32;
        let xi = match self {
            FlowPreset::Exploding => 0.5,
            FlowPreset::Vanishing => -1.0,
        };
        (1.0 + xi / n as f64).powi(n)
    }

    pub fn expected_g(self, lag: usize) -> f64 {
        self.step_gain().powi(lag as i32)
    }
}

/// `Σ_j ∂c'_i/∂c_j` for one ODE-LSTM step at a single-row state.
pub fn memory_row_sums(
    cell: &CellParams,
    solver: SolverSpec,
    x: &Tensor,
    state: (&Tensor, &Tensor),
    elapsed: f64,
) -> Result<Vec<f64>> {
    if !cell.arch().has_memory_cell() {
        return Err(Error::contract(format!("{} has no memory cell", cell.arch())));
    }
    let (c, h) = state;
    let jac = autodiff_jacobian(c, |cv| {
        let tape = cv.tape();
        let vars = cell.bind(tape)?;
        let s = CellState {
            h: tape.constant(h.clone()),
            c: Some(cv),
        };
        let next = vars.step(tape.constant(x.clone()), &s, &Elapsed::Uniform(elapsed), solver)?;
        next.c.ok_or_else(|| Error::contract("memory cell vanished"))
    })?;
    Ok(jac.row_sums())
}

/// One draw of the memory-path probe: input, `(c, h)`, and elapsed time.
#[derive(Debug, Clone)]
pub struct MemoryProbe {
    pub x: Tensor,
    pub c: Tensor,
    pub h: Tensor,
    pub elapsed: f64,
}

impl MemoryProbe {
    /// Inputs and states uniform in `[−1, 1]`, elapsed uniform in `[0.05, 2]`.
    pub fn draw(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        let mut row =
            |n: usize| Tensor::from_vec(1, n, (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()).expect("row");
        let (x, c, h) = (row(in_dim), row(hidden), row(hidden));
        MemoryProbe {
            x,
            c,
            h,
            elapsed: rng.gen_range(0.05..=2.0),
        }
    }
}

/// Smallest and largest memory-path row-sum magnitude over `probes` random
/// draws against theorem-initialized ODE-LSTM cells with forget offset `k`.
pub fn theorem3_row_sum_range(dims: CellDims, forget_bias: f64, probes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..probes {
        let mut cell = init_params(Arch::OdeLstm, dims, InitMode::Theorem, seed.wrapping_add(i as u64))?;
        cell.set_forget_bias(forget_bias);
        let p = MemoryProbe::draw(&mut rng, dims.in_dim, dims.hidden);
        for s in memory_row_sums(&cell, SolverSpec::ode_lstm_default(), &p.x, (&p.c, &p.h), p.elapsed)? {
            lo = lo.min(s.abs());
            hi = hi.max(s.abs());
        }
    }
    Ok((lo, hi))
}

/// Random input stream with unit spacing for long-horizon probes.
pub fn random_probe(len: usize, in_dim: usize, seed: u64) -> IrregularSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len * in_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    IrregularSequence {
        features: Tensor::from_vec(len, in_dim, data).expect("len×dim"),
        elapsed: vec![1.0; len],
        label: crate::data::Label::Class(0),
        valid_len: len,
    }
}

/// Glorot-initialized ODE-RNN (no orthogonal recurrent kernel), the weight
/// regime used to show long-horizon pathology.
pub fn glorot_odernn(in_dim: usize, hidden: usize, seed: u64) -> CellParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CellParams::OdeRnn(OdeRnnParams::init(
        &mut rng,
        Some(in_dim),
        hidden,
        false,
        InitMode::Theorem,
    ))
}

/// Product of the per-step Jacobians of a whole sequence, classified per
/// unit.
pub fn sequence_report(
    cell: &CellParams,
    solver: SolverSpec,
    seq: &IrregularSequence,
    epsilon: f64,
) -> Result<JacobianReport> {
    let jacs = step_jacobians(cell, solver, seq)?;
    let width = jacs[0].rows();
    let mut prod = Tensor::identity(width);
    for j in jacs.iter().rev() {
        prod = prod.matmul(j)?;
    }
    classify_units(&prod, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn classification_examples() {
        let r = classify_units(&Tensor::identity(3), 0.1).unwrap();
        assert_eq!(r.count(UnitClass::Neutral), 3);
        let r = classify_units(&Tensor::diag(&[0.5, 0.5]), 0.1).unwrap();
        assert_eq!(r.count(UnitClass::Vanishing), 2);
        let r = classify_units(&Tensor::diag(&[1.2]), 0.1).unwrap();
        assert_eq!(r.classes, vec![UnitClass::Exploding]);
        let r = classify_units(&Tensor::from_rows(&[&[0.5, -1.6], &[0.9, 0.0]]), 0.1).unwrap();
        assert_eq!(r.classes, vec![UnitClass::Exploding, UnitClass::Neutral]);
        assert!(classify_units(&Tensor::identity(1), 1.0).is_err());
    }

    #[test]
    fn euler_closed_form_examples() {
        let j = euler_jacobian_closed(&Tensor::zeros(2, 2), 0.7, &[0.0, 0.0]).unwrap();
        assert_eq!(j, Tensor::identity(2));
        let j = euler_jacobian_closed(&Tensor::scalar(-0.4), 0.5, &[0.0]).unwrap();
        assert_abs_diff_eq!(j.item(), 0.8, epsilon = 1e-15);
        let tau = [0.3, 1.1];
        let j = euler_jacobian_closed(&Tensor::diag(&tau), 2.5, &tau).unwrap();
        assert_abs_diff_eq!(j.max_abs_diff(&Tensor::identity(2)), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rk_closed_form_reduces_and_validates() {
        let j = Tensor::from_rows(&[&[0.2, -0.1], &[0.4, 0.3]]);
        let tau = [0.1, 0.2];
        let euler = euler_jacobian_closed(&j, 0.3, &tau).unwrap();
        let rk1 = rk_jacobian_closed(std::slice::from_ref(&j), &[1.0], 0.3, &tau).unwrap();
        assert_eq!(euler, rk1);
        let same = vec![j.clone(); 4];
        let rk4 = rk_jacobian_closed(&same, &RK4_WEIGHTS, 0.3, &tau).unwrap();
        assert!(rk4.max_abs_diff(&euler) <= 1e-15);
        assert!(matches!(
            rk_jacobian_closed(&same, &[0.25, 0.25, 0.25, 0.3], 0.3, &tau),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn autodiff_identity_and_fd() {
        let s = Tensor::row_vector(&[0.3, -0.2, 0.5]);
        let j = autodiff_jacobian(&s, |v| Ok(v)).unwrap();
        assert_eq!(j, Tensor::identity(3));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = OdeRnnParams::init(&mut rng, Some(2), 4, true, InitMode::Training);
        let x = Tensor::row_vector(&[0.7, -0.1]);
        let h = Tensor::row_vector(&[0.1, -0.4, 0.2, 0.6]);
        let spec = SolverSpec::rk4(3);
        let ad = odernn_step_jacobian(&p, &x, &h, 0.8, spec).unwrap();
        let fd = finite_diff_jacobian(&h, 1e-6, |hh| {
            let tape = Tape::new();
            let v = p.bind(&tape)?;
            let out = crate::cells::odernn_step(
                &v,
                tape.constant(x.clone()),
                tape.constant(hh.clone()),
                &Elapsed::Uniform(0.8),
                spec,
            )?;
            Ok((*out.value()).clone())
        })
        .unwrap();
        for (a, b) in ad.data().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-2), "{a} vs {b}");
        }
    }

    #[test]
    fn single_euler_step_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = OdeRnnParams::init(&mut rng, Some(3), 5, true, InitMode::Training);
        let x = Tensor::row_vector(&[0.2, 0.9, -0.5]);
        let h = Tensor::row_vector(&[0.3, -0.1, 0.0, 0.8, -0.6]);
        let ad = odernn_step_jacobian(&p, &x, &h, 0.6, SolverSpec::euler(1)).unwrap();
        let closed =
            euler_jacobian_closed(&odernn_field_jacobian(&p, Some(&x), &h).unwrap(), 0.6, &odernn_tau(&p)).unwrap();
        assert!(ad.max_abs_diff(&closed) <= 1e-12);
    }

    #[test]
    fn rk4_on_linear_field() {
        let f = LinearField::random(4, 0.8, 2);
        let h = Tensor::row_vector(&[0.5, -1.0, 0.25, 0.1]);
        let t = 0.7;
        let full = autodiff_jacobian(&h, |v| {
            crate::solver::integrate(
                &crate::solver::field_fn(|h, _| f.eval(h)),
                v,
                None,
                &Elapsed::Uniform(t),
                SolverSpec::rk4(1),
            )
        })
        .unwrap();
        let taylor = rk4_linear_jacobian(&f.generator(), t).unwrap();
        assert!(full.max_abs_diff(&taylor) <= 1e-12);

        let frozen = autodiff_jacobian(&h, |v| rk4_frozen_stages(|k| f.eval(k), v, t)).unwrap();
        let stages = vec![f.dfdh(); 4];
        let closed = rk_jacobian_closed(&stages, &RK4_WEIGHTS, t, &f.tau).unwrap();
        assert!(frozen.max_abs_diff(&closed) <= 1e-12);
        assert!(full.max_abs_diff(&closed) > 1e-3);
    }

    #[test]
    fn frozen_stages_match_closed_form_on_nonlinear_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = OdeRnnParams::init(&mut rng, None, 4, true, InitMode::Training);
        let h = Tensor::row_vector(&[0.4, -0.3, 0.9, 0.1]);
        let t = 0.5;
        let field = state_fn(|v| p.bind(v.tape())?.field(v, None));
        let frozen = autodiff_jacobian(&h, |v| rk4_frozen_stages(field, v, t)).unwrap();
        let points = rk4_stage_points(field, &h, t).unwrap();
        let stages: Vec<Tensor> = points
            .iter()
            .map(|k| odernn_field_jacobian(&p, None, k).unwrap())
            .collect();
        let closed = rk_jacobian_closed(&stages, &RK4_WEIGHTS, t, &odernn_tau(&p)).unwrap();
        assert!(frozen.max_abs_diff(&closed) <= 1e-12);
    }

    #[test]
    fn presets_follow_closed_form_products() {
        for preset in [FlowPreset::Exploding, FlowPreset::Vanishing] {
            let r = flow_trace(
                &preset.cell(),
                preset.solver(),
                &[preset.probe()],
                FlowNorm::RowSum,
                DEFAULT_EPSILON,
            )
            .unwrap();
            for k in [1, 8, 64] {
                let want = preset.expected_g(k);
                assert!(
                    (r.h_path.values[k] - want).abs() <= 1e-9 * want.max(1e-300),
                    "{preset:?} {k}"
                );
            }
        }
        let e = flow_trace(
            &FlowPreset::Exploding.cell(),
            SolverSpec::euler(4),
            &[FlowPreset::Exploding.probe()],
            FlowNorm::RowSum,
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(e.h_path.values[64] > 10.0);
        let report = classify_units(&e.end_to_end, DEFAULT_EPSILON).unwrap();
        assert_eq!(report.count(UnitClass::Exploding), 4);
    }

    #[test]
    fn constant_dynamics_give_unit_flow() {
        let cell = CellParams::OdeRnn(OdeRnnParams::zeros(Some(1), 3));
        let probe = random_probe(10, 1, 0);
        let r = flow_trace(&cell, SolverSpec::rk4(3), &[probe], FlowNorm::Spectral, DEFAULT_EPSILON).unwrap();
        for v in r.h_path.values {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn duplicated_probes_do_not_change_trace() {
        let cell = init_params(Arch::OdeLstm, CellDims { in_dim: 2, hidden: 3 }, InitMode::Training, 1).unwrap();
        let p = random_probe(6, 2, 3);
        let one = flow_trace(
            &cell,
            SolverSpec::ode_lstm_default(),
            std::slice::from_ref(&p),
            FlowNorm::RowSum,
            DEFAULT_EPSILON,
        )
        .unwrap();
        let two = flow_trace(
            &cell,
            SolverSpec::ode_lstm_default(),
            &[p.clone(), p],
            FlowNorm::RowSum,
            DEFAULT_EPSILON,
        )
        .unwrap();
        for (a, b) in one.h_path.values.iter().zip(&two.h_path.values) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        assert!(one.c_path.is_some());
    }

    #[test]
    fn memory_path_rows_sum_to_forget_gate() {
        let dims = CellDims { in_dim: 2, hidden: 6 };
        let (lo, hi) = theorem3_row_sum_range(dims, 1.0, 10, 0).unwrap();
        assert!(lo >= 0.70 && hi <= 0.76, "{lo} {hi}");
        let cell = CellParams::OdeLstm(crate::cells::OdeLstmParams::zeros(2, 3));
        let ones = Tensor::full(1, 3, 1.0);
        let sums = memory_row_sums(&cell, SolverSpec::euler(2), &Tensor::zeros(1, 2), (&ones, &ones), 0.3).unwrap();
        for s in sums {
            assert_abs_diff_eq!(s, 0.7310585786300049, epsilon = 1e-15);
        }
    }

    #[test]
    fn theorem_init_memory_path_decays_like_forget_gate() {
        let s1 = 0.7310585786300049_f64;
        for seed in 0..3 {
            let cell = init_params(
                Arch::OdeLstm,
                CellDims { in_dim: 1, hidden: 4 },
                InitMode::Theorem,
                seed,
            )
            .unwrap();
            let probe = random_probe(17, 1, seed + 10);
            let r = flow_trace(
                &cell,
                SolverSpec::ode_lstm_default(),
                &[probe],
                FlowNorm::RowSum,
                DEFAULT_EPSILON,
            )
            .unwrap();
            let c = r.c_path.unwrap();
            for k in 1..=16 {
                let g = c.values[k];
                assert!(
                    g >= 0.70f64.powi(k as i32) && g <= 0.76f64.powi(k as i32),
                    "lag {k}: {g}"
                );
                if k <= 4 {
                    assert!((g / s1.powi(k as i32) - 1.0).abs() < 0.10, "lag {k}: {g}");
                }
            }
        }
    }
}
