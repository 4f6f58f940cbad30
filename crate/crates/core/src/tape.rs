//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so operands always precede their results. [`Tape::backward`] walks
//! the record in reverse once and returns the adjoint of every reachable
//! node. A fresh tape is built for each forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `m × n` plus a broadcast `1 × n` row.
    AddRow(usize, usize),
    /// `m × n` times a broadcast `1 × n` row.
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Each row multiplied by a constant factor.
    ScaleRows(usize, Rc<Vec<f64>>),
    Tanh(usize),
    Sigmoid(usize),
    ExpNeg(usize),
    Softplus(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    Sum(usize),
    SoftmaxXent {
        logits: usize,
        labels: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        probs: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleRows(..) => "scale_rows",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::ExpNeg(..) => "exp_neg",
            Op::Softplus(..) => "softplus",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(..) => "sum",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass. Not `Sync`: a tape and its
/// variables stay on the thread that built them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Turns on NaN/Inf checks after every recorded operation.
    pub fn with_finite_checks(self) -> Self {
        self.check_finite.set(true);
        self
    }

    pub fn set_finite_checks(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probed state).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input; gradients are never propagated into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            operands(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Adjoints of every node with respect to a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let shape = root.shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward root must be 1x1, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.vjp(root, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: adjoints of every node given the seed
    /// adjoint `seed` on `output`.
    pub fn vjp(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        assert!(std::ptr::eq(output.tape, self), "var from another tape");
        if seed.shape() != output.shape() {
            return Err(Error::dim(
                "vjp",
                format!("seed {:?} vs output {:?}", seed.shape(), output.shape()),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn operands(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::ConcatCols(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::ScaleRows(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::ExpNeg(a)
        | Op::Softplus(a)
        | Op::SliceCols(a, _)
        | Op::Sum(a) => vec![a],
        Op::SoftmaxXent { logits, .. } => vec![logits],
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(&out)
}

fn broadcast_row(m: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = m.clone();
    let cols = m.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(*v, row.data()[i % cols]);
    }
    out
}

fn propagate(nodes: &[Node], op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let needs = |i: usize| nodes[i].requires_grad;
    match op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if needs(a) {
                let bv = val(b);
                let mut ga = Tensor::zeros(g.rows(), bv.rows());
                gemm(g, false, bv, true, &mut ga, 0.0);
                accumulate(grads, nodes, a, ga);
            }
            if needs(b) {
                let av = val(a);
                let mut gb = Tensor::zeros(av.cols(), g.cols());
                gemm(av, true, g, false, &mut gb, 0.0);
                accumulate(grads, nodes, b, gb);
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            if needs(b) {
                accumulate(grads, nodes, b, g.scaled(-1.0));
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                accumulate(grads, nodes, a, g.zip_map(val(b), |g, v| g * v));
            }
            if needs(b) {
                accumulate(grads, nodes, b, g.zip_map(val(a), |g, v| g * v));
            }
        }
        &Op::AddRow(a, row) => {
            accumulate(grads, nodes, a, g.clone());
            if needs(row) {
                accumulate(grads, nodes, row, column_sums(g));
            }
        }
        &Op::MulRow(a, row) => {
            if needs(a) {
                accumulate(grads, nodes, a, broadcast_row(g, val(row), |g, r| g * r));
            }
            if needs(row) {
                accumulate(grads, nodes, row, column_sums(&g.zip_map(val(a), |g, v| g * v)));
            }
        }
        &Op::Scale(a, k) => accumulate(grads, nodes, a, g.scaled(k)),
        &Op::AddScalar(a) => accumulate(grads, nodes, a, g.clone()),
        Op::ScaleRows(a, factors) => {
            let mut ga = g.clone();
            let cols = g.cols();
            for (r, k) in factors.iter().enumerate() {
                for v in &mut ga.data_mut()[r * cols..(r + 1) * cols] {
                    *v *= k;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        &Op::Tanh(a) => accumulate(grads, nodes, a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
        &Op::Sigmoid(a) => accumulate(grads, nodes, a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
        &Op::ExpNeg(a) => accumulate(grads, nodes, a, g.zip_map(y, |g, y| -g * y)),
        &Op::Softplus(a) => accumulate(grads, nodes, a, g.zip_map(val(a), |g, x| g * sigmoid(x))),
        &Op::ConcatCols(a, b) => {
            let wa = val(a).cols();
            if needs(a) {
                accumulate(grads, nodes, a, g.slice_cols(0, wa));
            }
            if needs(b) {
                accumulate(grads, nodes, b, g.slice_cols(wa, g.cols() - wa));
            }
        }
        &Op::SliceCols(a, start) => {
            let src = val(a);
            let mut ga = Tensor::zeros(src.rows(), src.cols());
            let w = g.cols();
            let cols = src.cols();
            for r in 0..src.rows() {
                ga.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, a, ga);
        }
        &Op::Sum(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, nodes, a, Tensor::full(r, c, g.item()));
        }
        Op::SoftmaxXent {
            logits,
            labels,
            weights,
            probs,
        } => {
            let scale = g.item();
            let mut ga = probs.clone();
            let cols = ga.cols();
            for (r, (&label, &w)) in labels.iter().zip(weights.iter()).enumerate() {
                let row = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                if w == 0.0 {
                    row.fill(0.0);
                    continue;
                }
                row[label] -= 1.0;
                for v in row.iter_mut() {
                    *v *= w * scale;
                }
            }
            accumulate(grads, nodes, *logits, ga);
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when `var` is unreachable from the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `var`, zeros when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.rows(), var.cols()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn check_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let v = self.value().matmul(&rhs.value())?;
        self.tape.push(v, Op::MatMul(self.id, rhs.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        same_shape("add", &a, &b)?;
        self.tape.push(a.zip_map(&b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        same_shape("sub", &a, &b)?;
        self.tape.push(a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        same_shape("mul", &a, &b)?;
        self.tape.push(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }

    /// Adds a `1 × n` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&row);
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", a.shape(), r.shape())));
        }
        self.tape
            .push(broadcast_row(&a, &r, |x, y| x + y), Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a `1 × n` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&row);
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(Error::dim("mul_row", format!("{:?} * row {:?}", a.shape(), r.shape())));
        }
        self.tape
            .push(broadcast_row(&a, &r, |x, y| x * y), Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.tape.push(self.value().scaled(k), Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.tape.push(self.value().map(|v| v + k), Op::AddScalar(self.id))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(self, factors: Rc<Vec<f64>>) -> Result<Var<'t>> {
        let a = self.value();
        if factors.len() != a.rows() {
            return Err(Error::dim(
                "scale_rows",
                format!("{} factors for {} rows", factors.len(), a.rows()),
            ));
        }
        let mut out = (*a).clone();
        let cols = a.cols();
        for (r, k) in factors.iter().enumerate() {
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v *= k;
            }
        }
        self.tape.push(out, Op::ScaleRows(self.id, factors))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    /// `exp(-x)` elementwise.
    pub fn exp_neg(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(|v| (-v).exp()), Op::ExpNeg(self.id))
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.tape.push(self.value().map(softplus), Op::Softplus(self.id))
    }

    pub fn concat_cols(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let v = self.value().concat_cols(&rhs.value())?;
        self.tape.push(v, Op::ConcatCols(self.id, rhs.id))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + width > a.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("[{start}, {}) of {} cols", start + width, a.cols()),
            ));
        }
        self.tape
            .push(a.slice_cols(start, width), Op::SliceCols(self.id, start))
    }

    /// Sum of all entries as a `1 × 1` var.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// `Σ_r weights[r] · (−log softmax(row r)[labels[r]])`, a `1 × 1` var.
    /// Rows with zero weight contribute nothing, including to the adjoint.
    pub fn softmax_cross_entropy(self, labels: Rc<Vec<usize>>, weights: Rc<Vec<f64>>) -> Result<Var<'t>> {
        let logits = self.value();
        let (rows, cols) = logits.shape();
        if labels.len() != rows || weights.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{rows} rows, {} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        let mut probs = Tensor::zeros(rows, cols);
        let mut loss = 0.0;
        for r in 0..rows {
            let row = logits.row(r);
            let label = labels[r];
            if label >= cols {
                return Err(Error::contract(format!(
                    "label {label} out of range for {cols} classes"
                )));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, v) in row.iter().enumerate() {
                probs.set(r, c, (v - max).exp() / denom);
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (denom.ln() + max - row[label]);
            }
        }
        self.tape.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: self.id,
                labels,
                weights,
                probs,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central finite differences of `f` at `x`, entry by entry.
    fn finite_diff(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_backward_matches_hand_values() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_rows(&[[1.0, 2.0]]));
        let b = tape.var(Tensor::from_rows(&[[3.0], [4.0]]));
        let y = a.matmul(b).unwrap().sum().unwrap();
        assert_eq!(y.value().item(), 11.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(a), Tensor::from_rows(&[[3.0, 4.0]]));
        assert_eq!(g.wrt(b), Tensor::from_rows(&[[1.0], [2.0]]));

        let fd = finite_diff(&a.value(), |av| av.matmul(&b.value()).unwrap().sum());
        assert!(max_rel_err(&g.wrt(a), &fd) < 1e-8);
    }

    #[test]
    fn pointwise_examples() {
        let tape = Tape::new();
        let z = tape.var(Tensor::from_rows(&[[0.0, 1.0]]));
        let s = z.sigmoid().unwrap().value();
        assert_eq!(s.get(0, 0), 0.5);
        assert!((s.get(0, 1) - 0.7310586).abs() < 1e-7);

        let x = tape.var(Tensor::scalar(0.3));
        let y = x.tanh().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap().wrt(x).item();
        assert!((g - 0.915137).abs() < 1e-6);
    }

    #[test]
    fn concat_backward_splits_adjoint() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_rows(&[[1.0, 2.0]]));
        let b = tape.var(Tensor::from_rows(&[[9.0]]));
        let c = a.concat_cols(b).unwrap();
        assert_eq!(*c.value(), Tensor::from_rows(&[[1.0, 2.0, 9.0]]));
        let g = tape.vjp(c, Tensor::from_rows(&[[0.1, 0.2, 0.3]])).unwrap();
        assert_eq!(g.wrt(a), Tensor::from_rows(&[[0.1, 0.2]]));
        assert_eq!(g.wrt(b), Tensor::from_rows(&[[0.3]]));
    }

    #[test]
    fn backward_base_cases() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        assert_eq!(tape.backward(x).unwrap().wrt(x).item(), 1.0);
        let sq = x.mul(x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(sq).unwrap().wrt(x).item(), 6.0);

        let unused = tape.var(Tensor::zeros(2, 2));
        let g = tape.backward(sq).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(1, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(2, 3));
        let b = tape.var(Tensor::zeros(2, 2));
        assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
        assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
        let c = tape.var(Tensor::zeros(3, 1));
        assert!(matches!(a.concat_cols(c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn finite_checks_are_opt_in() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(-1000.0));
        assert!(x.exp_neg().is_ok());
        tape.set_finite_checks(true);
        let err = x.exp_neg().unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "exp_neg"));
    }

    #[test]
    fn softmax_xent_uniform_and_masked_rows() {
        let tape = Tape::new();
        let logits = tape.var(Tensor::from_rows(&[[0.0, 0.0], [5.0, -3.0]]));
        let loss = logits
            .softmax_cross_entropy(Rc::new(vec![1, 0]), Rc::new(vec![1.0, 0.0]))
            .unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(loss).unwrap().wrt(logits);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert_eq!(g.row(0), &[0.5, -0.5]);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let tape = Tape::new();
        let w = tape.var(Tensor::from_rows(&[[0.3, -0.7], [1.1, 0.2]]));
        let x = tape.constant(Tensor::from_rows(&[[0.5, -1.5], [2.0, 0.1]]));
        let y = x.matmul(w).unwrap().tanh().unwrap().sum().unwrap();
        let g1 = tape.backward(y).unwrap().wrt(w);
        let g2 = tape.backward(y).unwrap().wrt(w);
        assert_eq!(g1.data(), g2.data());
    }

    fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
    }

    /// Builds `sum(w ⊙ op(a, b))` on a fresh tape for every differentiable
    /// op and checks both operands against central differences.
    fn check_op(a: &Tensor, b: &Tensor, w: &Tensor, which: usize) -> f64 {
        let eval = |a: &Tensor, b: &Tensor| -> (f64, (Tensor, Tensor)) {
            let tape = Tape::new();
            let va = tape.var(a.clone());
            let vb = tape.var(b.clone());
            let vw = tape.constant(w.clone());
            let out = match which {
                0 => va.add(vb),
                1 => va.sub(vb),
                2 => va.mul(vb),
                3 => va.tanh(),
                4 => va.sigmoid(),
                5 => va.exp_neg(),
                6 => va.softplus(),
                7 => va.scale(-1.7),
                8 => va.add_scalar(1.0),
                9 => va.matmul(vb),
                10 => va.concat_cols(vb).and_then(|c| c.slice_cols(1, 3)),
                11 => va.scale_rows(Rc::new(vec![0.5, -2.0, 1.5])),
                _ => unreachable!(),
            }
            .unwrap();
            let y = out.mul(vw).unwrap().sum().unwrap();
            let g = tape.backward(y).unwrap();
            (y.value().item(), (g.wrt(va), g.wrt(vb)))
        };
        let (_, (ga, gb)) = eval(a, b);
        let fa = finite_diff(a, |x| eval(x, b).0);
        let fb = finite_diff(b, |x| eval(a, x).0);
        max_rel_err(&ga, &fa).max(max_rel_err(&gb, &fb))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn adjoints_match_finite_differences(
            a in tensor_strategy(3, 3),
            b in tensor_strategy(3, 3),
            w in tensor_strategy(3, 3),
            which in 0usize..12,
        ) {
            let err = check_op(&a, &b, &w, which);
            prop_assert!(err <= 1e-5, "op {which}: rel err {err}");
        }

        #[test]
        fn mul_row_and_add_row_adjoints(
            a in tensor_strategy(3, 2),
            r in tensor_strategy(1, 2),
            w in tensor_strategy(3, 2),
        ) {
            let eval = |a: &Tensor, r: &Tensor| {
                let tape = Tape::new();
                let va = tape.var(a.clone());
                let vr = tape.var(r.clone());
                let vw = tape.constant(w.clone());
                let y = va.mul_row(vr).unwrap().add_row(vr).unwrap().mul(vw).unwrap().sum().unwrap();
                let g = tape.backward(y).unwrap();
                (y.value().item(), g.wrt(va), g.wrt(vr))
            };
            let (_, ga, gr) = eval(&a, &r);
            let fa = finite_diff(&a, |x| eval(x, &r).0);
            let fr = finite_diff(&r, |x| eval(&a, x).0);
            prop_assert!(max_rel_err(&ga, &fa) <= 1e-5);
            prop_assert!(max_rel_err(&gr, &fr) <= 1e-5);
        }

        #[test]
        fn softmax_xent_adjoint(logits in tensor_strategy(3, 4)) {
            let labels = Rc::new(vec![0usize, 3, 1]);
            let weights = Rc::new(vec![0.5, 0.25, 0.0]);
            let eval = |l: &Tensor| {
                let tape = Tape::new();
                let v = tape.var(l.clone());
                let y = v.softmax_cross_entropy(labels.clone(), weights.clone()).unwrap();
                (y.value().item(), tape.backward(y).unwrap().wrt(v))
            };
            let (_, g) = eval(&logits);
            let fd = finite_diff(&logits, |l| eval(l).0);
            prop_assert!(max_rel_err(&g, &fd) <= 1e-5);
        }

        #[test]
        fn backward_is_linear(a in tensor_strategy(2, 2), b in tensor_strategy(2, 2)) {
            let tape = Tape::new();
            let x = tape.var(a);
            let m = tape.constant(b);
            let f = x.matmul(m).unwrap().tanh().unwrap().sum().unwrap();
            let g = x.mul(x).unwrap().sigmoid().unwrap().sum().unwrap();
            let both = f.add(g).unwrap();
            let gs = tape.backward(both).unwrap().wrt(x);
            let gf = tape.backward(f).unwrap().wrt(x);
            let gg = tape.backward(g).unwrap().wrt(x);
            let sum = gf.zip_map(&gg, |p, q| p + q);
            prop_assert!(gs.max_abs_diff(&sum) <= 1e-14);
        }
    }
}
