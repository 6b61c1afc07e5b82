//! Reverse-mode automatic differentiation on a tape of matrix operations.
//!
//! Operations are evaluated eagerly as they are recorded. [`Tape::grad`]
//! walks the record backwards and *records* every adjoint computation as new
//! nodes, so the gradients it returns are themselves differentiable. This is
//! what makes [`grad_of_grad_norm_exact`] possible: the norm of a gradient is
//! built on top of the gradient nodes and differentiated a second time.
//!
//! Tapes are rebuilt for every minibatch; nothing is cached between steps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing added under the square root of every gradient norm.
pub const NORM_EPSILON: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf replaced by [`Tape::forward`].
    Input,
    /// Leaf that gradients flow to.
    Param,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `m x n` plus a `1 x n` row added to every row.
    AddRow(usize, usize),
    /// `m x n -> 1 x n`
    SumRows(usize),
    /// `1 x n -> m x n`
    BroadcastRows(usize, usize),
    /// `m x n -> m x 1`
    SumCols(usize),
    /// `m x 1 -> m x n`
    BroadcastCols(usize, usize),
    SumAll(usize),
    Scale(usize, f64),
    /// Tensor times a `1 x 1` node.
    ScaleBy(usize, usize),
    Relu(usize),
    Tanh(usize),
    /// Row-wise softmax.
    Softmax(usize),
    /// Batch-mean cross-entropy of raw logits against class indices.
    SoftmaxCrossEntropy(usize, Rc<[usize]>),
    /// Mean over all elements of `(pred - target)^2`.
    SquaredError(usize, usize),
    Sqrt(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(_) => "sum",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::SquaredError(..) => "squared_error",
            Op::Sqrt(_) => "sqrt",
        }
    }

    fn operands(&self) -> (Option<usize>, Option<usize>) {
        match *self {
            Op::Input | Op::Param | Op::Const => (None, None),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleBy(a, b)
            | Op::SquaredError(a, b) => (Some(a), Some(b)),
            Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a, _)
            | Op::SumAll(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::Sqrt(a) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations; node indices are a topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose value [`Tape::forward`] replaces, in creation order.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, Op::Input, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, Op::Const, false)
    }

    fn shape_of(&self, i: usize) -> [usize; 2] {
        self.nodes[i].value.shape()
    }

    /// Shape rules for every operation, shared by recording and replay.
    fn check(&self, index: usize, op: &Op) -> Result<()> {
        let fail = |detail: String| Err(Error::Shape { node: format!("node #{index} ({})", op.name()), detail });
        let s = |i: usize| self.shape_of(i);
        match *op {
            Op::Input | Op::Param | Op::Const => Ok(()),
            Op::MatMul(a, b) => {
                if s(a)[1] != s(b)[0] {
                    return fail(format!("cannot multiply {:?} by {:?}", s(a), s(b)));
                }
                Ok(())
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                if s(a) != s(b) {
                    return fail(format!("operands {:?} and {:?} differ", s(a), s(b)));
                }
                Ok(())
            }
            Op::SquaredError(a, b) => {
                if s(a) != s(b) {
                    return fail(format!("prediction {:?} vs target {:?}", s(a), s(b)));
                }
                Ok(())
            }
            Op::AddRow(a, b) => {
                if s(b)[0] != 1 || s(b)[1] != s(a)[1] {
                    return fail(format!("row {:?} cannot broadcast onto {:?}", s(b), s(a)));
                }
                Ok(())
            }
            Op::BroadcastRows(a, _) => {
                if s(a)[0] != 1 {
                    return fail(format!("expected a single row, found {:?}", s(a)));
                }
                Ok(())
            }
            Op::BroadcastCols(a, _) => {
                if s(a)[1] != 1 {
                    return fail(format!("expected a single column, found {:?}", s(a)));
                }
                Ok(())
            }
            Op::ScaleBy(_, k) => {
                if s(k) != [1, 1] {
                    return fail(format!("scale factor must be 1x1, found {:?}", s(k)));
                }
                Ok(())
            }
            Op::SoftmaxCrossEntropy(a, ref labels) => {
                let [rows, cols] = s(a);
                if labels.len() != rows {
                    return fail(format!("{} labels for {rows} rows of logits", labels.len()));
                }
                if cols < 2 {
                    return fail("cross-entropy needs at least two classes".into());
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
                    return Err(Error::LabelOutOfRange { label: bad, num_classes: cols });
                }
                Ok(())
            }
            Op::Transpose(_)
            | Op::SumRows(_)
            | Op::SumCols(_)
            | Op::SumAll(_)
            | Op::Scale(..)
            | Op::Relu(_)
            | Op::Tanh(_)
            | Op::Softmax(_)
            | Op::Sqrt(_) => Ok(()),
        }
    }

    fn eval(&self, op: &Op) -> Tensor {
        let v = |i: usize| &self.nodes[i].value;
        match *op {
            Op::Input | Op::Param | Op::Const => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::Transpose(a) => v(a).transpose(),
            Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            Op::Div(a, b) => v(a).zip_map(v(b), |x, y| x / y),
            Op::AddRow(a, b) => {
                let (x, row) = (v(a), v(b));
                let cols = x.cols();
                let mut out = x.clone();
                for (i, o) in out.values_mut().iter_mut().enumerate() {
                    *o += row.values()[i % cols];
                }
                out
            }
            Op::SumRows(a) => {
                let x = v(a);
                let mut out = vec![0.0; x.cols()];
                for r in 0..x.rows() {
                    for (o, &e) in out.iter_mut().zip(x.row_slice(r)) {
                        *o += e;
                    }
                }
                Tensor::row(out)
            }
            Op::BroadcastRows(a, m) => {
                let x = v(a);
                Tensor::from_raw(m, x.cols(), x.values().repeat(m))
            }
            Op::SumCols(a) => {
                let x = v(a);
                let out = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
                Tensor::from_raw(x.rows(), 1, out)
            }
            Op::BroadcastCols(a, n) => {
                let x = v(a);
                let out = x.values().iter().flat_map(|&e| std::iter::repeat_n(e, n)).collect();
                Tensor::from_raw(x.rows(), n, out)
            }
            Op::SumAll(a) => Tensor::scalar(v(a).sum()),
            Op::Scale(a, c) => v(a).scale(c),
            Op::ScaleBy(a, k) => v(a).scale(v(k).item()),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Softmax(a) => softmax_rows(v(a)),
            Op::SoftmaxCrossEntropy(a, ref labels) => {
                let x = v(a);
                let total: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(r, &l)| {
                        let row = x.row_slice(r);
                        log_sum_exp(row) - row[l]
                    })
                    .sum();
                Tensor::scalar(total / x.rows() as f64)
            }
            Op::SquaredError(a, b) => {
                let n = v(a).len() as f64;
                let total: f64 = v(a).values().iter().zip(v(b).values()).map(|(p, t)| (p - t) * (p - t)).sum();
                Tensor::scalar(total / n)
            }
            Op::Sqrt(a) => v(a).map(f64::sqrt),
        }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let index = self.nodes.len();
        self.check(index, &op)?;
        Ok(self.push_unchecked(op))
    }

    /// Used by backward rules, whose operand shapes hold by construction.
    fn push_unchecked(&mut self, op: Op) -> Var {
        debug_assert!(self.check(self.nodes.len(), &op).is_ok(), "internal shape error in {}", op.name());
        let value = self.eval(&op);
        let (a, b) = op.operands();
        let requires_grad = a.is_some_and(|i| self.nodes[i].requires_grad)
            || b.is_some_and(|i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a.0, b.0))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(x.0, row.0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumRows(a.0))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.record(Op::BroadcastRows(a.0, rows))
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumCols(a.0))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        self.record(Op::BroadcastCols(a.0, cols))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumAll(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a.0, c))
    }

    pub fn scale_by(&mut self, a: Var, k: Var) -> Result<Var> {
        self.record(Op::ScaleBy(a.0, k.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a.0))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a.0))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy(logits.0, labels.into()))
    }

    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.record(Op::SquaredError(pred.0, target.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a.0))
    }

    /// Replays the whole tape with new values for the [`Tape::input`]
    /// leaves (in creation order) and returns the value of `output`.
    pub fn forward(&mut self, inputs: &[Tensor], output: Var) -> Result<Tensor> {
        let slots: Vec<usize> =
            (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i].op, Op::Input)).collect();
        if slots.len() != inputs.len() {
            return Err(Error::invalid(format!(
                "tape declares {} inputs, {} supplied",
                slots.len(),
                inputs.len()
            )));
        }
        for (&slot, x) in slots.iter().zip(inputs) {
            if self.nodes[slot].value.shape() != x.shape() {
                return Err(Error::Shape {
                    node: format!("node #{slot} (input)"),
                    detail: format!("declared {:?}, supplied {:?}", self.nodes[slot].value.shape(), x.shape()),
                });
            }
            self.nodes[slot].value = x.clone();
        }
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Input | Op::Param | Op::Const) {
                continue;
            }
            self.check(i, &op)?;
            self.nodes[i].value = self.eval(&op);
        }
        Ok(self.value(output).clone())
    }

    fn accumulate(&mut self, adjoints: &mut [Option<Var>], target: usize, contribution: Var) {
        adjoints[target] = Some(match adjoints[target] {
            None => contribution,
            Some(prev) => self.push_unchecked(Op::Add(prev.0, contribution.0)),
        });
    }

    /// Gradients of the scalar `output` with respect to `wrt`, recorded as
    /// new nodes so they can be differentiated again. Leaves that `output`
    /// does not depend on receive a zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let shape = self.value(output).shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarOutput { rows: shape[0], cols: shape[1] });
        }
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = self.constant(Tensor::scalar(1.0));
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let needs = |t: &Tape, j: usize| t.nodes[j].requires_grad;
            let g = g.0;
            match op {
                Op::Input | Op::Param | Op::Const => {}
                Op::MatMul(a, b) => {
                    if needs(self, a) {
                        let bt = self.push_unchecked(Op::Transpose(b));
                        let ga = self.push_unchecked(Op::MatMul(g, bt.0));
                        self.accumulate(&mut adj, a, ga);
                    }
                    if needs(self, b) {
                        let at = self.push_unchecked(Op::Transpose(a));
                        let gb = self.push_unchecked(Op::MatMul(at.0, g));
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.push_unchecked(Op::Transpose(g));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Add(a, b) => {
                    if needs(self, a) {
                        self.accumulate(&mut adj, a, Var(g));
                    }
                    if needs(self, b) {
                        self.accumulate(&mut adj, b, Var(g));
                    }
                }
                Op::Sub(a, b) => {
                    if needs(self, a) {
                        self.accumulate(&mut adj, a, Var(g));
                    }
                    if needs(self, b) {
                        let gb = self.push_unchecked(Op::Scale(g, -1.0));
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(self, a) {
                        let ga = self.push_unchecked(Op::Mul(g, b));
                        self.accumulate(&mut adj, a, ga);
                    }
                    if needs(self, b) {
                        let gb = self.push_unchecked(Op::Mul(g, a));
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let g_over_b = self.push_unchecked(Op::Div(g, b));
                    if needs(self, a) {
                        self.accumulate(&mut adj, a, g_over_b);
                    }
                    if needs(self, b) {
                        // d(a/b)/db = -(a/b)/b, reusing this node's output.
                        let t = self.push_unchecked(Op::Mul(g_over_b.0, i));
                        let gb = self.push_unchecked(Op::Scale(t.0, -1.0));
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::AddRow(a, b) => {
                    if needs(self, a) {
                        self.accumulate(&mut adj, a, Var(g));
                    }
                    if needs(self, b) {
                        let gb = self.push_unchecked(Op::SumRows(g));
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::SumRows(a) => {
                    let rows = self.shape_of(a)[0];
                    let ga = self.push_unchecked(Op::BroadcastRows(g, rows));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastRows(a, _) => {
                    let ga = self.push_unchecked(Op::SumRows(g));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumCols(a) => {
                    let cols = self.shape_of(a)[1];
                    let ga = self.push_unchecked(Op::BroadcastCols(g, cols));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastCols(a, _) => {
                    let ga = self.push_unchecked(Op::SumCols(g));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumAll(a) => {
                    let [rows, cols] = self.shape_of(a);
                    let column = self.push_unchecked(Op::BroadcastRows(g, rows));
                    let ga = self.push_unchecked(Op::BroadcastCols(column.0, cols));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.push_unchecked(Op::Scale(g, c));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::ScaleBy(a, k) => {
                    if needs(self, a) {
                        let ga = self.push_unchecked(Op::ScaleBy(g, k));
                        self.accumulate(&mut adj, a, ga);
                    }
                    if needs(self, k) {
                        let prod = self.push_unchecked(Op::Mul(g, a));
                        let gk = self.push_unchecked(Op::SumAll(prod.0));
                        self.accumulate(&mut adj, k, gk);
                    }
                }
                Op::Relu(a) => {
                    // The mask is locally constant, so second derivatives vanish.
                    let mask = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let ga = self.push_unchecked(Op::Mul(g, m.0));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let [rows, cols] = self.shape_of(a);
                    let ones = self.constant(Tensor::filled(rows, cols, 1.0));
                    let sq = self.push_unchecked(Op::Mul(i, i));
                    let deriv = self.push_unchecked(Op::Sub(ones.0, sq.0));
                    let ga = self.push_unchecked(Op::Mul(g, deriv.0));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Softmax(a) => {
                    // dx = y*g - y * rowsum(y*g)
                    let cols = self.shape_of(a)[1];
                    let yg = self.push_unchecked(Op::Mul(i, g));
                    let s = self.push_unchecked(Op::SumCols(yg.0));
                    let sb = self.push_unchecked(Op::BroadcastCols(s.0, cols));
                    let ysb = self.push_unchecked(Op::Mul(i, sb.0));
                    let ga = self.push_unchecked(Op::Sub(yg.0, ysb.0));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SoftmaxCrossEntropy(a, labels) => {
                    let [rows, cols] = self.shape_of(a);
                    let mut onehot = Tensor::zeros(rows, cols);
                    for (r, &l) in labels.iter().enumerate() {
                        onehot.values_mut()[r * cols + l] = 1.0;
                    }
                    let onehot = self.constant(onehot);
                    let probs = self.push_unchecked(Op::Softmax(a));
                    let diff = self.push_unchecked(Op::Sub(probs.0, onehot.0));
                    let mean = self.push_unchecked(Op::Scale(diff.0, 1.0 / rows as f64));
                    let ga = self.push_unchecked(Op::ScaleBy(mean.0, g));
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SquaredError(p, t) => {
                    let n = self.nodes[p].value.len() as f64;
                    let diff = self.push_unchecked(Op::Sub(p, t));
                    let d = self.push_unchecked(Op::Scale(diff.0, 2.0 / n));
                    let gp = self.push_unchecked(Op::ScaleBy(d.0, g));
                    if needs(self, p) {
                        self.accumulate(&mut adj, p, gp);
                    }
                    if needs(self, t) {
                        let gt = self.push_unchecked(Op::Scale(gp.0, -1.0));
                        self.accumulate(&mut adj, t, gt);
                    }
                }
                Op::Sqrt(a) => {
                    let twice = self.push_unchecked(Op::Scale(i, 2.0));
                    let ga = self.push_unchecked(Op::Div(g, twice.0));
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(v) => v,
                None => {
                    let [r, c] = self.shape_of(w.0);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// First-order gradients as plain tensors. The tape is restored to its
    /// pre-call length afterwards.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let grads = self.grad(output, wrt)?;
        let values = grads.iter().map(|&g| self.value(g).clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }
}

/// `sqrt(sum of squares + NORM_EPSILON)` over a list of tensors.
pub fn smoothed_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    let sumsq: f64 = tensors.into_iter().map(Tensor::sum_squares).sum();
    (sumsq + NORM_EPSILON).sqrt()
}

/// Result of [`grad_of_grad_norm_exact`].
#[derive(Debug, Clone)]
pub struct GradNormGradient {
    /// Smoothed `||dL/d inner||_F` at the current point.
    pub norm: f64,
    /// `d ||dL/d inner||_F / d outer`, one tensor per outer variable.
    pub grads: Vec<Tensor>,
}

/// Exact gradient of the (smoothed) Frobenius norm of `dL/d inner` with
/// respect to `outer`, by differentiating through the recorded backward pass.
pub fn grad_of_grad_norm_exact(
    tape: &mut Tape,
    loss: Var,
    inner: &[Var],
    outer: &[Var],
) -> Result<GradNormGradient> {
    let mark = tape.len();
    let inner_grads = tape.grad(loss, inner)?;
    let mut total: Option<Var> = None;
    for g in inner_grads {
        let sq = tape.mul(g, g)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let Some(total) = total else {
        return Err(Error::invalid("no inner variables"));
    };
    if tape.value(total).item() == 0.0 {
        tape.nodes.truncate(mark);
        return Err(Error::ZeroGradientNorm);
    }
    let eps = tape.constant(Tensor::scalar(NORM_EPSILON));
    let smoothed = tape.add(total, eps)?;
    let norm = tape.sqrt(smoothed)?;
    let norm_value = tape.value(norm).item();
    let grads = tape.backward(norm, outer)?;
    tape.nodes.truncate(mark);
    Ok(GradNormGradient { norm: norm_value, grads })
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::from_raw(x.rows(), cols, out)
}
