//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is built eagerly: each recording call evaluates its op and
//! stores the result, so node values are available immediately. Nodes only
//! refer to earlier nodes, which keeps the tape topologically ordered.

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};
use super::EPS_NORM;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape knows how to differentiate.
#[derive(Debug, Clone)]
pub enum Op {
    /// Trainable input; gradients are reported for these.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    /// Adds a `1×k` row to every row of `x`.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// `scale · x + shift`, elementwise.
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    Relu(NodeId),
    Exp(NodeId),
    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    LogClamped {
        x: NodeId,
        floor: f64,
    },
    /// Row-wise `ln(max(1 - softmax(x), floor))`, computed from the logits.
    LogSoftmaxComplement {
        x: NodeId,
        floor: f64,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2Normalize(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    /// Sum of all entries, as a 1x1 node.
    Sum(NodeId),
    /// `-(1/n) Σ_i x[i, labels[i]]` over log-probabilities.
    NllMean {
        x: NodeId,
        labels: Vec<usize>,
    },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::LogClamped { x, .. }
            | Op::LogSoftmaxComplement { x, .. }
            | Op::SliceRows { x, .. }
            | Op::NllMean { x, .. } => vec![*x],
            Op::Relu(x) | Op::Exp(x) | Op::Softmax(x) | Op::LogSoftmax(x) | Op::L2Normalize(x) | Op::Sum(x) => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_raw(Op::Constant, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates and records `op`.
    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        let operands = op.operands();
        if let Some(bad) = operands.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!("operand {bad:?} is not on the tape")));
        }
        let value = forward(&op, |id| &self.nodes[id.0].value)?;
        let needs_grad = operands.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push_raw(op, value, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulBt(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(x, bias))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.push(Op::Affine { x, scale, shift: 0.0 })
    }

    pub fn affine_scalar(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(x))
    }

    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.push(Op::LogClamped { x, floor })
    }

    pub fn log_softmax_complement(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.push(Op::LogSoftmaxComplement { x, floor })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(x))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize(x))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::ConcatCols(parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { x, start, end })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn nll_mean(&mut self, log_probs: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.push(Op::NllMean { x: log_probs, labels })
    }

    /// Recomputes every node from the stored leaf and constant values.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => forward(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Back-propagates from a 1x1 `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { rows: loss_value.rows(), cols: loss_value.cols() });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            self.pull_back(idx, &upstream, &mut grads);
        }

        // only leaves are reported
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn pull_back(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let value = &self.nodes[idx].value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut send = |id: NodeId, contribution: Matrix| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot => *slot = Some(contribution),
            }
        };
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;

        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul_bt(val(*b)).expect("shapes checked on record"));
                }
                if wants(*b) {
                    send(*b, val(*a).matmul_at(g).expect("shapes checked on record"));
                }
            }
            Op::MatMulBt(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul(val(*b)).expect("shapes checked on record"));
                }
                if wants(*b) {
                    send(*b, g.matmul_at(val(*a)).expect("shapes checked on record"));
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*bias) {
                    let mut col_sum = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in col_sum.data_mut().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    send(*bias, col_sum);
                }
                send(*x, g.clone());
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), "mul", |u, v| u * v).unwrap());
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), "mul", |u, v| u * v).unwrap());
                }
            }
            Op::Affine { x, scale, .. } => send(*x, g.map(|v| v * scale)),
            Op::Relu(x) => send(*x, g.zip_map(val(*x), "relu", |u, v| if v > 0.0 { u } else { 0.0 }).unwrap()),
            Op::Exp(x) => send(*x, g.zip_map(value, "exp", |u, y| u * y).unwrap()),
            Op::LogClamped { x, floor } => {
                send(*x, g.zip_map(val(*x), "log", |u, v| if v > *floor { u / v } else { 0.0 }).unwrap())
            }
            Op::LogSoftmaxComplement { x, floor } => {
                // d ln(1 - p_c) / dx_k = [k != c] p_k / (1 - p_c) - p_k
                let log_floor = floor.ln();
                let p = val(*x).softmax_rows();
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (pr, vr, gr) = (p.row(r), value.row(r), g.row(r));
                    let active: Vec<f64> = (0..gr.len()).map(|c| if vr[c] > log_floor { gr[c] } else { 0.0 }).collect();
                    let total: f64 = active.iter().sum();
                    for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                        let excluded: f64 = (0..gr.len()).filter(|&c| c != k).map(|c| active[c] * (-vr[c]).exp()).sum();
                        *o = pr[k] * (excluded - total);
                    }
                }
                send(*x, out)
            }
            Op::Softmax(x) => {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s = value.row(r);
                    let gr = g.row(r);
                    let inner = dot(s, gr);
                    for ((o, &si), &gi) in out.row_mut(r).iter_mut().zip(s).zip(gr) {
                        *o = si * (gi - inner);
                    }
                }
                send(*x, out);
            }
            Op::LogSoftmax(x) => {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = value.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                send(*x, out);
            }
            Op::L2Normalize(x) => {
                let input = val(*x);
                let norms = input.row_norms();
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for (r, norm) in norms.into_iter().enumerate() {
                    let y = value.row(r);
                    let gr = g.row(r);
                    let proj = dot(y, gr);
                    for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = (gi - yi * proj) / norm;
                    }
                }
                send(*x, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for part in parts {
                    let cols = val(*part).cols();
                    if wants(*part) {
                        let mut piece = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            piece.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        send(*part, piece);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows { x, start, .. } => {
                let input = val(*x);
                let mut out = Matrix::zeros(input.rows(), input.cols());
                for r in 0..g.rows() {
                    out.row_mut(start + r).copy_from_slice(g.row(r));
                }
                send(*x, out);
            }
            Op::Sum(x) => {
                let input = val(*x);
                send(*x, Matrix::filled(input.rows(), input.cols(), g.get(0, 0)));
            }
            Op::NllMean { x, labels } => {
                let input = val(*x);
                let mut out = Matrix::zeros(input.rows(), input.cols());
                let w = -g.get(0, 0) / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    out.set(r, label, w);
                }
                send(*x, out);
            }
        }
    }
}

fn forward<'a>(op: &Op, value_of: impl Fn(NodeId) -> &'a Matrix) -> Result<Matrix> {
    let out = match op {
        Op::Leaf | Op::Constant => return Err(Error::InvalidArgument("inputs carry their own values".into())),
        Op::MatMul(a, b) => value_of(*a).matmul(value_of(*b))?,
        Op::MatMulBt(a, b) => value_of(*a).matmul_bt(value_of(*b))?,
        Op::AddRow(x, b) => value_of(*x).add_row(value_of(*b))?,
        Op::Add(a, b) => value_of(*a).zip_map(value_of(*b), "add", |u, v| u + v)?,
        Op::Sub(a, b) => value_of(*a).zip_map(value_of(*b), "sub", |u, v| u - v)?,
        Op::Mul(a, b) => value_of(*a).zip_map(value_of(*b), "mul", |u, v| u * v)?,
        Op::Affine { x, scale, shift } => value_of(*x).map(|v| scale * v + shift),
        Op::Relu(x) => value_of(*x).map(|v| v.max(0.0)),
        Op::Exp(x) => value_of(*x).map(f64::exp),
        Op::LogClamped { x, floor } => value_of(*x).map(|v| v.max(*floor).ln()),
        Op::LogSoftmaxComplement { x, floor } => log_softmax_complement(value_of(*x), *floor),
        Op::Softmax(x) => value_of(*x).softmax_rows(),
        Op::LogSoftmax(x) => value_of(*x).log_softmax_rows(),
        Op::L2Normalize(x) => value_of(*x).l2_normalize_rows(EPS_NORM)?,
        Op::ConcatCols(parts) => {
            let mats: Vec<&Matrix> = parts.iter().map(|id| value_of(*id)).collect();
            Matrix::hstack(&mats)?
        }
        Op::SliceRows { x, start, end } => value_of(*x).slice_rows(*start, *end)?,
        Op::Sum(x) => Matrix::scalar(value_of(*x).sum()),
        Op::NllMean { x, labels } => {
            let input = value_of(*x);
            if labels.len() != input.rows() || labels.is_empty() {
                return Err(Error::shape("nll_mean", input.shape(), (labels.len(), 1)));
            }
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= input.cols() {
                    return Err(Error::LabelOutOfRange { label, classes: input.cols() });
                }
                total += input.get(r, label);
            }
            Matrix::scalar(-total / labels.len() as f64)
        }
    };
    if let Some(pos) = out.data().iter().position(|v| !v.is_finite()) {
        let cols = out.cols().max(1);
        return Err(Error::NonFinite { row: pos / cols, col: pos % cols });
    }
    Ok(out)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_softmax_complement(x: &Matrix, floor: f64) -> Matrix {
    let log_floor = floor.ln();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let all = log_sum_exp(row.iter().copied());
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            let rest = log_sum_exp(row.iter().enumerate().filter(|&(k, _)| k != c).map(|(_, &v)| v));
            *o = (rest - all).max(log_floor);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn softmax_complement_matches_naive_form_and_fd() {
        let x = Matrix::from_rows(&[[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]]).unwrap();
        let v = log_softmax_complement(&x, 1e-12);
        let p = x.softmax_rows();
        for (a, b) in v.data().iter().zip(p.data()) {
            assert!((a - (1.0 - b).ln()).abs() < 1e-12);
        }
        let f = |params: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
            let mut t = Tape::new();
            let l = t.leaf(params[0].clone());
            let c = t.log_softmax_complement(l, 1e-12)?;
            let w = t.constant(Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.25, 3.0, 1.0]]).unwrap());
            let prod = t.mul(c, w)?;
            let s = t.sum(prod)?;
            let mut g = t.backward(s)?;
            Ok((t.value(s).get(0, 0), vec![g.take(l).unwrap()]))
        };
        assert!(finite_diff_check(&f, &[x], 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn softmax_complement_keeps_precision_near_one() {
        // p_0 = 1 - ~e^-20, so ln(1 - p_0) is about -20
        let x = Matrix::from_rows(&[[20.0, 0.0]]).unwrap();
        let v = log_softmax_complement(&x, 1e-300);
        assert!((v.get(0, 0) - (-20.0 - (1.0 + (-20f64).exp()).ln())).abs() < 1e-12);
        let floored = log_softmax_complement(&x, 1e-6);
        assert_eq!(floored.get(0, 0), 1e-6f64.ln());
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().as_scalar(), Some(6.0));
    }

    #[test]
    fn loss_gradient_of_itself_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.5));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().as_scalar(), Some(1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { rows: 2, cols: 1 })));
    }

    #[test]
    fn constants_get_no_gradient_and_unused_leaves_get_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.0));
        let unused = tape.leaf(Matrix::zeros(1, 3));
        let c = tape.constant(Matrix::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().as_scalar(), Some(5.0));
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(unused).unwrap(), &Matrix::zeros(1, 3));
    }

    #[test]
    fn operands_precede_consumers_and_replay_is_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap());
        let w = tape.leaf(Matrix::from_rows(&[[1.1, 0.4, -0.2], [0.5, -0.9, 0.8]]).unwrap());
        let b = tape.leaf(Matrix::from_rows(&[[0.1, 0.0, -0.1]]).unwrap());
        let z = tape.affine(x, w, b).unwrap();
        let h = tape.relu(z).unwrap();
        let n = tape.l2_normalize(h).unwrap();
        let ls = tape.log_softmax(n).unwrap();
        let loss = tape.nll_mean(ls, vec![0, 2]).unwrap();
        for i in 0..tape.len() {
            for operand in tape.op(NodeId(i)).operands() {
                assert!(operand.index() < i);
            }
        }
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            let orig = tape.value(NodeId(i));
            let same = v.data().iter().zip(orig.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "node {i} differs on replay");
        }
        assert!(tape.value(loss).as_scalar().unwrap() > 0.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 3));
        let b = tape.leaf(Matrix::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
