//! Append-only computation graph with a single reverse sweep.
//!
//! Nodes are pushed in evaluation order, so every input id is smaller than
//! the id of the node that consumes it and the graph is acyclic by
//! construction. A graph is differentiated at most once and is then spent.

use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Parameterised kinds carry their constants.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `a * b`
    MatMul,
    /// `a * b^T`
    MatMulNT,
    /// `a + b`; `b` may also be a `1 x n` row (bias) or a `1 x 1` scalar.
    Add,
    /// `a - b` with the same broadcasting as [`Op::Add`].
    Sub,
    /// Elementwise product of same-shape tensors.
    Mul,
    Relu,
    /// `[x]^+`; numerically identical to [`Op::Relu`].
    HingePos,
    Sigmoid,
    Exp,
    Log,
    Abs,
    /// `min(1, max(0, x))`
    Clamp01,
    Scale(f64),
    Offset(f64),
    /// `m x n -> m x 1`, shift-stable.
    LogSumExpRows,
    /// `m x n -> m x 1`
    SumRows,
    /// `m x n -> 1 x 1`
    Sum,
    /// `m x n -> 1 x 1`
    Mean,
    /// `m x n -> m x 1`, row `i` keeps column `labels[i]`.
    PickCols(Vec<usize>),
    /// Rows come in groups of `group` consecutive rows, one group per
    /// example; each row has the row `labels[b]` of its group subtracted.
    GroupRowDiff { group: usize, labels: Vec<usize> },
    Reshape { rows: usize, cols: usize },
    /// Stacks all inputs vertically.
    ConcatRows,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::MatMulNT => "matmul_nt",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elemwise_mul",
            Op::Relu => "relu",
            Op::HingePos => "hinge_pos",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Clamp01 => "clamp01",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::LogSumExpRows => "logsumexp_rows",
            Op::SumRows => "sum_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::PickCols(_) => "pick_cols",
            Op::GroupRowDiff { .. } => "group_row_diff",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows => "concat_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::MatMulNT | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::ConcatRows => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Leaf { param: bool },
    Op(Op),
}

struct Node<T> {
    kind: Kind,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.rows() == 1 && b.cols() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else {
        Err(shape_err(op, format!("{:?} and {:?}", a.shape(), b.shape())))
    }
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Kind::Leaf { param: true }, Vec::new(), value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Kind::Leaf { param: false }, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].kind, Kind::Leaf { param: true })
    }

    fn push(&mut self, kind: Kind, inputs: Vec<NodeId>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { kind, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it for the reverse sweep.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(shape_err(op.name(), format!("expected {n} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(shape_err(op.name(), "no inputs".into()));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!("unknown node {}", bad.0)));
        }
        let value = self.eval(&op, inputs)?;
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(Kind::Op(op), inputs.to_vec(), value, needs_grad))
    }

    fn eval(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor<T>> {
        let a = &self.nodes[inputs[0].0].value;
        let unary = |f: &dyn Fn(T) -> T| Ok(a.map(f));
        match op {
            Op::MatMul => a.matmul_ex(false, self.value(inputs[1]), false),
            Op::MatMulNT => a.matmul_ex(false, self.value(inputs[1]), true),
            Op::Add | Op::Sub => {
                let b = self.value(inputs[1]);
                let sign = if matches!(op, Op::Add) { T::one() } else { -T::one() };
                let bc = broadcast_kind(op.name(), a, b)?;
                Ok(Tensor::from_fn(a.rows(), a.cols(), |r, c| {
                    let rhs = match bc {
                        Broadcast::Same => b.get(r, c),
                        Broadcast::Row => b.get(0, c),
                        Broadcast::Scalar => b.get(0, 0),
                    };
                    a.get(r, c) + sign * rhs
                }))
            }
            Op::Mul => {
                let b = self.value(inputs[1]);
                if a.shape() != b.shape() {
                    return Err(shape_err(op.name(), format!("{:?} and {:?}", a.shape(), b.shape())));
                }
                Ok(a.zip_map(b, |x, y| x * y))
            }
            Op::Relu | Op::HingePos => unary(&|x| if x > T::zero() { x } else { T::zero() }),
            Op::Sigmoid => unary(&sigmoid),
            Op::Exp => unary(&|x| x.exp()),
            Op::Log => unary(&|x| x.ln()),
            Op::Abs => unary(&|x| x.abs()),
            Op::Clamp01 => unary(&|x| x.max(T::zero()).min(T::one())),
            Op::Scale(c) => {
                let c = T::from_f64_lossy(*c);
                unary(&|x| x * c)
            }
            Op::Offset(c) => {
                let c = T::from_f64_lossy(*c);
                unary(&|x| x + c)
            }
            Op::LogSumExpRows => {
                if a.cols() == 0 {
                    return Err(shape_err(op.name(), format!("{:?}", a.shape())));
                }
                Ok(Tensor::column((0..a.rows()).map(|r| logsumexp(a.row_slice(r))).collect()))
            }
            Op::SumRows => Ok(Tensor::column(
                (0..a.rows()).map(|r| a.row_slice(r).iter().fold(T::zero(), |s, &v| s + v)).collect(),
            )),
            Op::Sum => Ok(Tensor::scalar(a.sum())),
            Op::Mean => {
                if a.is_empty() {
                    return Err(shape_err(op.name(), "empty input".into()));
                }
                Ok(Tensor::scalar(a.sum() / T::from_f64_lossy(a.len() as f64)))
            }
            Op::PickCols(labels) => {
                if labels.len() != a.rows() || labels.iter().any(|&l| l >= a.cols()) {
                    return Err(shape_err(
                        op.name(),
                        format!("{} labels for {:?}", labels.len(), a.shape()),
                    ));
                }
                Ok(Tensor::column(labels.iter().enumerate().map(|(r, &l)| a.get(r, l)).collect()))
            }
            Op::GroupRowDiff { group, labels } => {
                if *group == 0
                    || a.rows() != group * labels.len()
                    || labels.iter().any(|&l| l >= *group)
                {
                    return Err(shape_err(
                        op.name(),
                        format!("{:?} with group {group} and {} labels", a.shape(), labels.len()),
                    ));
                }
                Ok(Tensor::from_fn(a.rows(), a.cols(), |r, c| {
                    let base = (r / group) * group;
                    a.get(r, c) - a.get(base + labels[r / group], c)
                }))
            }
            Op::Reshape { rows, cols } => a.clone().reshape(*rows, *cols),
            Op::ConcatRows => {
                let cols = a.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for id in inputs {
                    let t = self.value(*id);
                    if t.cols() != cols {
                        return Err(shape_err(op.name(), format!("{:?} vs {cols} columns", t.shape())));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.as_slice());
                }
                Tensor::new(rows, cols, data)
            }
        }
    }

    /// Reverse sweep from a `1 x 1` root. Each node is visited once; paths
    /// that meet at a node have their contributions summed before the node
    /// propagates further. Consumes the graph.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let [rows, cols] = self.shape(root);
        if rows != 1 || cols != 1 {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.kind {
                Kind::Leaf { param } => {
                    if *param {
                        out[idx] = Some(g);
                    }
                }
                Kind::Op(op) => {
                    let contributions = self.vjp(op, idx, &g)?;
                    for (input, contrib) in node.inputs.iter().zip(contributions) {
                        let Some(contrib) = contrib else { continue };
                        let slot = &mut grads[input.0];
                        *slot = Some(match slot.take() {
                            Some(acc) => acc.zip_map(&contrib, |x, y| x + y),
                            None => contrib,
                        });
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products for each input of node `idx`.
    fn vjp(&self, op: &Op, idx: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[idx];
        let wants = |i: usize| self.nodes[node.inputs[i].0].needs_grad;
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let zero = T::zero();
        let one = T::one();

        let grads = match op {
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                vec![
                    if wants(0) { Some(g.matmul_ex(false, b, true)?) } else { None },
                    if wants(1) { Some(a.matmul_ex(true, g, false)?) } else { None },
                ]
            }
            Op::MatMulNT => {
                let (a, b) = (input(0), input(1));
                vec![
                    if wants(0) { Some(g.matmul(b)?) } else { None },
                    if wants(1) { Some(g.matmul_ex(true, a, false)?) } else { None },
                ]
            }
            Op::Add | Op::Sub => {
                let (a, b) = (input(0), input(1));
                let sign = if matches!(op, Op::Add) { one } else { -one };
                let gb = if wants(1) {
                    Some(match broadcast_kind(op.name(), a, b)? {
                        Broadcast::Same => g.map(|v| sign * v),
                        Broadcast::Row => Tensor::row(
                            (0..g.cols())
                                .map(|c| sign * (0..g.rows()).fold(zero, |s, r| s + g.get(r, c)))
                                .collect(),
                        ),
                        Broadcast::Scalar => Tensor::scalar(sign * g.sum()),
                    })
                } else {
                    None
                };
                vec![if wants(0) { Some(g.clone()) } else { None }, gb]
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                vec![
                    if wants(0) { Some(g.zip_map(b, |x, y| x * y)) } else { None },
                    if wants(1) { Some(g.zip_map(a, |x, y| x * y)) } else { None },
                ]
            }
            Op::Relu | Op::HingePos => {
                vec![Some(g.zip_map(input(0), |gv, x| if x > zero { gv } else { zero }))]
            }
            Op::Sigmoid => {
                vec![Some(g.zip_map(&node.value, |gv, s| gv * s * (one - s)))]
            }
            Op::Exp => vec![Some(g.zip_map(&node.value, |gv, e| gv * e))],
            Op::Log => vec![Some(g.zip_map(input(0), |gv, x| gv / x))],
            Op::Abs => vec![Some(g.zip_map(input(0), |gv, x| {
                if x > zero {
                    gv
                } else if x < zero {
                    -gv
                } else {
                    zero
                }
            }))],
            Op::Clamp01 => vec![Some(g.zip_map(input(0), |gv, x| {
                if x > zero && x < one {
                    gv
                } else {
                    zero
                }
            }))],
            Op::Scale(c) => {
                let c = T::from_f64_lossy(*c);
                vec![Some(g.map(|v| v * c))]
            }
            Op::Offset(_) => vec![Some(g.clone())],
            Op::LogSumExpRows => {
                let a = input(0);
                let out = &node.value;
                vec![Some(Tensor::from_fn(a.rows(), a.cols(), |r, c| {
                    g.get(r, 0) * (a.get(r, c) - out.get(r, 0)).exp()
                }))]
            }
            Op::SumRows => {
                let a = input(0);
                vec![Some(Tensor::from_fn(a.rows(), a.cols(), |r, _| g.get(r, 0)))]
            }
            Op::Sum => {
                let a = input(0);
                vec![Some(Tensor::full(a.rows(), a.cols(), g.item()))]
            }
            Op::Mean => {
                let a = input(0);
                let v = g.item() / T::from_f64_lossy(a.len() as f64);
                vec![Some(Tensor::full(a.rows(), a.cols(), v))]
            }
            Op::PickCols(labels) => {
                let a = input(0);
                let mut d = Tensor::zeros(a.rows(), a.cols());
                for (r, &l) in labels.iter().enumerate() {
                    d.set(r, l, g.get(r, 0));
                }
                vec![Some(d)]
            }
            Op::GroupRowDiff { group, labels } => {
                let mut d = g.clone();
                for (b, &l) in labels.iter().enumerate() {
                    let base = b * group;
                    for c in 0..g.cols() {
                        let total = (base..base + group).fold(zero, |s, r| s + g.get(r, c));
                        let v = d.get(base + l, c) - total;
                        d.set(base + l, c, v);
                    }
                }
                vec![Some(d)]
            }
            Op::Reshape { .. } => {
                let [r, c] = input(0).shape();
                vec![Some(g.clone().reshape(r, c)?)]
            }
            Op::ConcatRows => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let rows = input(i).rows();
                    if wants(i) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        parts.push(Some(g.select_rows(&idx)));
                    } else {
                        parts.push(None);
                    }
                    offset += rows;
                }
                parts
            }
        };
        Ok(grads)
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulNT, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn hinge_pos(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::HingePos, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[a])
    }
    pub fn clamp01(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Clamp01, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Offset(c), &[a])
    }
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSumExpRows, &[a])
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumRows, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }
    pub fn pick_cols(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Op::PickCols(labels.to_vec()), &[a])
    }
    pub fn group_row_diff(&mut self, a: NodeId, group: usize, labels: &[usize]) -> Result<NodeId> {
        self.apply(Op::GroupRowDiff { group, labels: labels.to_vec() }, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.apply(Op::Reshape { rows, cols }, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatRows, parts)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !m.is_finite() {
        return m;
    }
    let s = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp());
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, v).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).as_slice(), &[0., 0., 2.]);
    }

    #[test]
    fn logsumexp_of_zeros_is_log3() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[0., 0., 0.]));
        let r = g.logsumexp_rows(x).unwrap();
        assert!((g.value(r).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_example() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 3, &[1., 0., 2., 0., 1., 0.]));
        let b = g.constant(t(3, 1, &[1., 1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).as_slice(), &[3., 1.]);
    }

    #[test]
    fn sum_of_relu_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[-1., 2.]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[0., 1.]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(t(1, 2, &[0., 0.]));
        let lse = g.logsumexp_rows(z).unwrap();
        let zy = g.pick_cols(z, &[0]).unwrap();
        let d = g.sub(lse, zy).unwrap();
        let root = g.sum(d).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(z).unwrap().as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn subgradients_at_zero_are_zero() {
        for op in [Op::Relu, Op::HingePos, Op::Abs] {
            let mut g = Graph::new();
            let x = g.param(t(1, 1, &[0.0]));
            let y = g.apply(op.clone(), &[x]).unwrap();
            let s = g.sum(y).unwrap();
            let grads = g.backward(s).unwrap();
            assert_eq!(grads.get(x).unwrap().item(), 0.0, "{}", op.name());
        }
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = exp(x) * exp(x) = e^{2x}; dy/dx = 2 e^{2x}
        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[0.3]));
        let e = g.exp(x).unwrap();
        let y = g.mul(e, e).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let expect = 2.0 * (0.6f64).exp();
        assert!((grads.get(x).unwrap().item() - expect).abs() < 1e-14);

        // Two distinct parents: y = 3x + 5x
        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[1.0]));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.scale(x, 5.0).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 8.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot { rows: 1, cols: 2 })));
    }

    #[test]
    fn graph_is_single_use() {
        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[1.]));
        g.backward(x).unwrap();
        assert!(matches!(g.backward(x), Err(Error::GraphConsumed)));
        assert!(matches!(g.relu(x), Err(Error::GraphConsumed)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 2));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        let msg = g.matmul(a, a).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let mut g = Graph::new();
        let a = g.constant(t(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let b = g.param(t(1, 2, &[0.5, -0.5]));
        let y = g.add(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().as_slice(), &[3.0, 3.0]);
    }
}
