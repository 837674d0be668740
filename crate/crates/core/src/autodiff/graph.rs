use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, Broadcast};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to `log` inputs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Placeholder(String),
    Param(String),
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    ReduceMean(NodeId),
    SmoothL1(NodeId),
    Grl(NodeId, f64),
    Reshape(NodeId, Vec<usize>),
    SelectRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Placeholder(_) => "placeholder",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::ReduceMean(_) => "reduce_mean",
            Op::SmoothL1(_) => "smooth_l1",
            Op::Grl(..) => "grl",
            Op::Reshape(..) => "reshape",
            Op::SelectRows(..) => "select_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Placeholder(_) | Op::Param(_) | Op::Constant => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::ReduceMean(a)
            | Op::SmoothL1(a)
            | Op::Grl(a, _)
            | Op::Reshape(a, _)
            | Op::SelectRows(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Named gradients returned by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Append-only computation graph; insertion order is topological order.
///
/// Nodes are evaluated eagerly while the graph is built whenever their
/// inputs already hold values, so data-dependent construction (row
/// selection from earlier predictions, for instance) can read them.
/// [`Graph::evaluate`] re-runs every node with fresh feeds.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    debug: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that rejects NaN/Inf in any node output.
    pub fn debug() -> Self {
        Self {
            debug: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Value of a node that is known to have been evaluated.
    pub fn val(&self, id: NodeId) -> &Tensor {
        self.value(id).expect("node has not been evaluated")
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    // ---- leaves ----

    /// Named input bound to `value`; receives a gradient iff `value.requires_grad()`.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.leaf(Op::Placeholder(name.to_owned()), Some(value), Some(name))
    }

    /// Named input without a value; must be supplied through feeds.
    pub fn placeholder(&mut self, name: &str) -> Result<NodeId> {
        self.leaf(Op::Placeholder(name.to_owned()), None, Some(name))
    }

    /// Trainable parameter; always receives a gradient.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let value = value.with_requires_grad(true);
        self.leaf(Op::Param(name.to_owned()), Some(value), Some(name))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Some(value.with_requires_grad(false)))
    }

    fn leaf(&mut self, op: Op, value: Option<Tensor>, name: Option<&str>) -> Result<NodeId> {
        if let Some(name) = name {
            if self.names.contains_key(name) {
                return Err(Error::DuplicateName(name.to_owned()));
            }
        }
        let id = self.push(op, value);
        if let Some(name) = name {
            self.names.insert(name.to_owned(), id);
        }
        Ok(id)
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may broadcast as a row `[1, n]`, a column `[m, 1]` or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Add(a, b))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.op(Op::Scale(a, factor))
    }

    /// Concatenation of 2-D tensors along the column axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.op(Op::Concat(parts.to_vec()))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Sigmoid(a))
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Log(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Softmax(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::ReduceMean(a))
    }

    pub fn smooth_l1(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::SmoothL1(a))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-coeff` backward.
    pub fn grl(&mut self, a: NodeId, coeff: f64) -> Result<NodeId> {
        assert!(coeff >= 0.0, "grl coefficient must be nonnegative");
        self.op(Op::Grl(a, coeff))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.op(Op::Reshape(a, shape.to_vec()))
    }

    /// Gathers rows of a 2-D tensor; gradients scatter back additively.
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.op(Op::SelectRows(a, rows.to_vec()))
    }

    /// `a - b`, built from scale and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    fn op(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "input node from another graph");
        }
        let index = self.nodes.len();
        let ready = op.inputs().iter().all(|i| self.nodes[i.0].value.is_some());
        let value = if ready {
            Some(self.compute(index, &op)?)
        } else {
            None
        };
        Ok(self.push(op, value))
    }

    // ---- evaluation ----

    /// Re-evaluates every node with `feeds` overriding named inputs and
    /// parameters, and returns the value of the last node.
    pub fn evaluate(&mut self, feeds: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let last = NodeId(self.nodes.len().checked_sub(1).expect("empty graph"));
        self.evaluate_node(last, feeds)
    }

    pub fn evaluate_node(
        &mut self,
        out: NodeId,
        feeds: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        for index in 0..=out.0 {
            let op = self.nodes[index].op.clone();
            match &op {
                Op::Placeholder(name) | Op::Param(name) => {
                    if let Some(fed) = feeds.get(name) {
                        let requires_grad = matches!(op, Op::Param(_)) || fed.requires_grad();
                        self.nodes[index].value =
                            Some(fed.clone().with_requires_grad(requires_grad));
                    } else if self.nodes[index].value.is_none() {
                        return Err(Error::Unbound(name.clone()));
                    }
                }
                Op::Constant => {}
                _ => {
                    let value = self.compute(index, &op)?;
                    self.nodes[index].value = Some(value);
                }
            }
        }
        Ok(self.val(out).clone())
    }

    fn input_value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before consumers")
    }

    fn compute(&self, index: usize, op: &Op) -> Result<Tensor> {
        let shape_err = |reason: String| Error::Shape {
            node: index,
            op: op.name(),
            reason,
        };
        let out = match op {
            Op::Placeholder(_) | Op::Param(_) | Op::Constant => {
                unreachable!("leaves are not computed")
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.input_value(*a), self.input_value(*b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err(format!(
                        "cannot multiply {:?} by {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![0.0; m * n];
                kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
                Tensor::from_parts(vec![m, n], c)
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.input_value(*a), self.input_value(*b));
                let kind = Broadcast::resolve(a.shape(), b.shape()).ok_or_else(|| {
                    shape_err(format!(
                        "cannot broadcast {:?} onto {:?}",
                        b.shape(),
                        a.shape()
                    ))
                })?;
                let data = if matches!(op, Op::Add(..)) {
                    kernels::zip_broadcast(a, b, kind, |x, y| x + y)
                } else {
                    kernels::zip_broadcast(a, b, kind, |x, y| x * y)
                };
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::Scale(a, factor) => map(self.input_value(*a), |x| x * factor),
            Op::Concat(parts) => {
                let values: Vec<&Tensor> = parts.iter().map(|p| self.input_value(*p)).collect();
                let rows = values.first().map(|v| v.shape()[0]).unwrap_or(0);
                if values.is_empty()
                    || values
                        .iter()
                        .any(|v| v.shape().len() != 2 || v.shape()[0] != rows)
                {
                    let shapes: Vec<_> = values.iter().map(|v| v.shape().to_vec()).collect();
                    return Err(shape_err(format!("incompatible concat shapes {shapes:?}")));
                }
                let cols: usize = values.iter().map(|v| v.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &values {
                        data.extend_from_slice(v.row(r));
                    }
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
            Op::Relu(a) => map(self.input_value(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => map(self.input_value(*a), kernels::sigmoid),
            Op::Log(a) => map(self.input_value(*a), |x| x.max(LOG_FLOOR).ln()),
            Op::Softmax(a) => {
                let a = self.input_value(*a);
                Tensor::from_parts(
                    a.shape().to_vec(),
                    kernels::softmax_rows(a.data(), a.cols()),
                )
            }
            Op::ReduceMean(a) => {
                let a = self.input_value(*a);
                let mean = a.data().iter().sum::<f64>() / a.len() as f64;
                Tensor::scalar(mean)
            }
            Op::SmoothL1(a) => map(self.input_value(*a), kernels::smooth_l1),
            Op::Grl(a, _) => self.input_value(*a).clone().with_requires_grad(false),
            Op::Reshape(a, shape) => {
                let a = self.input_value(*a);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(shape_err(format!(
                        "cannot reshape {:?} to {:?}",
                        a.shape(),
                        shape
                    )));
                }
                a.reshaped(shape.clone())
            }
            Op::SelectRows(a, rows) => {
                let a = self.input_value(*a);
                if a.shape().len() != 2 {
                    return Err(shape_err(format!("expected a matrix, got {:?}", a.shape())));
                }
                let (n, c) = (a.shape()[0], a.shape()[1]);
                if rows.is_empty() {
                    return Err(shape_err("empty row selection".to_owned()));
                }
                if let Some(bad) = rows.iter().find(|&&r| r >= n) {
                    return Err(shape_err(format!("row {bad} out of range for {n} rows")));
                }
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    data.extend_from_slice(a.row(r));
                }
                Tensor::from_parts(vec![rows.len(), c], data)
            }
        };
        if self.debug && !out.is_finite() {
            return Err(Error::NonFinite {
                node: index,
                op: op.name(),
            });
        }
        Ok(out)
    }

    // ---- reverse mode ----

    /// Propagates `seed` from `out` back to every parameter and every input
    /// that requires a gradient. Gradients accumulate over fan-out.
    pub fn backward(&self, out: NodeId, seed: &Tensor) -> Result<Gradients> {
        for (index, node) in self.nodes[..=out.0].iter().enumerate() {
            if node.value.is_none() {
                return Err(Error::BackwardBeforeForward(index));
            }
        }
        let out_value = self.input_value(out);
        if seed.shape() != out_value.shape() {
            return Err(Error::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_value.shape().to_vec(),
            });
        }

        let needs_grad = self.needs_grad(out);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.data().to_vec());

        for index in (0..=out.0).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            let op = &self.nodes[index].op;
            match op {
                Op::Placeholder(_) | Op::Param(_) | Op::Constant => {
                    grads[index] = Some(g);
                    continue;
                }
                _ => {}
            }
            let mut send = |id: NodeId, contribution: Vec<f64>| {
                if !needs_grad[id.0] {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => kernels::axpy(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match op {
                Op::Placeholder(_) | Op::Param(_) | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.input_value(*a), self.input_value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs_grad[a.0] {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm(m, n, k, &g, false, bv.data(), true, &mut da, 0.0);
                        send(*a, da);
                    }
                    if needs_grad[b.0] {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm(k, m, n, av.data(), true, &g, false, &mut db, 0.0);
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    let (av, bv) = (self.input_value(*a), self.input_value(*b));
                    let kind =
                        Broadcast::resolve(av.shape(), bv.shape()).expect("checked in forward");
                    if needs_grad[b.0] {
                        send(
                            *b,
                            kernels::reduce_broadcast(&g, av.shape(), bv.len(), kind),
                        );
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.input_value(*a), self.input_value(*b));
                    let kind =
                        Broadcast::resolve(av.shape(), bv.shape()).expect("checked in forward");
                    if needs_grad[b.0] {
                        let prod: Vec<f64> = g.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                        send(
                            *b,
                            kernels::reduce_broadcast(&prod, av.shape(), bv.len(), kind),
                        );
                    }
                    if needs_grad[a.0] {
                        let ga = kernels::zip_broadcast_raw(&g, av.shape(), bv, kind, |g, y| g * y);
                        send(*a, ga);
                    }
                }
                Op::Scale(a, factor) => send(*a, g.iter().map(|v| v * factor).collect()),
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| self.input_value(*p).shape()[1])
                        .collect();
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (part, &w) in parts.iter().zip(&widths) {
                        if needs_grad[part.0] {
                            let mut piece = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                piece.extend_from_slice(
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                            send(*part, piece);
                        }
                        offset += w;
                    }
                }
                Op::Relu(a) => {
                    let x = self.input_value(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = self.input_value(NodeId(index)).data();
                    send(
                        *a,
                        g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    );
                }
                Op::Log(a) => {
                    let x = self.input_value(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Softmax(a) => {
                    let y = self.input_value(NodeId(index));
                    send(*a, kernels::softmax_backward(y.data(), &g, y.cols()));
                }
                Op::ReduceMean(a) => {
                    let n = self.input_value(*a).len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::SmoothL1(a) => {
                    let x = self.input_value(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| g * kernels::smooth_l1_grad(x))
                            .collect(),
                    );
                }
                Op::Grl(a, coeff) => send(*a, g.iter().map(|v| -coeff * v).collect()),
                Op::Reshape(a, _) => send(*a, g),
                Op::SelectRows(a, rows) => {
                    let av = self.input_value(*a);
                    let c = av.shape()[1];
                    let mut da = vec![0.0; av.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for (dst, src) in da[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                        {
                            *dst += src;
                        }
                    }
                    send(*a, da);
                }
            }
        }

        let mut named = BTreeMap::new();
        for (index, node) in self.nodes[..=out.0].iter().enumerate() {
            let name = match &node.op {
                Op::Param(name) => name,
                Op::Placeholder(name) if node.value.as_ref().is_some_and(|v| v.requires_grad()) => {
                    name
                }
                _ => continue,
            };
            let shape = self.input_value(NodeId(index)).shape().to_vec();
            let data = grads[index]
                .take()
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            named.insert(name.clone(), Tensor::from_parts(shape, data));
        }
        Ok(Gradients(named))
    }

    fn needs_grad(&self, out: NodeId) -> Vec<bool> {
        let mut needs = vec![false; out.0 + 1];
        for (index, node) in self.nodes[..=out.0].iter().enumerate() {
            needs[index] = match &node.op {
                Op::Param(_) => true,
                Op::Placeholder(_) => node.value.as_ref().is_some_and(|v| v.requires_grad()),
                Op::Constant => false,
                op => op.inputs().iter().any(|i| needs[i.0]),
            };
        }
        needs
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}
