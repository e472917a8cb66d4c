//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! tape. Node ids are handed out in evaluation order, so walking ids in
//! reverse is a valid reverse topological order for [`Tape::backward`].
//!
//! A tape and its vars are confined to one thread (`Rc` inside); independent
//! tapes can run on separate threads.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Conv1dDims};
use super::{check_axis, check_matmul, check_perm, check_select, check_shape, ensure_finite, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias { x: usize, bias: usize, axis: usize },
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Select { x: usize, axis: usize, indices: Vec<usize> },
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Sum(usize),
    Conv1d { x: usize, w: usize },
    WeightedNll { logp: usize, labels: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        ensure_finite(&data, name)?;
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    /// Reverse pass from a single-element `loss`. Every differentiable leaf
    /// gets exactly one gradient buffer (zeros when unreachable from `loss`).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |p: usize| &nodes[p].value;
            let mut send = |p: usize, contrib: Vec<f64>| {
                if !nodes[p].requires_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
                Op::AddBias { x, bias, axis } => {
                    let (outer, len, inner) = kernels::axis_layout(out.shape(), *axis);
                    let mut gb = vec![0.0; len];
                    for o in 0..outer {
                        for (i, acc) in gb.iter_mut().enumerate() {
                            let start = (o * len + i) * inner;
                            *acc += g[start..start + inner].iter().sum::<f64>();
                        }
                    }
                    send(*bias, gb);
                    send(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let n = val(*b).shape()[1];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm_into(&mut ga, &g, m, n, false, val(*b).data(), k, n, true, false);
                        send(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm_into(&mut gb, val(*a).data(), m, k, true, &g, m, n, false, false);
                        send(*b, gb);
                    }
                }
                Op::Reshape(a) => send(*a, g),
                Op::Permute(a, perm) => {
                    let (_, ga) = kernels::permute(&g, out.shape(), &kernels::inverse_perm(perm));
                    send(*a, ga);
                }
                Op::Select { x, axis, indices } => {
                    send(*x, kernels::select_backward(&g, val(*x).shape(), *axis, indices));
                }
                Op::Sigmoid(a) => send(
                    *a,
                    g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                ),
                Op::Relu(a) => send(
                    *a,
                    g.iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ),
                Op::Softmax(a, axis) => {
                    let y = out.data();
                    let (outer, len, inner) = kernels::axis_layout(out.shape(), *axis);
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                ga[at(i)] = y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::LogSoftmax(a, axis) => {
                    let y = out.data();
                    let (outer, len, inner) = kernels::axis_layout(out.shape(), *axis);
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let total: f64 = (0..len).map(|i| g[at(i)]).sum();
                            for i in 0..len {
                                ga[at(i)] = g[at(i)] - y[at(i)].exp() * total;
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Conv1d { x, w } => {
                    let dims = conv_dims(val(*x).shape(), val(*w).shape());
                    let (gx, gw) = dims.backward(val(*x).data(), val(*w).data(), &g);
                    send(*x, gx);
                    send(*w, gw);
                }
                Op::WeightedNll { logp, labels, weights } => {
                    let classes = val(*logp).shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut ga = vec![0.0; val(*logp).len()];
                    for (n, &y) in labels.iter().enumerate() {
                        ga[n * classes + y] = -weights[y] * scale;
                    }
                    send(*logp, ga);
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    node.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![0.0; node.value.len()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::usage("var belongs to a different tape"))
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> Conv1dDims {
    Conv1dDims {
        batch: x[0],
        c_in: x[1],
        c_out: w[1],
        len: x[2],
        width: w[0],
    }
}

/// Gradients of differentiable leaves after one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// # Panics
    /// If `v` is not a differentiable leaf of the tape that produced these gradients.
    pub fn wrt(&self, v: Var<'_>) -> &Tensor {
        self.get(v).expect("no gradient recorded for var")
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn binary(self, other: Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::usage(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.record(name, a.shape().to_vec(), data, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.tape.record("scale", a.shape().to_vec(), data, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds a 1-D `bias` broadcast along `axis`.
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let (x, b) = (self.value(), bias.value());
        check_axis(axis, x.rank())?;
        if b.rank() != 1 || b.len() != x.shape()[axis] {
            return Err(Error::usage(format!(
                "add_bias: bias {:?} does not match axis {axis} of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let (outer, len, inner) = kernels::axis_layout(x.shape(), axis);
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for i in 0..len {
                let start = (o * len + i) * inner;
                data[start..start + inner].iter_mut().for_each(|v| *v += b.data()[i]);
            }
        }
        self.tape.record(
            "add_bias",
            x.shape().to_vec(),
            data,
            Op::AddBias { x: self.id, bias: bias.id, axis },
            &[self.id, bias.id],
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = check_matmul(a.shape(), b.shape())?;
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.tape.record("matmul", vec![m, n], data, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        check_shape(&shape)?;
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::usage(format!("cannot reshape {:?} into {shape:?}", a.shape())));
        }
        self.tape.record("reshape", shape, a.data().to_vec(), Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        check_perm(perm, a.rank())?;
        let (shape, data) = kernels::permute(a.data(), a.shape(), perm);
        self.tape.record("permute", shape, data, Op::Permute(self.id, perm.to_vec()), &[self.id])
    }

    /// 2-D transpose.
    pub fn t(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    pub fn select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        check_select(a.shape(), axis, indices)?;
        let (shape, data) = kernels::select(a.data(), a.shape(), axis, indices);
        let op = Op::Select { x: self.id, axis, indices: indices.to_vec() };
        self.tape.record("select", shape, data, op, &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| kernels::sigmoid(x)).collect();
        self.tape.record("sigmoid", a.shape().to_vec(), data, Op::Sigmoid(self.id), &[self.id])
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is taken as 0.
    pub fn relu(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        self.tape.record("relu", a.shape().to_vec(), data, Op::Relu(self.id), &[self.id])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis(axis, a.rank())?;
        let data = kernels::softmax_axis(a.data(), a.shape(), axis);
        self.tape.record("softmax", a.shape().to_vec(), data, Op::Softmax(self.id, axis), &[self.id])
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis(axis, a.rank())?;
        let data = kernels::log_softmax_axis(a.data(), a.shape(), axis);
        self.tape.record("log_softmax", a.shape().to_vec(), data, Op::LogSoftmax(self.id, axis), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape.record("sum", vec![1], vec![total], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Same-padded convolution along the last axis; see [`kernels::Conv1dDims`].
    /// `self` is `[batch, c_in, len]`, `kernel` is `[width, c_out, c_in]`.
    pub fn conv1d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(kernel)?;
        let (x, w) = (self.value(), kernel.value());
        if x.rank() != 3 || w.rank() != 3 || w.shape()[2] != x.shape()[1] {
            return Err(Error::usage(format!(
                "conv1d shape mismatch: input {:?}, kernel {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if w.shape()[0] % 2 == 0 {
            return Err(Error::usage(format!("conv1d kernel width {} must be odd", w.shape()[0])));
        }
        let dims = conv_dims(x.shape(), w.shape());
        let data = dims.forward(x.data(), w.data());
        let shape = vec![dims.batch, dims.c_out, dims.len];
        self.tape.record("conv1d", shape, data, Op::Conv1d { x: self.id, w: kernel.id }, &[self.id, kernel.id])
    }

    /// Mean over rows of `-weights[label] * self[row, label]`, where `self`
    /// holds per-row log-probabilities of shape `[rows, classes]`.
    pub fn weighted_nll(self, labels: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let logp = self.value();
        if logp.rank() != 2 || logp.shape()[0] != labels.len() {
            return Err(Error::usage(format!(
                "weighted_nll: {} labels for log-probs of shape {:?}",
                labels.len(),
                logp.shape()
            )));
        }
        let classes = logp.shape()[1];
        if weights.len() != classes {
            return Err(Error::usage(format!("{} class weights for {classes} classes", weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::usage(format!("label {bad} out of range for {classes} classes")));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &y)| -weights[y] * logp.data()[n * classes + y])
            .sum();
        let loss = total / labels.len() as f64;
        let op = Op::WeightedNll {
            logp: self.id,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        self.tape.record("weighted_nll", vec![1], vec![loss], op, &[self.id])
    }
}
