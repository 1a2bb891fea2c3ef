//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Creation
//! order is a topological order, so the backward pass walks the node list
//! from the loss down to index 0 and visits each node once. A tape may be
//! differentiated a single time; build a fresh tape for the next step.

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// A differentiable operation whose forward pass is computed by the caller.
///
/// Implementors keep whatever they need from the forward pass (eigenvectors,
/// index maps) in `self`.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Vector-Jacobian product: one gradient per input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize),
    Relu(usize),
    Sigmoid(usize),
    SumRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SquaredError(usize, usize),
    BceWithLogits(usize, Tensor),
    Reshape(usize),
    Custom(Vec<usize>, Rc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SumRows(_) => "sum_rows",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SquaredError(..) => "squared_error",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Reshape(_) => "reshape",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
    record: bool,
    consumed: Cell<bool>,
    relu_margin: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("record", &self.record)
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates values only; `backward` on it is rejected.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            record,
            consumed: Cell::new(false),
            relu_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can record a new computation.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.params.get_mut().clear();
        self.consumed.set(false);
        self.relu_margin.set(f64::INFINITY);
    }

    /// Smallest |pre-activation| seen by any ReLU on this tape.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin.get()
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf bound to the named parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store.get(name)?.clone();
        let var = self.push(value, Op::Leaf, self.record)?;
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Records the output of a caller-computed operation.
    pub fn custom(&self, inputs: &[Var<'_>], output: Tensor, op: Rc<dyn CustomOp>) -> Result<Var<'_>> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.record_op(output, Op::Custom(ids, op))
    }

    /// Runs reverse mode from `loss` and writes gradients into `store`.
    ///
    /// Parameters that never appeared on the tape get zero gradients.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        if !self.record {
            return Err(Error::contract("backward on a non-recording tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::contract(
                "backward already ran on this tape; reset it first",
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (input, gin) in vjp(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gin),
                    slot => *slot = Some(gin),
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        store.zero_grads();
        for (name, &id) in self.params.borrow().iter() {
            if let Some(Some(g)) = grads.get(id) {
                store.set_grad(name, g.clone())?;
            }
        }
        Ok(())
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn record_op(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !self.record {
            return self.push(value, Op::Leaf, false);
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::SquaredError(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::SoftmaxRows(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::SumRows(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::BceWithLogits(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::ConcatRows(ids) | Op::ConcatCols(ids) | Op::Custom(ids, _) => ids.clone(),
    }
}

fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    let grads = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2("matmul")?;
            let n = val(*b).shape()[1];
            let ga = gemm_nt(g.data(), val(*b).data(), m, n, k);
            let gb = gemm_tn(val(*a).data(), g.data(), m, k, n);
            vec![
                (*a, Tensor::new(vec![m, k], ga)?),
                (*b, Tensor::new(vec![k, n], gb)?),
            ]
        }
        Op::Transpose(a) => vec![(*a, g.transpose2()?)],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |x, y| x * y)?),
            (*b, g.zip_map(val(*a), |x, y| x * y)?),
        ],
        Op::AddRow(a, b) => {
            let n = g.shape()[1];
            let mut gb = vec![0.0; n];
            for i in 0..g.rows() {
                for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*b, Tensor::new(vec![1, n], gb)?)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::ConcatRows(ids) => {
            let cols = g.cols();
            let mut offset = 0;
            let mut res = Vec::with_capacity(ids.len());
            for &id in ids {
                let shape = val(id).shape().to_vec();
                let len = val(id).numel();
                let part = g.data()[offset * cols..offset * cols + len].to_vec();
                offset += shape[0];
                res.push((id, Tensor::new(shape, part)?));
            }
            res
        }
        Op::ConcatCols(ids) => {
            let rows = g.rows();
            let total = g.shape()[1];
            let mut offset = 0;
            let mut res = Vec::with_capacity(ids.len());
            for &id in ids {
                let c = val(id).shape()[1];
                let mut part = Vec::with_capacity(rows * c);
                for i in 0..rows {
                    part.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                }
                offset += c;
                res.push((id, Tensor::new(vec![rows, c], part)?));
            }
            res
        }
        Op::SoftmaxRows(a) => {
            let mut gx = g.clone();
            for i in 0..out.rows() {
                let y = out.row(i);
                let dot: f64 = y.iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                for (j, slot) in gx.row_mut(i).iter_mut().enumerate() {
                    *slot = y[j] * (*slot - dot);
                }
            }
            vec![(*a, gx)]
        }
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?)],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))?)],
        Op::SumRows(a) => {
            let (m, n) = val(*a).dims2("sum_rows")?;
            let mut gx = Vec::with_capacity(m * n);
            for _ in 0..m {
                gx.extend_from_slice(g.data());
            }
            vec![(*a, Tensor::new(vec![m, n], gx)?)]
        }
        Op::SumAll(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.item()))],
        Op::MeanAll(a) => {
            let n = val(*a).numel() as f64;
            vec![(*a, Tensor::filled(val(*a).shape(), g.item() / n))]
        }
        Op::SquaredError(a, b) => {
            let s = 2.0 * g.item();
            let ga = val(*a).zip_map(val(*b), |x, y| s * (x - y))?;
            let gb = ga.map(|v| -v);
            vec![(*a, ga), (*b, gb)]
        }
        Op::BceWithLogits(a, targets) => {
            let n = targets.numel() as f64;
            let s = g.item() / n;
            let gx = val(*a).zip_map(targets, |z, t| s * (sigmoid(z) - t))?;
            vec![(*a, gx)]
        }
        Op::Reshape(a) => vec![(*a, g.reshaped(val(*a).shape())?)],
        Op::Custom(ids, op) => {
            let inputs: Vec<&Tensor> = ids.iter().map(|&i| val(i)).collect();
            let gs = op.backward(&inputs, out, g)?;
            if gs.len() != ids.len() {
                return Err(Error::contract(format!(
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    gs.len(),
                    ids.len()
                )));
            }
            ids.iter().copied().zip(gs).collect()
        }
    };
    Ok(grads)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("vars belong to different tapes"))
        }
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().matmul(&rhs.value())?;
        self.tape.record_op(out, Op::MatMul(self.id, rhs.id))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let out = self.value().transpose2()?;
        self.tape.record_op(out, Op::Transpose(self.id))
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().zip_map(&rhs.value(), |a, b| a + b)?;
        self.tape.record_op(out, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().zip_map(&rhs.value(), |a, b| a - b)?;
        self.tape.record_op(out, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().zip_map(&rhs.value(), |a, b| a * b)?;
        self.tape.record_op(out, Op::Mul(self.id, rhs.id))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row)?;
        let out = {
            let a = self.value();
            let b = row.value();
            let (_, n) = a.dims2("add_row")?;
            if b.shape() != [1, n] {
                return Err(Error::contract(format!(
                    "add_row: row shape {:?} does not broadcast over {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let mut out = a.clone();
            for i in 0..out.rows() {
                for (x, y) in out.row_mut(i).iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            out
        };
        self.tape.record_op(out, Op::AddRow(self.id, row.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * c);
        self.tape.record_op(out, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if self.tape.record {
                let m = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                self.tape.relu_margin.set(self.tape.relu_margin.get().min(m));
            }
            x.map(|v| v.max(0.0))
        };
        self.tape.record_op(out, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        self.tape.record_op(out, Op::Sigmoid(self.id))
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            x.dims2("softmax_rows")?;
            let mut out = x.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            out
        };
        self.tape.record_op(out, Op::SoftmaxRows(self.id))
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (m, n) = x.dims2("sum_rows")?;
            let mut s = vec![0.0; n];
            for i in 0..m {
                for (acc, v) in s.iter_mut().zip(x.row(i)) {
                    *acc += v;
                }
            }
            Tensor::new(vec![1, n], s)?
        };
        self.tape.record_op(out, Op::SumRows(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record_op(out, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            Tensor::scalar(x.sum() / x.numel() as f64)
        };
        self.tape.record_op(out, Op::MeanAll(self.id))
    }

    /// `Σ (self − other)²` as a scalar.
    pub fn squared_error(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = {
            let d = self.value().zip_map(&other.value(), |a, b| (a - b) * (a - b))?;
            Tensor::scalar(d.sum())
        };
        self.tape.record_op(out, Op::SquaredError(self.id, other.id))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against constant targets.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var<'t>> {
        let out = {
            let z = self.value();
            let terms = z.zip_map(targets, |z, t| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())?;
            Tensor::scalar(terms.sum() / terms.numel() as f64)
        };
        self.tape
            .record_op(out, Op::BceWithLogits(self.id, targets.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshaped(shape)?;
        self.tape.record_op(out, Op::Reshape(self.id))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let tape = first.tape;
        let out = {
            let cols = first.value().dims2("concat_rows")?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                first.same_tape(p)?;
                let v = p.value();
                let (r, c) = v.dims2("concat_rows")?;
                if c != cols {
                    return Err(Error::contract("concat_rows: column counts differ"));
                }
                rows += r;
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        tape.record_op(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let tape = first.tape;
        let out = {
            let rows = first.value().dims2("concat_cols")?.0;
            let mut cols = 0;
            for p in parts {
                first.same_tape(p)?;
                let (r, c) = p.value().dims2("concat_cols")?;
                if r != rows {
                    return Err(Error::contract("concat_cols: row counts differ"));
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.value().row(i));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        tape.record_op(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }
}

/// Dense `a @ b` as a plain function, re-exported for oracles and examples.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::contract("matmul inner dims differ"));
    }
    Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))
}
