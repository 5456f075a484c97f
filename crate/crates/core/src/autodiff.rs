//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation is evaluated eagerly when it is recorded. A [`Tape`] keeps
//! the forward values of all nodes, so one tape can span an entire unrolled
//! inner optimization and still be swept backwards once at the end.
//!
//! Two reverse sweeps are offered:
//!
//! * [`Tape::gradient`] computes plain numeric adjoints.
//! * [`Tape::gradient_graph`] records the adjoint computation itself on the
//!   tape and returns the gradients as [`Var`]s. Inner gradient steps built
//!   from it remain differentiable, which is what lets the outer gradient
//!   flow back through `θ_{k+1} = θ_k − η ∇_θ φ(λ, θ_k)`.
//!
//! ```
//! use bilevel_core::autodiff::Tape;
//! use bilevel_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq).unwrap();
//! let g = tape.gradient(y, &[x]).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Operation kinds accepted by [`Tape::record`].
///
/// Elementwise binary kinds accept equal shapes, or one side with a single
/// element that is broadcast against the other.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Multiplication by a scalar constant.
    Scale(f64),
    /// Addition of a scalar constant.
    Shift(f64),
    MatMul,
    Transpose,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    /// Row-wise over a 2-D input.
    LogSoftmax,
    Sum,
    Mean,
    Reshape(Vec<usize>),
    /// Gather along axis 0 (mini-batch selection).
    IndexSelect(Vec<usize>),
    /// Add rows into a zero tensor with `rows` rows; adjoint of `IndexSelect`.
    ScatterAdd {
        indices: Vec<usize>,
        rows: usize,
    },
    /// Concatenate along axis 0.
    Concat,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape(_) => "reshape",
            OpKind::IndexSelect(_) => "index_select",
            OpKind::ScatterAdd { .. } => "scatter_add",
            OpKind::Concat => "concat",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
struct Node {
    /// `None` for leaves.
    op: Option<OpKind>,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of operations. Node inputs always precede the node.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input or constant. Whether it is differentiated is decided by
    /// the `wrt` list of a later sweep.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.checked(v).expect("var from a foreign tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op: Option<OpKind>, inputs: Vec<usize>, value: Tensor) -> Var {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        self.nodes.push(Node { op, inputs, value });
        Var { tape: self.id, id }
    }

    fn checked(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::contract(format!(
                "variable {} does not belong to this tape",
                v.id
            )));
        }
        Ok(v.id)
    }

    /// Record `op` applied to `inputs`, evaluating it immediately.
    pub fn record(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{} expects {n} inputs, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::contract(format!("{} expects inputs", op.name())));
        }
        let ids = inputs.iter().map(|&v| self.checked(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
            forward(&op, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        Ok(self.push(Some(op), ids, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(OpKind::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(OpKind::Shift(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Transpose, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSoftmax, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.record(OpKind::IndexSelect(indices.to_vec()), &[a])
    }

    pub fn scatter_add(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        self.record(
            OpKind::ScatterAdd {
                indices: indices.to_vec(),
                rows,
            },
            &[a],
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(OpKind::Concat, parts)
    }

    /// `a · scale + shift` on every element.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let s = self.scale(a, scale)?;
        self.shift(s, shift)
    }

    /// Validate a sweep request and return (root id, wrt ids, relevance mask
    /// over `lo..=root`), where `lo` is the smallest wrt id.
    fn sweep_plan(&self, root: Var, wrt: &[Var]) -> Result<(usize, Vec<usize>, usize, Vec<bool>)> {
        let root = self.checked(root)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::contract(format!(
                "gradient root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let wrt = wrt.iter().map(|&v| self.checked(v)).collect::<Result<Vec<_>>>()?;
        let lo = wrt.iter().copied().min().unwrap_or(root).min(root);
        let mut relevant = vec![false; root - lo + 1];
        for &w in &wrt {
            if w <= root {
                relevant[w - lo] = true;
            }
        }
        for i in lo..=root {
            if !relevant[i - lo] {
                relevant[i - lo] = self.nodes[i].inputs.iter().any(|&j| j >= lo && relevant[j - lo]);
            }
        }
        Ok((root, wrt, lo, relevant))
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`, by one
    /// reverse sweep. The tape is left untouched.
    pub fn gradient(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let (root, wrt, lo, relevant) = self.sweep_plan(root, wrt)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; root - lo + 1];
        adj[root - lo] = Some(Tensor::ones(self.nodes[root].value.shape()));
        for i in (lo..=root).rev() {
            if !relevant[i - lo] {
                continue;
            }
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = adj[i - lo].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&j| j >= lo && relevant[j - lo]).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let grads = vjp_numeric(op, &inputs, &node.value, &g, &needs)?;
            for (&j, gj) in node.inputs.iter().zip(grads) {
                if let Some(gj) = gj {
                    accumulate(&mut adj[j - lo], gj)?;
                }
            }
            // Leaves in `wrt` keep their adjoint; interior nodes are consumed.
            if wrt.contains(&i) {
                adj[i - lo] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                if w > root {
                    return Tensor::zeros(self.nodes[w].value.shape());
                }
                adj[w - lo]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[w].value.shape()))
            })
            .collect())
    }

    /// Like [`Tape::gradient`], but the adjoint computation is itself recorded
    /// on the tape so the returned gradients can be differentiated again.
    pub fn gradient_graph(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (root, wrt, lo, relevant) = self.sweep_plan(root, wrt)?;
        let mut adj: Vec<Option<Var>> = vec![None; root - lo + 1];
        let seed = self.leaf(Tensor::ones(self.nodes[root].value.shape()));
        adj[root - lo] = Some(seed);
        for i in (lo..=root).rev() {
            if !relevant[i - lo] || self.nodes[i].op.is_none() {
                continue;
            }
            let Some(g) = adj[i - lo] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|&j| j >= lo && relevant[j - lo]).collect();
            let grads = self.vjp_graph(i, g, &needs)?;
            for (&j, gj) in inputs.iter().zip(grads) {
                if let Some(gj) = gj {
                    adj[j - lo] = Some(match adj[j - lo] {
                        Some(prev) => self.add(prev, gj)?,
                        None => gj,
                    });
                }
            }
        }
        wrt.iter()
            .map(|&w| {
                let existing = (w <= root).then(|| adj[w - lo]).flatten();
                match existing {
                    Some(v) => Ok(v),
                    None => {
                        let z = Tensor::zeros(self.nodes[w].value.shape());
                        Ok(self.leaf(z))
                    }
                }
            })
            .collect()
    }

    fn var(&self, id: usize) -> Var {
        Var { tape: self.id, id }
    }

    /// Sum `g` down to `shape` when the forward op broadcast a single element.
    fn reduce_graph(&mut self, g: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(g) == shape {
            return Ok(g);
        }
        let s = self.sum(g)?;
        if shape.is_empty() {
            Ok(s)
        } else {
            self.reshape(s, shape)
        }
    }

    fn vjp_graph(&mut self, i: usize, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[i].op.clone().expect("interior node");
        let ins: Vec<Var> = self.nodes[i].inputs.iter().map(|&j| self.var(j)).collect();
        let in_shape = |tape: &Tape, k: usize| tape.nodes[ins[k].id].value.shape().to_vec();
        let y = self.var(i);
        let mut out: Vec<Option<Var>> = vec![None; ins.len()];
        match op {
            OpKind::Add | OpKind::Sub => {
                if needs[0] {
                    out[0] = Some(self.reduce_graph(g, &in_shape(self, 0))?);
                }
                if needs[1] {
                    let gb = if op == OpKind::Sub { self.scale(g, -1.0)? } else { g };
                    out[1] = Some(self.reduce_graph(gb, &in_shape(self, 1))?);
                }
            }
            OpKind::Mul => {
                if needs[0] {
                    let p = self.mul(g, ins[1])?;
                    out[0] = Some(self.reduce_graph(p, &in_shape(self, 0))?);
                }
                if needs[1] {
                    let p = self.mul(g, ins[0])?;
                    out[1] = Some(self.reduce_graph(p, &in_shape(self, 1))?);
                }
            }
            OpKind::Scale(c) => out[0] = Some(self.scale(g, c)?),
            OpKind::Shift(_) => out[0] = Some(g),
            OpKind::MatMul => {
                if needs[0] {
                    let bt = self.transpose(ins[1])?;
                    out[0] = Some(self.matmul(g, bt)?);
                }
                if needs[1] {
                    let at = self.transpose(ins[0])?;
                    out[1] = Some(self.matmul(at, g)?);
                }
            }
            OpKind::Transpose => out[0] = Some(self.transpose(g)?),
            OpKind::Relu => {
                let mask = self.nodes[ins[0].id].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.leaf(mask);
                out[0] = Some(self.mul(g, m)?);
            }
            OpKind::Tanh => {
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -1.0, 1.0)?;
                out[0] = Some(self.mul(g, d)?);
            }
            OpKind::Sigmoid => {
                let one_minus = self.affine(y, -1.0, 1.0)?;
                let d = self.mul(y, one_minus)?;
                out[0] = Some(self.mul(g, d)?);
            }
            OpKind::Exp => out[0] = Some(self.mul(g, y)?),
            OpKind::LogSoftmax => {
                let c = in_shape(self, 0)[1];
                let ones = self.leaf(Tensor::ones(&[c, c]));
                let row_sums = self.matmul(g, ones)?;
                let p = self.exp(y)?;
                let corr = self.mul(p, row_sums)?;
                out[0] = Some(self.sub(g, corr)?);
            }
            OpKind::Sum | OpKind::Mean => {
                let shape = in_shape(self, 0);
                let n = shape.iter().product::<usize>().max(1) as f64;
                let fill = if op == OpKind::Mean { 1.0 / n } else { 1.0 };
                let ones = self.leaf(Tensor::full(&shape, fill));
                out[0] = Some(self.mul(ones, g)?);
            }
            OpKind::Reshape(_) => {
                let shape = in_shape(self, 0);
                out[0] = Some(self.reshape(g, &shape)?);
            }
            OpKind::IndexSelect(idx) => {
                let rows = in_shape(self, 0)[0];
                out[0] = Some(self.scatter_add(g, &idx, rows)?);
            }
            OpKind::ScatterAdd { indices, .. } => {
                out[0] = Some(self.index_select(g, &indices)?);
            }
            OpKind::Concat => {
                let mut offset = 0;
                for (k, slot) in out.iter_mut().enumerate() {
                    let rows = in_shape(self, k)[0];
                    if needs[k] {
                        let range: Vec<usize> = (offset..offset + rows).collect();
                        *slot = Some(self.index_select(g, &range)?);
                    }
                    offset += rows;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.zip_broadcast(&g, "accumulate", |a, b| a + b)?,
        None => g,
    });
    Ok(())
}

fn forward(op: &OpKind, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        OpKind::Add => x[0].zip_broadcast(x[1], name, |a, b| a + b),
        OpKind::Sub => x[0].zip_broadcast(x[1], name, |a, b| a - b),
        OpKind::Mul => x[0].zip_broadcast(x[1], name, |a, b| a * b),
        OpKind::Scale(c) => Ok(x[0].map(|a| a * c)),
        OpKind::Shift(c) => Ok(x[0].map(|a| a + c)),
        OpKind::MatMul => x[0].matmul(x[1]),
        OpKind::Transpose => x[0].transpose(),
        OpKind::Relu => Ok(x[0].map(|a| a.max(0.0))),
        OpKind::Tanh => Ok(x[0].map(f64::tanh)),
        OpKind::Sigmoid => Ok(x[0].map(sigmoid)),
        OpKind::Exp => Ok(x[0].map(f64::exp)),
        OpKind::LogSoftmax => x[0].log_softmax_rows(),
        OpKind::Sum => Ok(Tensor::scalar(x[0].sum())),
        OpKind::Mean => {
            if x[0].is_empty() {
                return Err(Error::contract("mean of an empty tensor"));
            }
            Ok(Tensor::scalar(x[0].sum() / x[0].len() as f64))
        }
        OpKind::Reshape(shape) => x[0].reshape(shape),
        OpKind::IndexSelect(idx) => x[0].index_select(idx),
        OpKind::ScatterAdd { indices, rows } => x[0].scatter_add(indices, *rows),
        OpKind::Concat => Tensor::concat(x),
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn reduce_numeric(g: Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g)
    } else {
        Tensor::new(shape.to_vec(), vec![g.sum()])
    }
}

fn vjp_numeric(op: &OpKind, x: &[&Tensor], y: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let mut out: Vec<Option<Tensor>> = vec![None; x.len()];
    let mul = |a: &Tensor, b: &Tensor| a.zip_broadcast(b, "vjp", |p, q| p * q);
    match op {
        OpKind::Add | OpKind::Sub => {
            if needs[0] {
                out[0] = Some(reduce_numeric(g.clone(), x[0].shape())?);
            }
            if needs[1] {
                let gb = if *op == OpKind::Sub { g.map(|v| -v) } else { g.clone() };
                out[1] = Some(reduce_numeric(gb, x[1].shape())?);
            }
        }
        OpKind::Mul => {
            if needs[0] {
                out[0] = Some(reduce_numeric(mul(g, x[1])?, x[0].shape())?);
            }
            if needs[1] {
                out[1] = Some(reduce_numeric(mul(g, x[0])?, x[1].shape())?);
            }
        }
        OpKind::Scale(c) => out[0] = Some(g.map(|v| v * c)),
        OpKind::Shift(_) => out[0] = Some(g.clone()),
        OpKind::MatMul => {
            if needs[0] {
                out[0] = Some(g.matmul(&x[1].transpose()?)?);
            }
            if needs[1] {
                out[1] = Some(x[0].transpose()?.matmul(g)?);
            }
        }
        OpKind::Transpose => out[0] = Some(g.transpose()?),
        OpKind::Relu => out[0] = Some(x[0].zip_broadcast(g, "vjp", |a, gv| if a > 0.0 { gv } else { 0.0 })?),
        OpKind::Tanh => out[0] = Some(y.zip_broadcast(g, "vjp", |t, gv| gv * (1.0 - t * t))?),
        OpKind::Sigmoid => out[0] = Some(y.zip_broadcast(g, "vjp", |s, gv| gv * (s * (1.0 - s)))?),
        OpKind::Exp => out[0] = Some(mul(g, y)?),
        OpKind::LogSoftmax => {
            let c = y.shape()[1].max(1);
            let mut data = g.data().to_vec();
            for (grow, yrow) in data.chunks_mut(c).zip(y.data().chunks(c)) {
                // Same accumulation order as the matmul-by-ones used in the graph sweep.
                let mut s = 0.0;
                for &v in grow.iter() {
                    if v != 0.0 {
                        s += v;
                    }
                }
                for (gv, &lp) in grow.iter_mut().zip(yrow) {
                    *gv -= lp.exp() * s;
                }
            }
            out[0] = Some(Tensor::new(y.shape().to_vec(), data)?);
        }
        OpKind::Sum => out[0] = Some(Tensor::full(x[0].shape(), g.data()[0])),
        OpKind::Mean => {
            let inv = 1.0 / x[0].len() as f64;
            out[0] = Some(Tensor::full(x[0].shape(), inv * g.data()[0]));
        }
        OpKind::Reshape(_) => out[0] = Some(g.reshape(x[0].shape())?),
        OpKind::IndexSelect(idx) => out[0] = Some(g.scatter_add(idx, x[0].rows())?),
        OpKind::ScatterAdd { indices, .. } => out[0] = Some(g.index_select(indices)?),
        OpKind::Concat => {
            let mut offset = 0;
            for (k, slot) in out.iter_mut().enumerate() {
                let rows = x[k].rows();
                if needs[k] {
                    let range: Vec<usize> = (offset..offset + rows).collect();
                    *slot = Some(g.index_select(&range)?);
                }
                offset += rows;
            }
        }
    }
    Ok(out)
}
