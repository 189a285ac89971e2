//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! A [`Tape`] is built once per batch: leaves (parameters and inputs) are
//! declared by name, primitives are appended in topological order, and the
//! last recorded node (or the one passed to [`Tape::set_output`]) is the
//! output. [`Tape::forward`] evaluates the graph under a set of
//! [`Bindings`] and caches every intermediate; [`Tape::backward`] then
//! returns the gradient of the scalar output with respect to every leaf,
//! inputs included.
//!
//! ```
//! use lossguard_core::diff::{Bindings, Tape};
//! use lossguard_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input("x");
//! let y = tape.mul(x, x);
//! tape.sum(y);
//!
//! let xv = Tensor::vector(vec![3.0]);
//! let mut b = Bindings::new();
//! b.bind("x", &xv);
//! assert_eq!(tape.forward(&b).unwrap().item(), 9.0);
//! let g = tape.backward(1.0).unwrap();
//! assert_eq!(g.get("x").unwrap().data(), &[6.0]);
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::losses::indicator;
use crate::math;
use crate::{Error, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, kind: LeafKind },
    Constant(Tensor),
    /// `[n×k]·[k×m]`
    MatMul(NodeId, NodeId),
    /// `[n×m] + [m]` broadcast over rows.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Column-wise concatenation of matrices with equal row counts.
    Concat(Vec<NodeId>),
    /// Row-wise log-softmax of a matrix.
    LogSoftmax(NodeId),
    /// Picks `a[i, idx[i]]` from each row.
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    /// Reshape to a vector of all elements.
    Flatten(NodeId),
    /// Identity forward, no gradient backward.
    Detach(NodeId),
    /// Per-pair ranking hinge `max(0, -I(t_i, t_j)·(e_i - e_j) + margin)`;
    /// the targets operand gets no gradient.
    PairHinge {
        est: NodeId,
        target: NodeId,
        pairs: Vec<(usize, usize)>,
        margin: f64,
    },
    /// `x²` with a deliberately wrong backward rule (`3x`), for checking
    /// that [`grad_check`] notices.
    #[cfg(test)]
    BrokenSquare(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
            Op::Flatten(_) => "flatten",
            Op::Detach(_) => "detach",
            Op::PairHinge { .. } => "pair_hinge",
            #[cfg(test)]
            Op::BrokenSquare(_) => "broken_square",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSoftmax(a)
            | Op::Gather(a, _)
            | Op::Reshape(a, _)
            | Op::Flatten(a)
            | Op::Detach(a) => vec![*a],
            #[cfg(test)]
            Op::BrokenSquare(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
            Op::PairHinge { est, target, .. } => vec![*est, *target],
        }
    }
}

/// Leaf-name → tensor bindings for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    map: BTreeMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Bindings { map: BTreeMap::new() }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Gradients of the tape output keyed by leaf name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }
}

/// Recorded operation graph plus the intermediates of the last forward pass.
///
/// Not `Sync`-shared during a pass; move it between threads between passes.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    output: Option<NodeId>,
    values: Vec<Option<Tensor>>,
    forwarded: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for o in op.operands() {
            assert!(o.0 < self.ops.len(), "operand {o:?} not recorded on this tape");
        }
        self.ops.push(op);
        self.forwarded = false;
        NodeId(self.ops.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            kind: LeafKind::Param,
        })
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            kind: LeafKind::Input,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        self.push(Op::Gather(a, idx))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten(a))
    }

    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Detach(a))
    }

    pub fn pair_hinge(
        &mut self,
        est: NodeId,
        target: NodeId,
        pairs: Vec<(usize, usize)>,
        margin: f64,
    ) -> NodeId {
        self.push(Op::PairHinge {
            est,
            target,
            pairs,
            margin,
        })
    }

    /// Marks the output node. Defaults to the last recorded node.
    pub fn set_output(&mut self, node: NodeId) {
        assert!(node.0 < self.ops.len());
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
            .or_else(|| self.ops.len().checked_sub(1).map(NodeId))
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Declared leaves in recording order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, LeafKind)> {
        self.ops.iter().filter_map(|op| match op {
            Op::Leaf { name, kind } => Some((name.as_str(), *kind)),
            _ => None,
        })
    }

    /// Cached value of a node from the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        if !self.forwarded {
            return None;
        }
        self.values.get(node.0).and_then(|v| v.as_ref())
    }

    /// Evaluates every node and returns the output value.
    pub fn forward(&mut self, bindings: &Bindings<'_>) -> Result<Tensor> {
        self.forward_with(bindings, &BTreeMap::new())
    }

    /// Forward pass where the listed `Detach` nodes keep the given values
    /// instead of being recomputed. Used by the finite-difference check so
    /// that stop-gradient targets stay constant under perturbation.
    pub(crate) fn forward_with(
        &mut self,
        bindings: &Bindings<'_>,
        frozen: &BTreeMap<usize, Tensor>,
    ) -> Result<Tensor> {
        self.forwarded = false;
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.ops.len());
        for (id, op) in self.ops.iter().enumerate() {
            let v = match (op, frozen.get(&id)) {
                (Op::Detach(_), Some(f)) => f.clone(),
                _ => eval_op(id, op, &values, bindings)?,
            };
            values.push(Some(v));
        }
        let out = self.output().ok_or(Error::Empty("tape"))?;
        let result = values[out.0].clone().expect("value computed above");
        self.values = values;
        self.forwarded = true;
        Ok(result)
    }

    /// Gradient of the (scalar) output with respect to every leaf, scaled by
    /// `seed`.
    pub fn backward(&self, seed: f64) -> Result<Gradients> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output().ok_or(Error::Empty("tape"))?;
        let out_val = self.val(out);
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }

        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        grads[out.0] = Some(Tensor::filled(out_val.shape(), seed));

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = &self.ops[id];
            if let Op::Leaf { .. } = op {
                grads[id] = Some(g);
                continue;
            }
            for (operand, contrib) in self.vjp(id, op, &g, &needs) {
                accumulate(&mut grads[operand.0], contrib);
            }
        }

        let mut map = BTreeMap::new();
        for (id, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { name, .. } = op {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.val(NodeId(id)).shape()));
                map.insert(name.clone(), g);
            }
        }
        Ok(Gradients { map })
    }

    /// Smallest distance to a non-differentiable point among the ReLU inputs
    /// and hinge arguments of the last forward pass (`+inf` if none).
    pub fn kink_margin(&self) -> f64 {
        if !self.forwarded {
            return f64::INFINITY;
        }
        let mut m = f64::INFINITY;
        for op in &self.ops {
            match op {
                Op::Relu(a) => {
                    for &z in self.val(*a).data() {
                        m = m.min(z.abs());
                    }
                }
                Op::PairHinge {
                    est,
                    target,
                    pairs,
                    margin,
                } => {
                    let e = self.val(*est).data();
                    let t = self.val(*target).data();
                    for &(i, j) in pairs {
                        let s = indicator(t[i], t[j]);
                        m = m.min((-s * (e[i] - e[j]) + margin).abs());
                    }
                }
                _ => {}
            }
        }
        m
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("forward ran")
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.ops.len()];
        for (id, op) in self.ops.iter().enumerate() {
            needs[id] = match op {
                Op::Leaf { .. } => true,
                Op::Constant(_) | Op::Detach(_) => false,
                Op::PairHinge { est, .. } => needs[est.0],
                other => other.operands().iter().any(|o| needs[o.0]),
            };
        }
        needs
    }

    /// Vector-Jacobian products of one node's upstream gradient onto its
    /// operands (only those that need a gradient).
    fn vjp(&self, id: usize, op: &Op, g: &Tensor, needs: &[bool]) -> Vec<(NodeId, Tensor)> {
        let mut out = Vec::new();
        let need = |n: &NodeId| needs[n.0];
        match op {
            Op::Leaf { .. } | Op::Constant(_) | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(a) {
                    let d = matmul_nt(g.data(), bv.data(), n, m, k);
                    out.push((*a, tensor(vec![n, k], d)));
                }
                if need(b) {
                    let d = matmul_tn(av.data(), g.data(), n, k, m);
                    out.push((*b, tensor(vec![k, m], d)));
                }
            }
            Op::AddBias(a, b) => {
                if need(a) {
                    out.push((*a, g.clone()));
                }
                if need(b) {
                    let m = self.val(*b).len();
                    let mut d = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, tensor(self.val(*b).shape().to_vec(), d)));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    out.push((*a, g.clone()));
                }
                if need(b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((*a, g.clone()));
                }
                if need(b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if need(a) {
                    out.push((*a, zip_with(g, bv, |gv, y| gv * y)));
                }
                if need(b) {
                    out.push((*b, zip_with(g, av, |gv, x| gv * x)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * c))),
            Op::AddScalar(a, _) => out.push((*a, g.clone())),
            Op::Relu(a) => {
                let z = self.val(*a);
                out.push((*a, zip_with(g, z, |gv, zv| if zv > 0.0 { gv } else { 0.0 })));
            }
            Op::Square(a) => {
                let z = self.val(*a);
                out.push((*a, zip_with(g, z, |gv, zv| 2.0 * zv * gv)));
            }
            #[cfg(test)]
            Op::BrokenSquare(a) => {
                let z = self.val(*a);
                out.push((*a, zip_with(g, z, |gv, zv| 3.0 * zv * gv)));
            }
            Op::Sum(a) => {
                let s = g.item();
                out.push((*a, Tensor::filled(self.val(*a).shape(), s)));
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let s = g.item() / av.len() as f64;
                out.push((*a, Tensor::filled(av.shape(), s)));
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if need(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        out.push((*p, tensor(self.val(*p).shape().to_vec(), d)));
                    }
                    offset += w;
                }
            }
            Op::LogSoftmax(a) => {
                // d/dz_j = g_j - softmax_j · Σ g
                let y = self.val(NodeId(id));
                let k = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in g.data().chunks(k).zip(y.data().chunks(k)) {
                    let gs: f64 = grow.iter().sum();
                    for (gv, yv) in grow.iter().zip(yrow) {
                        d.push(gv - math::exp(*yv) * gs);
                    }
                }
                out.push((*a, tensor(y.shape().to_vec(), d)));
            }
            Op::Gather(a, idx) => {
                let av = self.val(*a);
                let k = av.cols();
                let mut d = vec![0.0; av.len()];
                for (r, (&c, gv)) in idx.iter().zip(g.data()).enumerate() {
                    d[r * k + c] += gv;
                }
                out.push((*a, tensor(av.shape().to_vec(), d)));
            }
            Op::Reshape(a, _) | Op::Flatten(a) => {
                let shape = self.val(*a).shape().to_vec();
                out.push((*a, tensor(shape, g.data().to_vec())));
            }
            Op::PairHinge {
                est,
                target,
                pairs,
                margin,
            } => {
                if need(est) {
                    let e = self.val(*est);
                    let t = self.val(*target).data();
                    let mut d = vec![0.0; e.len()];
                    for (&(i, j), gv) in pairs.iter().zip(g.data()) {
                        let s = indicator(t[i], t[j]);
                        let arg = -s * (e.data()[i] - e.data()[j]) + margin;
                        if arg > 0.0 {
                            d[i] += -s * gv;
                            d[j] += s * gv;
                        }
                    }
                    out.push((*est, tensor(e.shape().to_vec(), d)));
                }
            }
        }
        out
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("gradient shape follows operand shape")
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    tensor(a.shape().to_vec(), data)
}

/// `C[n×m] = A[n×k]·B[k×m]`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C[n×k] = G[n×m]·B[k×m]ᵀ`
fn matmul_nt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C[k×m] = A[n×k]ᵀ·G[n×m]`
fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

fn eval_op(
    id: usize,
    op: &Op,
    values: &[Option<Tensor>],
    bindings: &Bindings<'_>,
) -> Result<Tensor> {
    let get = |n: &NodeId| values[n.0].as_ref().expect("operands precede node");
    let ctx = || format!("node #{id} ({})", op.name());
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                ctx(),
                format!("operands {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    };
    let matrix = |t: &Tensor| -> Result<(usize, usize)> {
        if t.ndim() != 2 {
            return Err(Error::shape(ctx(), format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    };

    Ok(match op {
        Op::Leaf { name, .. } => bindings
            .get(name)
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?
            .clone(),
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (av, bv) = (get(a), get(b));
            let (n, k) = matrix(av)?;
            let (k2, m) = matrix(bv)?;
            if k != k2 {
                return Err(Error::shape(
                    ctx(),
                    format!("inner dimensions {:?} · {:?}", av.shape(), bv.shape()),
                ));
            }
            tensor(vec![n, m], matmul(av.data(), bv.data(), n, k, m))
        }
        Op::AddBias(a, b) => {
            let (av, bv) = (get(a), get(b));
            let (_, m) = matrix(av)?;
            if bv.len() != m || bv.ndim() != 1 {
                return Err(Error::shape(
                    ctx(),
                    format!("bias {:?} for matrix {:?}", bv.shape(), av.shape()),
                ));
            }
            let mut out = av.clone();
            for row in out.data_mut().chunks_mut(m) {
                for (x, bb) in row.iter_mut().zip(bv.data()) {
                    *x += bb;
                }
            }
            out
        }
        Op::Add(a, b) => {
            same_shape(get(a), get(b))?;
            zip_with(get(a), get(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(get(a), get(b))?;
            zip_with(get(a), get(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(get(a), get(b))?;
            zip_with(get(a), get(b), |x, y| x * y)
        }
        Op::Scale(a, c) => get(a).map(|v| v * c),
        Op::AddScalar(a, c) => get(a).map(|v| v + c),
        Op::Relu(a) => get(a).map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Square(a) => get(a).map(|v| v * v),
        #[cfg(test)]
        Op::BrokenSquare(a) => get(a).map(|v| v * v),
        Op::Sum(a) => Tensor::scalar(get(a).data().iter().sum()),
        Op::Mean(a) => {
            let av = get(a);
            Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64)
        }
        Op::Concat(parts) => {
            let mut rows = None;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = matrix(get(p))?;
                if *rows.get_or_insert(r) != r {
                    return Err(Error::shape(ctx(), "parts have different row counts"));
                }
                widths.push(c);
            }
            let rows = rows.unwrap_or(0);
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(get(p).row(r));
                }
            }
            tensor(vec![rows, total], data)
        }
        Op::LogSoftmax(a) => {
            let av = get(a);
            let (_, k) = matrix(av)?;
            let mut data = Vec::with_capacity(av.len());
            for row in av.data().chunks(k) {
                let lse = math::log_sum_exp(row);
                data.extend(row.iter().map(|v| v - lse));
            }
            tensor(av.shape().to_vec(), data)
        }
        Op::Gather(a, idx) => {
            let av = get(a);
            let (n, k) = matrix(av)?;
            if idx.len() != n {
                return Err(Error::shape(ctx(), format!("{} indices for {n} rows", idx.len())));
            }
            let mut data = Vec::with_capacity(n);
            for (r, &c) in idx.iter().enumerate() {
                if c >= k {
                    return Err(Error::LabelOutOfRange { label: c, classes: k });
                }
                data.push(av.data()[r * k + c]);
            }
            tensor(vec![n], data)
        }
        Op::Reshape(a, shape) => get(a)
            .clone()
            .reshape(shape.clone())
            .map_err(|_| Error::shape(ctx(), format!("cannot reshape {:?} to {shape:?}", get(a).shape())))?,
        Op::Flatten(a) => {
            let av = get(a);
            tensor(vec![av.len()], av.data().to_vec())
        }
        Op::Detach(a) => get(a).clone(),
        Op::PairHinge {
            est,
            target,
            pairs,
            margin,
        } => {
            let (e, t) = (get(est), get(target));
            same_shape(e, t)?;
            if e.ndim() != 1 {
                return Err(Error::shape(ctx(), "estimates must be a vector"));
            }
            if pairs.is_empty() {
                return Err(Error::Empty("pair set"));
            }
            let (ed, td) = (e.data(), t.data());
            let mut data = Vec::with_capacity(pairs.len());
            for &(i, j) in pairs {
                if i >= ed.len() || j >= ed.len() {
                    return Err(Error::shape(ctx(), format!("pair ({i}, {j}) out of range")));
                }
                let s = indicator(td[i], td[j]);
                let arg = -s * (ed[i] - ed[j]) + margin;
                data.push(if arg > 0.0 { arg } else { 0.0 });
            }
            tensor(vec![pairs.len()], data)
        }
    })
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Maximum relative error over every leaf coordinate.
    pub max_rel_error: f64,
    /// Per-leaf maximum relative error, in leaf order.
    pub per_leaf: Vec<(String, f64)>,
}

/// Compares [`Tape::backward`] with central finite differences over every
/// leaf coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// `Detach` nodes are held at their unperturbed values during the
/// perturbed evaluations, so the numeric derivative follows the same
/// stop-gradient semantics as the analytic one.
pub fn grad_check(tape: &mut Tape, bindings: &Bindings<'_>, epsilon: f64) -> Result<GradCheck> {
    assert!(epsilon > 0.0, "finite-difference step must be positive");
    tape.forward(bindings)?;
    let analytic = tape.backward(1.0)?;
    let frozen: BTreeMap<usize, Tensor> = tape
        .ops
        .iter()
        .enumerate()
        .filter(|(_, op)| matches!(op, Op::Detach(_)))
        .map(|(id, _)| (id, tape.val(NodeId(id)).clone()))
        .collect();

    let names: Vec<String> = tape.leaves().map(|(n, _)| n.to_string()).collect();
    let mut per_leaf = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for name in &names {
        let base = bindings
            .get(name)
            .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
        let grad = analytic.get(name).expect("every leaf has a gradient");
        let mut probe = base.clone();
        let mut leaf_worst = 0.0f64;
        for c in 0..base.len() {
            let orig = base.data()[c];
            probe.data_mut()[c] = orig + epsilon;
            let up = eval_with(tape, bindings, name, &probe, &frozen)?;
            probe.data_mut()[c] = orig - epsilon;
            let down = eval_with(tape, bindings, name, &probe, &frozen)?;
            probe.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.data()[c];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            leaf_worst = leaf_worst.max((a - numeric).abs() / denom);
        }
        worst = worst.max(leaf_worst);
        per_leaf.push((name.clone(), leaf_worst));
    }
    // leave the tape holding the unperturbed pass
    tape.forward(bindings)?;
    Ok(GradCheck {
        max_rel_error: worst,
        per_leaf,
    })
}

fn eval_with(
    tape: &mut Tape,
    bindings: &Bindings<'_>,
    name: &str,
    value: &Tensor,
    frozen: &BTreeMap<usize, Tensor>,
) -> Result<f64> {
    let mut b = bindings.clone();
    b.bind(name, value);
    Ok(tape.forward_with(&b, frozen)?.item())
}
