//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order; since an op can only
//! consume nodes that already exist, reverse creation order is a valid
//! topological order, which makes the backward pass deterministic.
//! Parameters are borrowed from a [`ParameterRegistry`] for the lifetime of
//! the graph, so nothing recorded can be mutated in place while it is live.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::registry::{ParamId, ParameterRegistry};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    SoftmaxLastDim,
    LayerNorm,
    Transpose,
    Reshape,
    Concat,
    Slice,
    EmbeddingLookup,
    Mean,
    Sum,
    BroadcastAdd,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::SoftmaxLastDim,
        OpKind::LayerNorm,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::EmbeddingLookup,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::BroadcastAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::SoftmaxLastDim => "softmax_lastdim",
            OpKind::LayerNorm => "layernorm",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::BroadcastAdd => "broadcast_add",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Op-specific scalar attributes for [`Graph::apply`]. Each op reads only
/// the fields it needs.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: usize,
    pub axes: (usize, usize),
    pub range: (usize, usize),
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
    pub scalar: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Mean(Var),
    Sum(Var),
    BroadcastAdd(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Softmax(..) => "softmax_lastdim",
            Op::LayerNorm { .. } => "layernorm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::BroadcastAdd(..) => "broadcast_add",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bound: BTreeMap<ParamId, Var>,
}

/// `c = a·b (+ beta·c)` for logical `a: m×k`, `b: k×n`, row-major `c`.
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides address
    // exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Swaps axes `d0 < d1` of a row-major array.
fn swap_axes(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> Vec<f64> {
    let outer: usize = shape[..d0].iter().product();
    let len0 = shape[d0];
    let mid: usize = shape[d0 + 1..d1].iter().product();
    let len1 = shape[d1];
    let inner: usize = shape[d1 + 1..].iter().product();
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for j in 0..len1 {
            for m in 0..mid {
                for i in 0..len0 {
                    let src = (((o * len0 + i) * mid + m) * len1 + j) * inner;
                    out.extend_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Cow::Owned(value), shape, op, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Cow<'a, [f64]>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf; it takes part in backward iff the tensor
    /// requires grad.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_node(Cow::Owned(t.into_data()), shape, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.input(t))
    }

    /// Binds a registry parameter. Binding the same id twice returns the
    /// same node.
    pub fn param(&mut self, reg: &'a ParameterRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = reg.tensor(id);
        let v = self.push_node(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Param,
            t.requires_grad(),
        );
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Gradients of every bound trainable parameter, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect()
    }

    /// First recorded node (in creation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Error> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .iter()
                .any(|x| !x.is_finite())
                .then(|| Error::NonFinite {
                    op: n.op.name(),
                    node: i,
                })
        })
    }

    // ----- ops -----

    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::BroadcastAdd => Some(2),
            OpKind::LayerNorm => Some(3),
            OpKind::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::shape(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Div => self.div(inputs[0], inputs[1]),
            OpKind::Scale => Ok(self.scale(inputs[0], attrs.scalar)),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Gelu => Ok(self.gelu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Softplus => Ok(self.softplus(inputs[0])),
            OpKind::SoftmaxLastDim => Ok(self.softmax(inputs[0])),
            OpKind::LayerNorm => self.layernorm(inputs[0], inputs[1], inputs[2]),
            OpKind::Transpose => self.transpose(inputs[0], attrs.axes.0, attrs.axes.1),
            OpKind::Reshape => self.reshape(inputs[0], &attrs.shape),
            OpKind::Concat => self.concat(inputs, attrs.axis),
            OpKind::Slice => self.slice(inputs[0], attrs.axis, attrs.range.0, attrs.range.1),
            OpKind::EmbeddingLookup => self.embedding(inputs[0], &attrs.indices),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::BroadcastAdd => self.broadcast_add(inputs[0], inputs[1]),
        }
    }

    /// `[.., m, k] × [k, n]` (weight shared across leading dims) or
    /// `[B.., m, k] × [B.., k, n]` (batched, identical leading dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be at least 2-d, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {sa:?} x {sb:?} ({k} != {kb})"),
            ));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && lead != &sb[..sb.len() - 2] {
            return Err(Error::shape(
                "matmul",
                format!("batch dims differ: {sa:?} x {sb:?}"),
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            if shared_rhs {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, 0.0);
            } else {
                for t in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[t * m * k..(t + 1) * m * k],
                        false,
                        &bv[t * k * n..(t + 1) * k * n],
                        false,
                        &mut out[t * m * n..(t + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().expect("tensors have rank >= 1");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
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
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Softmax(x, cols), &[x])
    }

    /// Normalizes the last dim, then applies the `gamma`/`beta` affine.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layernorm",
                    format!("{name} shape {:?}, expected [{d}]", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (d0, d1) = (d0.min(d1), d0.max(d1));
        if d1 >= shape.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({d0}, {d1}) out of range for {shape:?}"),
            ));
        }
        if d0 == d1 {
            return self.reshape(x, &shape);
        }
        let out = swap_axes(self.value(x), &shape, d0, d1);
        let mut oshape = shape;
        oshape.swap(d0, d1);
        Ok(self.push(out, oshape, Op::Transpose(x, d0, d1), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(out, shape, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        Ok(self.push(
            out,
            oshape,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            &[x],
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "embedding_lookup",
                format!("table must be 2-d, got {shape:?}"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::shape("embedding_lookup", "no indices"));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("index {bad} out of range for vocab {vocab}"),
            ));
        }
        let tv = self.value(table);
        let out: Vec<f64> = indices
            .iter()
            .flat_map(|&i| tv[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        Ok(self.push(
            out,
            vec![indices.len(), dim],
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], vec![1], Op::Mean(x), &[x])
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                "broadcast_add",
                format!("{sb:?} is not a suffix of {sa:?}"),
            ));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(out, shape, Op::BroadcastAdd(a, b), &[a, b]))
    }

    // ----- backward -----

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires
    /// grad. Repeated calls add to the stored gradients until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        fn send(
            nodes: &[Node<'_>],
            grads: &mut [Option<Vec<f64>>],
            v: Var,
            f: impl FnOnce(&mut [f64]),
        ) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
        }

        fn add_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| -> &[f64] { &nodes[v.0].value };
            match &node.op {
                Op::Leaf | Op::Param => match self.leaf_grads[i].as_mut() {
                    Some(acc) => add_into(acc, g.iter().copied()),
                    None => self.leaf_grads[i] = Some(g),
                },
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (av, bv) = (val(a), val(b));
                    if shared_rhs {
                        let rows = batch * m;
                        send(nodes, &mut grads, a, |da| {
                            gemm(rows, n, k, &g, false, bv, true, da, 1.0)
                        });
                        send(nodes, &mut grads, b, |db| {
                            gemm(k, rows, n, av, true, &g, false, db, 1.0)
                        });
                    } else {
                        send(nodes, &mut grads, a, |da| {
                            for t in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[t * m * n..(t + 1) * m * n],
                                    false,
                                    &bv[t * k * n..(t + 1) * k * n],
                                    true,
                                    &mut da[t * m * k..(t + 1) * m * k],
                                    1.0,
                                );
                            }
                        });
                        send(nodes, &mut grads, b, |db| {
                            for t in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &av[t * m * k..(t + 1) * m * k],
                                    true,
                                    &g[t * m * n..(t + 1) * m * n],
                                    false,
                                    &mut db[t * k * n..(t + 1) * k * n],
                                    1.0,
                                );
                            }
                        });
                    }
                }
                &Op::Add(a, b) => {
                    send(nodes, &mut grads, a, |d| add_into(d, g.iter().copied()));
                    send(nodes, &mut grads, b, |d| add_into(d, g.iter().copied()));
                }
                &Op::Sub(a, b) => {
                    send(nodes, &mut grads, a, |d| add_into(d, g.iter().copied()));
                    send(nodes, &mut grads, b, |d| add_into(d, g.iter().map(|x| -x)));
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    send(nodes, &mut grads, a, |d| {
                        add_into(d, g.iter().zip(bv).map(|(g, y)| g * y))
                    });
                    send(nodes, &mut grads, b, |d| {
                        add_into(d, g.iter().zip(av).map(|(g, x)| g * x))
                    });
                }
                &Op::Div(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    send(nodes, &mut grads, a, |d| {
                        add_into(d, g.iter().zip(bv).map(|(g, y)| g / y))
                    });
                    send(nodes, &mut grads, b, |d| {
                        add_into(
                            d,
                            g.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)),
                        )
                    });
                }
                &Op::Scale(x, s) => {
                    send(nodes, &mut grads, x, |d| {
                        add_into(d, g.iter().map(|g| g * s))
                    });
                }
                &Op::Relu(x) => {
                    let xv = val(x);
                    send(nodes, &mut grads, x, |d| {
                        add_into(
                            d,
                            g.iter()
                                .zip(xv)
                                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                        )
                    });
                }
                &Op::Gelu(x) => {
                    let xv = val(x);
                    send(nodes, &mut grads, x, |d| {
                        add_into(d, g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)))
                    });
                }
                &Op::Sigmoid(x) => {
                    let y = &node.value;
                    send(nodes, &mut grads, x, |d| {
                        add_into(d, g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)))
                    });
                }
                &Op::Softplus(x) => {
                    let xv = val(x);
                    send(nodes, &mut grads, x, |d| {
                        add_into(d, g.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)))
                    });
                }
                &Op::Softmax(x, cols) => {
                    let y = &node.value;
                    send(nodes, &mut grads, x, |d| {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *dv += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let dim = nodes[gamma.0].value.len();
                    let gv = val(*gamma);
                    send(nodes, &mut grads, *gamma, |d| {
                        for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            add_into(d, grow.iter().zip(hrow).map(|(a, b)| a * b));
                        }
                    });
                    send(nodes, &mut grads, *beta, |d| {
                        for grow in g.chunks(dim) {
                            add_into(d, grow.iter().copied());
                        }
                    });
                    send(nodes, &mut grads, *x, |d| {
                        let inv = 1.0 / dim as f64;
                        for (((drow, grow), hrow), r) in d
                            .chunks_mut(dim)
                            .zip(g.chunks(dim))
                            .zip(xhat.chunks(dim))
                            .zip(rstd)
                        {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for ((gv, gam), h) in grow.iter().zip(gv).zip(hrow) {
                                let dh = gv * gam;
                                mean_dh += dh;
                                mean_dh_h += dh * h;
                            }
                            mean_dh *= inv;
                            mean_dh_h *= inv;
                            for (((dv, gv), gam), h) in drow.iter_mut().zip(grow).zip(gv).zip(hrow)
                            {
                                *dv += r * (gv * gam - mean_dh - h * mean_dh_h);
                            }
                        }
                    });
                }
                &Op::Transpose(x, d0, d1) => {
                    let back = swap_axes(&g, &node.shape, d0, d1);
                    send(nodes, &mut grads, x, |d| add_into(d, back.into_iter()));
                }
                &Op::Reshape(x) => {
                    send(nodes, &mut grads, x, |d| add_into(d, g.iter().copied()));
                }
                Op::Concat(inputs, axis) => {
                    let axis = *axis;
                    let outer: usize = node.shape[..axis].iter().product();
                    let inner: usize = node.shape[axis + 1..].iter().product();
                    let row = node.shape[axis] * inner;
                    let mut offset = 0;
                    for &v in inputs {
                        let chunk = nodes[v.0].shape[axis] * inner;
                        send(nodes, &mut grads, v, |d| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                add_into(&mut d[o * chunk..(o + 1) * chunk], src.iter().copied());
                            }
                        });
                        offset += chunk;
                    }
                }
                &Op::Slice {
                    x,
                    axis,
                    start,
                    end,
                } => {
                    let xs = &nodes[x.0].shape;
                    let outer: usize = xs[..axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = xs[axis];
                    let chunk = (end - start) * inner;
                    send(nodes, &mut grads, x, |d| {
                        for o in 0..outer {
                            let base = o * len * inner + start * inner;
                            add_into(
                                &mut d[base..base + chunk],
                                g[o * chunk..(o + 1) * chunk].iter().copied(),
                            );
                        }
                    });
                }
                Op::Embedding { table, indices } => {
                    let dim = nodes[table.0].shape[1];
                    send(nodes, &mut grads, *table, |d| {
                        for (row, &i) in g.chunks(dim).zip(indices) {
                            add_into(&mut d[i * dim..(i + 1) * dim], row.iter().copied());
                        }
                    });
                }
                &Op::Mean(x) => {
                    let s = g[0] / nodes[x.0].value.len() as f64;
                    send(nodes, &mut grads, x, |d| d.iter_mut().for_each(|v| *v += s));
                }
                &Op::Sum(x) => {
                    let s = g[0];
                    send(nodes, &mut grads, x, |d| d.iter_mut().for_each(|v| *v += s));
                }
                &Op::BroadcastAdd(a, b) => {
                    send(nodes, &mut grads, a, |d| add_into(d, g.iter().copied()));
                    let bn = nodes[b.0].value.len();
                    send(nodes, &mut grads, b, |d| {
                        for row in g.chunks(bn) {
                            add_into(d, row.iter().copied());
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<'_>, shape: &[usize], data: &[f64], rg: bool) -> Var {
        g.input(
            Tensor::new(shape.to_vec(), data.to_vec())
                .unwrap()
                .with_grad(rg),
        )
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[-1.0, 0.0, 2.5], false);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = leaf(
            &mut g,
            &[3, 3],
            &[1., 0., 0., 0., 1., 0., 0., 0., 1.],
            false,
        );
        let xs = [1.5, -2.0, 0.25, 4.0, 7.0, -3.5];
        let x = leaf(&mut g, &[3, 2], &xs, false);
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), &xs);
        assert_eq!(g.shape(y), &[3, 2]);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[1.0, 1.0, 1.0], false);
        let y = g.softmax(x);
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_grad_uses_zero_at_kink() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[-1.0, 2.0, 0.0], true);
        let y = g.relu(x);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[2.0, 3.0], true);
        let b = leaf(&mut g, &[2], &[5.0, 7.0], true);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 7.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[2.0, 3.0], true);
        let b = leaf(&mut g, &[2], &[5.0, 7.0], false);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[10.0, 14.0]);
        assert!(g.grad(b).is_none());
        g.zero_grad();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[2.0, 3.0], true);
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &[0.0; 6], false);
        let b = leaf(&mut g, &[2, 3], &[0.0; 6], false);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("3 != 2"), "{err}");
        let c = leaf(&mut g, &[3], &[0.0; 3], false);
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
        assert!(matches!(
            "conv2d".parse::<OpKind>(),
            Err(Error::UnknownOp(_))
        ));
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn transpose_moves_axes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[0., 1., 2., 3., 4., 5.], false);
        let t = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t), &[0., 3., 1., 4., 2., 5.]);
        let y = leaf(&mut g, &[2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.], false);
        let t = g.transpose(y, 0, 2).unwrap();
        assert_eq!(g.value(t), &[0., 4., 2., 6., 1., 5., 3., 7.]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 1], &[1., 2.], false);
        let b = leaf(&mut g, &[2, 2], &[3., 4., 5., 6.], false);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1., 3., 4., 2., 5., 6.]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b).to_vec().as_slice());
    }

    #[test]
    fn non_finite_diagnostic_names_op() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1], &[1.0], false);
        let z = leaf(&mut g, &[1], &[0.0], false);
        let q = g.div(a, z).unwrap();
        let _ = g.scale(q, 2.0);
        match g.first_non_finite() {
            Some(Error::NonFinite { op, node }) => {
                assert_eq!(op, "div");
                assert_eq!(node, q.index());
            }
            other => panic!("{other:?}"),
        }
    }
}
