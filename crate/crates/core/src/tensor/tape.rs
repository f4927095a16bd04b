use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::gemm_acc;
use super::{numel, Result, Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Softmax { x: usize, axis: usize },
    MaskedFill { x: usize, keep: Rc<[bool]> },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive operations.
///
/// Single-threaded by construction (interior mutability through `RefCell`).
/// Independent tapes share nothing and can live on separate threads.
#[derive(Debug, Default)]
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
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// `shape` split as `outer × extent × inner` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[usize]) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, t: &Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, t.requires_grad())
    }

    /// Records a gradient-tracking leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, true)
    }

    /// Records a constant leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t, false)
    }

    /// Constant built from a shape and raw data.
    pub fn constant_from(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        Ok(self.constant(&Tensor::new(shape, data)?))
    }

    /// Accumulated gradient of `v`, if backward has reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.nodes
            .borrow_mut()
            .iter_mut()
            .for_each(|n| n.grad = None);
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into existing buffers: calling this twice without
    /// [`Tape::zero_grad`] doubles every gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if numel(&nodes[loss.id].shape) != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss.id].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                let r = gb.len();
                for (i, d) in g.iter().enumerate() {
                    gb[i % r] += sign * d;
                }
            }
        }
        &Op::Mul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let r = bv.len();
            if let Some(ga) = acc(grads, nodes, a) {
                for (i, d) in g.iter().enumerate() {
                    ga[i] += d * bv[i % r];
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (i, d) in g.iter().enumerate() {
                    gb[i % r] += d * av[i];
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
            }
        }
        &Op::MatMul(a, b) => {
            let k = nodes[b].shape[0];
            let n = nodes[b].shape[1];
            let m = nodes[a].value.len() / k;
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = acc(grads, nodes, a) {
                gemm_acc(g, bv, ga, m, n, k, false, true);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                gemm_acc(av, g, gb, k, m, n, true, false);
            }
        }
        &Op::BatchMatMul { a, b, trans_b } => {
            let sa = &nodes[a].shape;
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let n = if trans_b {
                nodes[b].shape[r - 2]
            } else {
                nodes[b].shape[r - 1]
            };
            let batch = nodes[a].value.len() / (m * k);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if let Some(ga) = acc(grads, nodes, a) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let out = &mut ga[i * m * k..(i + 1) * m * k];
                    // trans_b: C = A·Bᵀ, B is n×k, dA = G·B; else dA = G·Bᵀ.
                    gemm_acc(gi, bi, out, m, n, k, false, !trans_b);
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm_acc(gi, ai, out, n, m, k, true, false);
                    } else {
                        gemm_acc(ai, gi, out, k, m, n, true, false);
                    }
                }
            }
        }
        &Op::Transpose(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                let s = &node.shape;
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let batch = g.len() / (rows * cols);
                for bi in 0..batch {
                    let base = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[base + j * rows + i] += g[base + i * cols + j];
                        }
                    }
                }
            }
        }
        &Op::Tanh(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        &Op::Sigmoid(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        &Op::Relu(a) => {
            let x = &nodes[a].value;
            if let Some(ga) = acc(grads, nodes, a) {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        &Op::Softplus(a) => {
            let x = &nodes[a].value;
            if let Some(ga) = acc(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(x[i]);
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(&node.shape, axis);
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedFill { x, keep } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    if keep[i] {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = *node.shape.last().unwrap();
            let rows = g.len() / d;
            let gam = &nodes[*gamma].value;
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let df = d as f64;
                for r in 0..rows {
                    let row = r * d..(r + 1) * d;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = g[row.start + j] * gam[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[row.start + j];
                    }
                    for j in 0..d {
                        let dxh = g[row.start + j] * gam[j];
                        gx[row.start + j] += inv_std[r] / df
                            * (df * dxh - sum_dxhat - xhat[row.start + j] * sum_dxhat_xhat);
                    }
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Permute { x, axes } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(g, &node.shape, &inverse);
                gx.iter_mut().zip(&back).for_each(|(x, d)| *x += d);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                if let Some(gp) = acc(grads, nodes, p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gp[dst + i] += g[src + i];
                        }
                    }
                }
                offset += len;
            }
        }
        &Op::Slice { x, axis, start } => {
            let (outer, len, inner) = split_axis(&node.shape, axis);
            let total = nodes[x].shape[axis];
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    /// Copy of the forward value.
    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    /// Single value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    fn unary(self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        self.tape.push(shape, value, op(self.id), &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        allow_broadcast: bool,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let ok = if allow_broadcast {
                broadcast_ok(&a.shape, &b.shape)
            } else {
                a.shape == b.shape
            };
            if !ok {
                return Err(TensorError::Shape {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let r = b.value.len();
            let value = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.value[i % r]))
                .collect();
            (a.shape.clone(), value)
        };
        Ok(self.tape.push(shape, value, op, &[self.id, other.id]))
    }

    /// Elementwise sum; `other` may be a trailing-suffix broadcast (e.g. a bias).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", true, |a, b| a + b, Op::Add(self.id, other.id))
    }

    /// Elementwise difference of equal shapes.
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", false, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product; `other` may be a trailing-suffix broadcast.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", true, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|v| v * c).collect())
        };
        self.tape.push(shape, value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    /// `[..., m, k] × [k, n] → [..., m, n]` with `other` shared across the
    /// leading dimensions.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let mismatch = || TensorError::Shape {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            if b.shape.len() != 2 || a.shape.len() < 2 {
                return Err(mismatch());
            }
            let (k, n) = (b.shape[0], b.shape[1]);
            if *a.shape.last().unwrap() != k {
                return Err(mismatch());
            }
            let m = a.value.len() / k;
            let mut out = vec![0.0; m * n];
            gemm_acc(&a.value, &b.value, &mut out, m, k, n, false, false);
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = n;
            (shape, out)
        };
        Ok(self
            .tape
            .push(shape, value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn batch_matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let r = a.shape.len();
            let mismatch = || TensorError::Shape {
                op: "batch_matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            if r < 3 || b.shape.len() != r || a.shape[..r - 2] != b.shape[..r - 2] {
                return Err(mismatch());
            }
            let (m, k) = (a.shape[r - 2], a.shape[r - 1]);
            let (bk, n) = if trans_b {
                (b.shape[r - 1], b.shape[r - 2])
            } else {
                (b.shape[r - 2], b.shape[r - 1])
            };
            if bk != k {
                return Err(mismatch());
            }
            let batch = a.value.len() / (m * k);
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm_acc(
                    &a.value[i * m * k..(i + 1) * m * k],
                    &b.value[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
            let mut shape = a.shape.clone();
            shape[r - 1] = n;
            (shape, out)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    /// `[..., m, k] × [..., k, n]` with identical leading dimensions.
    pub fn batch_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.batch_matmul_impl(other, false)
    }

    /// `[..., m, k] × [..., n, k]ᵀ`.
    pub fn batch_matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.batch_matmul_impl(other, true)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let r = n.shape.len();
            if r < 2 {
                return Err(TensorError::Axis {
                    axis: 1,
                    shape: n.shape.clone(),
                });
            }
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 2, r - 1);
            let (v, s) = permute_data(&n.value, &n.shape, &axes);
            (s, v)
        };
        Ok(self.tape.push(shape, value, Op::Transpose(self.id), &[self.id]))
    }

    /// Max-subtracted softmax along `axis`. A slice that is entirely `-inf`
    /// produces zeros.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(TensorError::Axis {
                    axis,
                    shape: n.shape.clone(),
                });
            }
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let x = &n.value;
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut total = 0.0;
                    for k in 0..len {
                        let e = (x[at(k)] - max).exp();
                        out[at(k)] = e;
                        total += e;
                    }
                    for k in 0..len {
                        out[at(k)] /= total;
                    }
                }
            }
            (n.shape.clone(), out)
        };
        Ok(self
            .tape
            .push(shape, value, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    /// Replaces entries where `keep` is false with `-inf`.
    pub fn masked_fill(self, keep: Rc<[bool]>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if keep.len() != n.value.len() {
                return Err(TensorError::DataLength {
                    shape: n.shape.clone(),
                    expected: n.value.len(),
                    got: keep.len(),
                });
            }
            let value = n
                .value
                .iter()
                .zip(keep.iter())
                .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
                .collect();
            (n.shape.clone(), value)
        };
        Ok(self
            .tape
            .push(shape, value, Op::MaskedFill { x: self.id, keep }, &[self.id]))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta` (both `[d]`).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let d = *n.shape.last().unwrap();
            for p in [gamma, beta] {
                if nodes[p.id].shape != [d] {
                    return Err(TensorError::Shape {
                        op: "layer_norm",
                        lhs: n.shape.clone(),
                        rhs: nodes[p.id].shape.clone(),
                    });
                }
            }
            let gam = &nodes[gamma.id].value;
            let bet = &nodes[beta.id].value;
            let rows = n.value.len() / d;
            let mut xhat = vec![0.0; n.value.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; n.value.len()];
            for r in 0..rows {
                let row = &n.value[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gam[j] + bet[j];
                }
            }
            (n.shape.clone(), out, xhat, inv_std)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if numel(&shape) != n.value.len() || shape.contains(&0) {
                return Err(TensorError::Shape {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape,
                });
            }
            n.value.clone()
        };
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut seen = vec![false; n.shape.len()];
            let valid = axes.len() == n.shape.len()
                && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(TensorError::Shape {
                    op: "permute",
                    lhs: n.shape.clone(),
                    rhs: axes.to_vec(),
                });
            }
            let (v, s) = permute_data(&n.value, &n.shape, axes);
            (s, v)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(TensorError::Axis {
                    axis,
                    shape: n.shape.clone(),
                });
            }
            if len == 0 || start + len > n.shape[axis] {
                return Err(TensorError::SliceRange {
                    axis,
                    start,
                    end: start + len,
                    extent: n.shape[axis],
                });
            }
            let (outer, total, inner) = split_axis(&n.shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                out.extend_from_slice(&n.value[base..base + len * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, out)
        };
        Ok(self
            .tape
            .push(shape, value, Op::Slice { x: self.id, axis, start }, &[self.id]))
    }

    /// Sum of all entries, as shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let total = self.tape.nodes.borrow()[self.id].value.iter().sum();
        self.tape.push(vec![1], vec![total], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }
}

/// Joins `parts` along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().expect("concat of zero tensors");
    let tape = first.tape;
    let (shape, value) = {
        let nodes = tape.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(TensorError::Axis {
                axis,
                shape: base.clone(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &nodes[p.id];
                let len = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        (shape, out)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(shape, value, Op::Concat { parts: ids.clone(), axis }, &ids))
}

impl Tape {
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        concat(parts, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn seq(shape: &[usize], seed: f64) -> Tensor {
        let n = numel(shape);
        t(shape, &(0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().data(), vec![1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().data(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
        for v in x.softmax(0).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(&t(&[2], &[2f64.ln(), 0.0]));
        let y = x.softmax(0).unwrap().data();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15 && (y[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_on_inner_axis_sums_to_one() {
        let tape = Tape::new();
        let x = tape.constant(&seq(&[2, 3, 4], 1.3));
        let y = x.softmax(1).unwrap().data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y[(o * 3 + k) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let keep: Rc<[bool]> = vec![false, false, true, false].into();
        let y = x.masked_fill(keep).unwrap().softmax(1).unwrap().data();
        assert_eq!(y, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn fixed_points_of_activations() {
        let tape = Tape::new();
        let z = tape.constant(&t(&[1], &[0.0]));
        assert_eq!(z.tanh().item(), 0.0);
        assert_eq!(z.sigmoid().item(), 0.5);
        assert!((z.softplus().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(vec![2, 4], 3.5));
        let g = tape.constant(&Tensor::full(vec![4], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![4]));
        assert!(x.layer_norm(g, b).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(&seq(&[3, 8], 0.7));
        let g = tape.constant(&Tensor::full(vec![8], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![8]));
        let y = x.layer_norm(g, b).unwrap().data();
        for row in y.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            // ε shrinks the variance slightly below one.
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let w = tape.param(&t(&[3], &[0.3, -1.0, 7.0]));
        tape.backward(w.sum()).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_and_accumulation() {
        let tape = Tape::new();
        let w = tape.param(&t(&[2], &[1.0, 2.0]));
        let loss = w.mul(w).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.param(&t(&[2], &[1.0, 2.0]));
        assert_eq!(
            tape.backward(w).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(&t(&[2], &[1.0, 2.0]));
        let w = tape.param(&t(&[2], &[3.0, 4.0]));
        tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(&seq(&[2, 3, 4], 0.3));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        assert_eq!(y.value().get(&[3, 1, 2]), x.value().get(&[1, 2, 3]));
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(&seq(&[2, 3, 2], 0.5));
        let b = tape.constant(&seq(&[2, 1, 2], 0.9));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4, 2]);
        assert_eq!(c.slice(1, 0, 3).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 3, 1).unwrap().data(), b.data());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        type Build = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            ("add_bias", vec![seq(&[2, 3], 0.4), seq(&[3], 0.8)], Box::new(|_, v| v[0].add(v[1]))),
            ("sub", vec![seq(&[2, 3], 0.4), seq(&[2, 3], 0.8)], Box::new(|_, v| v[0].sub(v[1]))),
            ("mul", vec![seq(&[2, 3], 0.4), seq(&[3], 0.8)], Box::new(|_, v| v[0].mul(v[1]))),
            ("scale", vec![seq(&[4], 0.4)], Box::new(|_, v| Ok(v[0].scale(-2.5)))),
            ("matmul", vec![seq(&[2, 3, 4], 0.4), seq(&[4, 5], 0.8)], Box::new(|_, v| v[0].matmul(v[1]))),
            ("bmm", vec![seq(&[2, 3, 4], 0.4), seq(&[2, 4, 5], 0.8)], Box::new(|_, v| v[0].batch_matmul(v[1]))),
            ("bmm_t", vec![seq(&[2, 3, 4], 0.4), seq(&[2, 5, 4], 0.8)], Box::new(|_, v| v[0].batch_matmul_t(v[1]))),
            ("transpose", vec![seq(&[2, 3, 4], 0.4)], Box::new(|_, v| v[0].transpose())),
            ("tanh", vec![seq(&[5], 0.9)], Box::new(|_, v| Ok(v[0].tanh()))),
            ("sigmoid", vec![seq(&[5], 0.9)], Box::new(|_, v| Ok(v[0].sigmoid()))),
            ("relu", vec![seq(&[5], 0.9)], Box::new(|_, v| Ok(v[0].relu()))),
            ("softplus", vec![seq(&[5], 0.9)], Box::new(|_, v| Ok(v[0].softplus()))),
            ("softmax_mid", vec![seq(&[2, 3, 4], 0.9)], Box::new(|_, v| v[0].softmax(1))),
            ("softmax_last", vec![seq(&[3, 4], 0.9)], Box::new(|_, v| v[0].softmax(1))),
            (
                "masked_softmax",
                vec![seq(&[2, 3], 0.9)],
                Box::new(|_, v| {
                    let keep: Rc<[bool]> = vec![true, false, true, true, true, false].into();
                    v[0].masked_fill(keep)?.softmax(1)
                }),
            ),
            (
                "layer_norm",
                vec![seq(&[3, 5], 0.9), seq(&[5], 0.3), seq(&[5], 0.7)],
                Box::new(|_, v| v[0].layer_norm(v[1], v[2])),
            ),
            ("reshape", vec![seq(&[2, 6], 0.9)], Box::new(|_, v| v[0].reshape(vec![3, 4]))),
            ("permute", vec![seq(&[2, 3, 4], 0.9)], Box::new(|_, v| v[0].permute(&[1, 2, 0]))),
            ("slice", vec![seq(&[2, 5, 3], 0.9)], Box::new(|_, v| v[0].slice(1, 1, 3))),
            (
                "concat",
                vec![seq(&[2, 2, 3], 0.9), seq(&[2, 1, 3], 0.2)],
                Box::new(|_, v| concat(&[v[0], v[1]], 1)),
            ),
            ("mean", vec![seq(&[2, 3], 0.9)], Box::new(|_, v| Ok(v[0].mean()))),
        ];
        for (name, inputs, build) in cases {
            // Weighted sum so that every output position has a distinct upstream gradient.
            let report = check_gradients(&inputs, 1e-5, |tape, vars| {
                let out = build(tape, vars)?;
                let n = numel(&out.shape());
                let w = tape.constant_from(out.shape(), (0..n).map(|i| (i as f64 * 0.77).cos()).collect())?;
                Ok(out.mul(w)?.sum())
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
        }
    }
}
