//! Dense float64 tensors and a step-scoped reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node sweeps the tape once in reverse order
//! and returns the adjoint of every node that requires a gradient.
//!
//! ```
//! use avidonet::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Broadcasting is limited to the case where one operand's shape is a suffix
//! of the other's (scalar-to-anything, bias vector over a batch of rows).

use std::fmt;

use crate::{Error, Result};

/// Row-major dense array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Square(usize),
    Affine { a: usize, scale: f64 },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    SumAll(usize),
    Slice { a: usize, start: usize, end: usize },
    Reshape(usize),
    RepeatRows { a: usize, reps: usize },
    Stack(Vec<usize>),
    GaussianLogPdf { x: usize, mu: usize, sigma: usize },
    LogSumExp { a: usize, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Inputs always precede the nodes that use
/// them, so the node order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gaussian_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
}

/// Stable `ln Σ exp(v_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `C (+)= A·B` or `A·Bᵀ` for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // A is stored either m×k (row-major) or k×m (transposed), same for B.
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
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

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Elementwise `f` over suffix-broadcast operands; the shorter one repeats.
fn zip_broadcast(da: &[f64], db: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = da.len().max(db.len());
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if da.len() == n {
        for chunk in da.chunks_exact(db.len()) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in db.chunks_exact(da.len()) {
            out.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// `tanh` through a single `exp`, with a series near zero where the
/// quotient would cancel.
pub fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 0.1 {
        let x2 = x * x;
        const C: [f64; 7] = [
            1.0,
            -1.0 / 3.0,
            2.0 / 15.0,
            -17.0 / 315.0,
            62.0 / 2835.0,
            -1382.0 / 155_925.0,
            21_844.0 / 6_081_075.0,
        ];
        let poly = C.iter().rev().fold(0.0, |acc, c| acc * x2 + c);
        return x * poly;
    }
    if ax > 20.0 {
        return 1.0f64.copysign(x);
    }
    let e = (-2.0 * ax).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sum a full-size gradient down to a suffix-broadcast operand of `n` elements.
fn reduce_broadcast(grad: &[f64], n: usize) -> Vec<f64> {
    if grad.len() == n {
        return grad.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in grad.chunks_exact(n) {
        add_into(&mut out, chunk);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn data(&self, id: usize) -> &[f64] {
        &self.nodes[id].value.data
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = &self.nodes[a.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| f(x)).collect() };
        let rg = self.rg(&[a.0]);
        self.push(out, op, rg)
    }

    /// Output shape for a suffix-broadcast binary op.
    fn broadcast_shape(&self, name: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok(sa.to_vec())
        } else if is_suffix(sa, sb) {
            Ok(sb.to_vec())
        } else {
            Err(Error::Shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.data(a.0), self.data(b.0));
        let n: usize = shape.iter().product();
        debug_assert_eq!(n, da.len().max(db.len()));
        let data = zip_broadcast(da, db, f);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// `a·b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = if transpose_b { "matmul_bt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("{name}: expected matrices, got {sa:?} and {sb:?}")));
        }
        let (n, k) = (sa[0], sa[1]);
        let (kb, m) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape(format!("{name}: inner dimensions differ, {sa:?} and {sb:?}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.data(a.0), false, self.data(b.0), transpose_b, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul { a: a.0, b: b.0, transpose_b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a.0), tanh)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.data(a.0).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::NumericFault(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a.0), f64::ln))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a.0), |x| -x)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// `scale·a + shift` with scalar constants.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(a, Op::Affine { a: a.0, scale }, |x| scale * x + shift)
    }

    fn check_axis(&self, name: &str, a: NodeId, axis: usize) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::Shape(format!("{name}: axis {axis} out of range for shape {s:?}")));
        }
        Ok(())
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, op: Op, mean: bool) -> NodeId {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a.0);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        if mean && len > 0 {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a.0]);
        self.push(Tensor { shape: out_shape, data: out }, op, rg)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("sum_axis", a, axis)?;
        Ok(self.reduce_axis(a, axis, Op::SumAxis { a: a.0, axis }, false))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("mean_axis", a, axis)?;
        Ok(self.reduce_axis(a, axis, Op::MeanAxis { a: a.0, axis }, true))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a.0).iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::Shape("slice_last: scalar input".into()))?;
        if start > end || end > last {
            return Err(Error::Shape(format!("slice_last: range {start}..{end} out of bounds for {shape:?}")));
        }
        let src = self.data(a.0);
        let mut data = Vec::with_capacity(src.len() / last.max(1) * (end - start));
        for row in src.chunks_exact(last.max(1)) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = end - start;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { a: a.0, start, end }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::Shape(format!("reshape: {:?} to {shape:?}", self.shape(a))));
        }
        let out = Tensor { shape: shape.to_vec(), data: self.data(a.0).to_vec() };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Repeat each row of a `[n, p]` matrix `reps` times: `[n·reps, p]`.
    pub fn repeat_rows(&mut self, a: NodeId, reps: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("repeat_rows: expected matrix, got {shape:?}")));
        }
        let p = shape[1];
        let mut data = Vec::with_capacity(shape[0] * reps * p);
        for row in self.data(a.0).chunks_exact(p.max(1)) {
            for _ in 0..reps {
                data.extend_from_slice(row);
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor { shape: vec![shape[0] * reps, p], data }, Op::RepeatRows { a: a.0, reps }, rg))
    }

    /// Stack scalars into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(items.len());
        for &id in items {
            let v = self.value(id);
            if !v.shape.is_empty() {
                return Err(Error::Shape(format!("stack: expected scalars, got {:?}", v.shape)));
            }
            data.push(v.data[0]);
        }
        let ids: Vec<usize> = items.iter().map(|i| i.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::vector(data), Op::Stack(ids), rg))
    }

    /// Elementwise `ln N(x; mu, sigma)`. All three operands share a shape.
    pub fn gaussian_log_pdf(&mut self, x: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if self.shape(mu) != s.as_slice() || self.shape(sigma) != s.as_slice() {
            return Err(Error::Shape(format!(
                "gaussian_log_pdf: shapes {s:?}, {:?}, {:?}",
                self.shape(mu),
                self.shape(sigma)
            )));
        }
        let (dx, dm, ds) = (self.data(x.0), self.data(mu.0), self.data(sigma.0));
        if let Some(bad) = ds.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::NumericFault(format!("gaussian_log_pdf: non-positive sigma {bad}")));
        }
        let data = (0..dx.len()).map(|i| gaussian_log_pdf(dx[i], dm[i], ds[i])).collect();
        let rg = self.rg(&[x.0, mu.0, sigma.0]);
        Ok(self.push(Tensor { shape: s, data }, Op::GaussianLogPdf { x: x.0, mu: mu.0, sigma: sigma.0 }, rg))
    }

    /// `ln Σ exp` along `axis`, evaluated with max subtraction.
    pub fn log_sum_exp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("log_sum_exp", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a.0);
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    buf[j] = src[(o * len + j) * inner + i];
                }
                out[o * inner + i] = log_sum_exp(&buf);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::LogSumExp { a: a.0, axis }, rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.shape.is_empty() {
            return Err(Error::Shape(format!("backward: loss must be a scalar, got shape {:?}", lv.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value.data;
            let push = |grads: &mut Vec<Option<Vec<f64>>>, target: usize, contrib: Vec<f64>| {
                if !self.nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => add_into(existing, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let needs = |i: usize| self.nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                &Op::MatMul { a, b, transpose_b } => {
                    let sa = &self.nodes[a].value.shape;
                    let sb = &self.nodes[b].value.shape;
                    let (n, k) = (sa[0], sa[1]);
                    let m = if transpose_b { sb[0] } else { sb[1] };
                    if needs(a) {
                        // dA = dC·Bᵀ (or dC·B when B was used transposed)
                        let mut da = vec![0.0; n * k];
                        gemm(n, m, k, &g, false, self.data(b), !transpose_b, &mut da, false);
                        push(&mut grads, a, da);
                    }
                    if needs(b) {
                        let mut db = vec![0.0; k * m];
                        if transpose_b {
                            // dB = dCᵀ·A, shape m×k
                            gemm(m, n, k, &g, true, self.data(a), false, &mut db, false);
                        } else {
                            // dB = Aᵀ·dC, shape k×m
                            gemm(k, n, m, self.data(a), true, &g, false, &mut db, false);
                        }
                        push(&mut grads, b, db);
                    }
                }
                &Op::Add { a, b } | &Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    if needs(a) {
                        let n = self.nodes[a].value.numel();
                        push(&mut grads, a, reduce_broadcast(&g, n));
                    }
                    if needs(b) {
                        let n = self.nodes[b].value.numel();
                        let mut gb = reduce_broadcast(&g, n);
                        if sign < 0.0 {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        push(&mut grads, b, gb);
                    }
                }
                &Op::Mul { a, b } => {
                    let (da, db) = (self.data(a), self.data(b));
                    if needs(a) {
                        let full = zip_broadcast(&g, db, |gi, y| gi * y);
                        push(&mut grads, a, reduce_broadcast(&full, da.len()));
                    }
                    if needs(b) {
                        let full = zip_broadcast(&g, da, |gi, x| gi * x);
                        push(&mut grads, b, reduce_broadcast(&full, db.len()));
                    }
                }
                &Op::Tanh(a) => {
                    let v = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                    push(&mut grads, a, v);
                }
                &Op::Softplus(a) => {
                    let x = self.data(a);
                    let v = g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
                    push(&mut grads, a, v);
                }
                &Op::Exp(a) => {
                    let v = g.iter().zip(out).map(|(gi, y)| gi * y).collect();
                    push(&mut grads, a, v);
                }
                &Op::Log(a) => {
                    let x = self.data(a);
                    let v = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                    push(&mut grads, a, v);
                }
                &Op::Neg(a) => {
                    push(&mut grads, a, g.iter().map(|v| -v).collect());
                }
                &Op::Square(a) => {
                    let x = self.data(a);
                    let v = g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect();
                    push(&mut grads, a, v);
                }
                &Op::Affine { a, scale } => {
                    push(&mut grads, a, g.iter().map(|v| v * scale).collect());
                }
                &Op::SumAxis { a, axis } | &Op::MeanAxis { a, axis } => {
                    let shape = &self.nodes[a].value.shape;
                    let (outer, len, inner) = axis_split(shape, axis);
                    let w = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                    let mut v = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                v[(o * len + j) * inner + i] = w * g[o * inner + i];
                            }
                        }
                    }
                    push(&mut grads, a, v);
                }
                &Op::SumAll(a) => {
                    let n = self.nodes[a].value.numel();
                    push(&mut grads, a, vec![g[0]; n]);
                }
                &Op::Slice { a, start, end } => {
                    let last = *self.nodes[a].value.shape.last().unwrap();
                    let w = end - start;
                    let mut v = vec![0.0; self.nodes[a].value.numel()];
                    if w > 0 {
                        for (row, gr) in v.chunks_exact_mut(last).zip(g.chunks_exact(w)) {
                            row[start..end].copy_from_slice(gr);
                        }
                    }
                    push(&mut grads, a, v);
                }
                &Op::Reshape(a) => push(&mut grads, a, g),
                &Op::RepeatRows { a, reps } => {
                    let p = self.nodes[a].value.shape[1];
                    let rows = self.nodes[a].value.shape[0];
                    let mut v = vec![0.0; rows * p];
                    if p > 0 {
                        for (r, block) in g.chunks_exact(reps * p).enumerate() {
                            for rep in block.chunks_exact(p) {
                                add_into(&mut v[r * p..(r + 1) * p], rep);
                            }
                        }
                    }
                    push(&mut grads, a, v);
                }
                Op::Stack(ids) => {
                    for (i, &id) in ids.iter().enumerate() {
                        push(&mut grads, id, vec![g[i]]);
                    }
                }
                &Op::GaussianLogPdf { x, mu, sigma } => {
                    let (dx, dm, ds) = (self.data(x), self.data(mu), self.data(sigma));
                    let n = dx.len();
                    // d/dx = -(x-mu)/s², d/dmu = (x-mu)/s², d/ds = ((x-mu)²/s² - 1)/s
                    if needs(x) || needs(mu) {
                        let score: Vec<f64> = (0..n).map(|i| g[i] * (dx[i] - dm[i]) / (ds[i] * ds[i])).collect();
                        if needs(x) {
                            push(&mut grads, x, score.iter().map(|v| -v).collect());
                        }
                        if needs(mu) {
                            push(&mut grads, mu, score);
                        }
                    }
                    if needs(sigma) {
                        let v = (0..n)
                            .map(|i| {
                                let z = (dx[i] - dm[i]) / ds[i];
                                g[i] * (z * z - 1.0) / ds[i]
                            })
                            .collect();
                        push(&mut grads, sigma, v);
                    }
                }
                &Op::LogSumExp { a, axis } => {
                    let shape = &self.nodes[a].value.shape;
                    let (outer, len, inner) = axis_split(shape, axis);
                    let src = self.data(a);
                    let mut v = vec![0.0; src.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let lse = out[o * inner + i];
                            let gi = g[o * inner + i];
                            for j in 0..len {
                                let k = (o * len + j) * inner + i;
                                v[k] = gi * (src[k] - lse).exp();
                            }
                        }
                    }
                    push(&mut grads, a, v);
                }
            }
        }
        Ok(Gradients { shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(), grads })
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; zeros when the leaf does
    /// not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }
}

/// Builds a scalar loss on a fresh graph from one parameter leaf per input.
pub trait ScalarFn: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>> ScalarFn for F {}

fn eval_scalar<F: ScalarFn>(f: &F, point: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!("gradcheck: function returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Maximum of `|g_ad - g_fd| / max(1, |g_fd|)` over every parameter entry,
/// using central differences with step `h`.
pub fn gradcheck<F: ScalarFn>(f: F, point: &[Tensor], h: f64) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for (t, id) in ids.iter().enumerate() {
        let ad = grads.wrt(*id);
        for j in 0..point[t].numel() {
            let x0 = point[t].data[j];
            probe[t].data[j] = x0 + h;
            let fp = eval_scalar(&f, &probe)?;
            probe[t].data[j] = x0 - h;
            let fm = eval_scalar(&f, &probe)?;
            probe[t].data[j] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NumericFault(format!(
                    "gradcheck: non-finite value near parameter {t}[{j}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * h);
            let err = (ad.data[j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn tanh_matches_libm() {
        let mut worst = 0.0f64;
        for i in -40_000..=40_000 {
            let x = i as f64 * 6.25e-4;
            let (a, b) = (tanh(x), x.tanh());
            if b != 0.0 {
                worst = worst.max(((a - b) / b).abs());
            }
        }
        assert!(worst < 4.0 * f64::EPSILON, "{worst}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(50.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
        assert_eq!(tanh(1e-300), 1e-300);
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn analytic_values() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_log_pdf(0.0, 0.0, 1.0), -0.918_938_533_204_672_7, epsilon = 1e-15);
        assert!(softplus(800.0).is_finite());
        assert_abs_diff_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 0.0]));
        let th = g.tanh(x);
        let s = g.sum(th);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let mu = g.param(Tensor::scalar(0.0));
        let sd = g.constant(Tensor::scalar(1.0));
        let lp = g.gaussian_log_pdf(x, mu, sd).unwrap();
        assert_abs_diff_eq!(g.backward(lp).unwrap().wrt(mu).item(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
        let neg = g.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(g.log(neg), Err(Error::NumericFault(_))));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn cubic_gradcheck() {
        let err = gradcheck(
            |g: &mut Graph, p: &[NodeId]| {
                let sq = g.square(p[0]);
                let cube = g.mul(sq, p[0])?;
                Ok(g.sum(cube))
            },
            &[Tensor::scalar(2.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn bias_broadcast_backward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(Tensor::vector(vec![0.5, -0.5]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn log_sum_exp_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let l = g.log_sum_exp(x, 0).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 1000.0 + std::f64::consts::LN_2, epsilon = 1e-12);
    }

    /// Every op composed into one scalar; checked against central differences.
    fn all_ops(g: &mut Graph, p: &[NodeId]) -> Result<NodeId> {
        let (a, w, b, x) = (p[0], p[1], p[2], p[3]);
        let h = g.matmul(a, w)?; // [3,4]
        let h = g.add(h, b)?;
        let h = g.tanh(h);
        let wt = g.reshape(w, &[2, 4])?;
        let z = g.matmul_bt(a, a)?; // [3,3]
        let z = g.softplus(z);
        let zl = g.log(z)?;
        let zs = g.sum_axis(zl, 1)?; // [3]
        let left = g.slice_last(h, 1, 3)?; // [3,2]
        let rep = g.repeat_rows(left, 2)?; // [6,2]
        let m = g.mean_axis(rep, 0)?; // [2]
        let e = g.exp(m);
        let sq = g.square(e);
        let n = g.neg(sq);
        let af = g.affine(n, 0.3, 1.0);
        let prod = g.mul(af, x)?; // [2]
        let xs = g.sub(prod, x)?;
        let sd = g.softplus(x);
        let lp = g.gaussian_log_pdf(xs, m, sd)?;
        let lse = g.log_sum_exp(h, 1)?; // [3]
        let s1 = g.sum(lp);
        let s2 = g.sum(lse);
        let s3 = g.sum(zs);
        let s4 = g.sum(wt);
        let st = g.stack(&[s1, s2, s3, s4])?;
        let lse2 = g.log_sum_exp(st, 0)?;
        let sq2 = g.square(s1);
        let out = g.add(lse2, sq2)?;
        Ok(out)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gradcheck_all_ops(vals in proptest::collection::vec(-1.0f64..1.0, 20)) {
            let point = [
                t(&[3, 2], &vals[0..6]),
                t(&[2, 4], &vals[6..14]),
                Tensor::vector(vals[14..18].to_vec()),
                Tensor::vector(vals[18..20].to_vec()),
            ];
            let err = gradcheck(all_ops, &point, 1e-5).unwrap();
            prop_assert!(err < 1e-5, "relative error {}", err);
        }

        #[test]
        fn backward_is_linear(vals in proptest::collection::vec(-2.0f64..2.0, 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x0 = Tensor::vector(vals);
            let grad = |wa: f64, wb: f64| {
                let mut g = Graph::new();
                let x = g.param(x0.clone());
                let f = g.tanh(x);
                let f = g.sum(f);
                let gg = g.square(x);
                let gg = g.sum(gg);
                let fa = g.affine(f, wa, 0.0);
                let gb = g.affine(gg, wb, 0.0);
                let tot = g.add(fa, gb).unwrap();
                g.backward(tot).unwrap().wrt(x)
            };
            let combined = grad(a, b);
            let gf = grad(1.0, 0.0);
            let gg = grad(0.0, 1.0);
            for i in 0..4 {
                let expect = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((combined.data()[i] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_matches_naive_after_shift(vals in proptest::collection::vec(-20.0f64..20.0, 1..10)) {
            let naive = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
            prop_assert!((log_sum_exp(&vals) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -0.7]));
        let y = g.softplus(x);
        let s = g.sum(y);
        let a = g.backward(s).unwrap().wrt(x);
        let b = g.backward(s).unwrap().wrt(x);
        assert_eq!(a, b);
    }
}
