//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] records every operation in creation order. Nodes only ever
//! reference earlier nodes, so the creation order is a topological order and
//! [`Graph::backward`] simply walks it in reverse. Gradient accumulation order
//! is therefore fixed by the recording, which makes repeated runs bitwise
//! identical.
//!
//! The op set is intentionally small: matmul, add, mul, scale, sigmoid,
//! softmax over the last axis, layer norm over the last axis, concat and
//! split along any axis, mean-square reduction, transpose (axis permutation)
//! and reshape. Add and mul broadcast numpy-style over size-1 or missing
//! leading axes.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Softmax,
    LayerNorm,
    Concat,
    Split,
    MeanSquare,
    Transpose,
    Reshape,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Split { a: Var, axis: usize, start: usize },
    MeanSquare { a: Var },
    Transpose { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Split { .. } => OpKind::Split,
            Op::MeanSquare { .. } => OpKind::MeanSquare,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Sigmoid { a }
            | Op::Softmax { a }
            | Op::LayerNorm { a, .. }
            | Op::Split { a, .. }
            | Op::MeanSquare { a }
            | Op::Transpose { a, .. }
            | Op::Reshape { a } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded operation, as exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index into `input` for every flat position of the broadcast output.
fn broadcast_index(out_shape: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        index.push(flat);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            flat += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            flat -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    index
}

/// Sum a broadcast-shaped gradient back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let index = broadcast_index(grad.shape(), shape);
    let data = out.data_mut();
    for (g, &i) in grad.data().iter().zip(&index) {
        data[i] += g;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// Batch layout of a matmul: `batch` independent `[m,k]·[k,n]` products,
/// or a single shared right-hand side when `shared_rhs`.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let mismatch = || TensorError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    let m = a[a.len() - 2];
    if b[b.len() - 2] != k {
        return Err(mismatch());
    }
    let n = b[b.len() - 1];
    let mut out = a[..a.len() - 1].to_vec();
    out.push(n);
    if b.len() == 2 {
        let batch = a[..a.len() - 2].iter().product();
        return Ok((
            MatMulDims {
                batch,
                m,
                k,
                n,
                shared_rhs: true,
            },
            out,
        ));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    let batch = a[..a.len() - 2].iter().product();
    Ok((
        MatMulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: false,
        },
        out,
    ))
}

fn permute_data(input: &Tensor, perm: &[usize]) -> Tensor {
    let shape = input.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = input.data();
    let mut data = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..src.len() {
        data.push(src[flat]);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            flat += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            flat -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permutation preserves element count")
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// The recorded operations in creation order.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let MatMulDims {
                batch,
                m,
                k,
                n,
                shared_rhs,
            } = dims;
            if shared_rhs {
                mm_nn(av, bv, &mut out, batch * m, k, n);
            } else {
                for s in 0..batch {
                    mm_nn(
                        &av[s * m * k..(s + 1) * m * k],
                        &bv[s * k * n..(s + 1) * k * n],
                        &mut out[s * m * n..(s + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        check_finite("matmul", &value)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if sa == sb {
            self.value(a).zip_map(self.value(b), op, f)?
        } else {
            let shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })?;
            let ia = broadcast_index(&shape, sa);
            let ib = broadcast_index(&shape, sb);
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        check_finite(op, &value)?;
        Ok(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        check_finite("scale", &value)?;
        Ok(self.push(value, Op::Scale { a, factor }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        check_finite("sigmoid", &value)?;
        Ok(self.push(value, Op::Sigmoid { a }))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        let d = *input.shape().last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: Vec::new(),
            reason: "softmax needs at least one axis".into(),
        })?;
        let mut value = input.clone();
        for row in value.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        check_finite("softmax", &value)?;
        Ok(self.push(value, Op::Softmax { a }))
    }

    /// Normalise the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let input = self.value(a);
        let d = match input.shape().last() {
            Some(&d) if d >= 2 => d,
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "layer_norm",
                    shape: input.shape().to_vec(),
                    reason: "last axis must have at least two features".into(),
                })
            }
        };
        let mut value = input.clone();
        let mut inv_std = Vec::with_capacity(value.numel() / d);
        for row in value.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        check_finite("layer_norm", &value)?;
        Ok(self.push(value, Op::LayerNorm { a, inv_std }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape,
                reason: format!("cannot take [{start}, {}) on axis {axis}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Split { a, axis, start }))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape,
                reason: format!("sizes {sizes:?} do not tile axis {axis}"),
            });
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Mean of squared elements, as a scalar.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean_square());
        check_finite("mean_square", &value)?;
        Ok(self.push(value, Op::MeanSquare { a }))
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let value = permute_data(self.value(a), perm);
        Ok(self.push(value, Op::Transpose { a, perm: perm.to_vec() }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: "need at least two axes".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.transpose(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (dims, _) = matmul_dims(av.shape(), bv.shape())?;
                let MatMulDims {
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } = dims;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; av.numel()];
                    if shared_rhs {
                        mm_nt(g.data(), bv.data(), &mut da, batch * m, n, k);
                    } else {
                        for s in 0..batch {
                            mm_nt(
                                &g.data()[s * m * n..(s + 1) * m * n],
                                &bv.data()[s * k * n..(s + 1) * k * n],
                                &mut da[s * m * k..(s + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    if shared_rhs {
                        mm_tn(av.data(), g.data(), &mut db, batch * m, k, n);
                    } else {
                        for s in 0..batch {
                            mm_tn(
                                &av.data()[s * m * k..(s + 1) * m * k],
                                &g.data()[s * m * n..(s + 1) * m * n],
                                &mut db[s * k * n..(s + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Mul { a, b } => {
                let out_shape = node.value.shape();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let full = if ov.shape() == out_shape {
                        g.zip_map(ov, "mul", |x, y| x * y)?
                    } else {
                        let io = broadcast_index(out_shape, ov.shape());
                        let data = g.data().iter().zip(&io).map(|(x, &i)| x * ov.data()[i]).collect();
                        Tensor::new(out_shape.to_vec(), data)?
                    };
                    self.accumulate(grads, this, reduce_to(&full, self.shape(this)));
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, g.map(|v| v * factor));
            }
            Op::Sigmoid { a } => {
                let da = g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *a, da);
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().expect("softmax output has an axis");
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)) {
                    let inner: f64 = drow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for (dv, y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - inner);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { a, inv_std } => {
                let d = *node.value.shape().last().expect("layer_norm output has an axis");
                let mut da = g.clone();
                for ((drow, yrow), inv) in da.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)).zip(inv_std) {
                    let mean_g = drow.iter().sum::<f64>() / d as f64;
                    let mean_gy = drow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                    for (dv, y) in drow.iter_mut().zip(yrow) {
                        *dv = inv * (*dv - mean_g - y * mean_gy);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v).to_vec();
                    let chunk = vs[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::new(vs, data)?);
                    }
                    offset += chunk;
                }
            }
            Op::Split { a, axis, start } => {
                let in_shape = self.shape(*a).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut da = Tensor::zeros(&in_shape);
                let data = da.data_mut();
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::MeanSquare { a } => {
                let av = self.value(*a);
                let factor = 2.0 * g.item() / av.numel() as f64;
                self.accumulate(grads, *a, av.map(|v| v * factor));
            }
            Op::Transpose { a, perm } => {
                self.accumulate(grads, *a, permute_data(g, &invert_perm(perm)));
            }
            Op::Reshape { a } => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
        }
        Ok(())
    }
}
