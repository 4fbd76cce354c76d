//! Forward kernels and vector-Jacobian products for every graph operation.
//!
//! Each op is pure given its payload: anything random (dropout masks) is
//! materialized when the node is built, so replaying a graph is deterministic.

use std::rc::Rc;

use super::tensor::Tensor;
use super::GradError;

/// The operation performed by a graph node.
///
/// Payload fields hold non-differentiable data (ids, masks, targets) so that
/// node inputs are exactly the differentiable operands.
#[derive(Debug)]
pub(crate) enum Op {
    /// Differentiable input (model parameter or watched input).
    Leaf,
    /// Non-differentiable input (data, masks, frozen parameters).
    Constant,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Elementwise difference of two same-shape tensors.
    Sub,
    /// Elementwise (Hadamard) product of two same-shape tensors.
    Mul,
    /// `x + b` where `b` has the length of `x`'s last axis.
    AddBias,
    /// Multiplication by a compile-time scalar.
    Scale(f64),
    /// Batched matrix product `[.., m, k] × [.., k, n]`; the right operand may
    /// be a plain `[k, n]` matrix shared across the batch.
    Matmul,
    /// Swap of two axes.
    Transpose(usize, usize),
    /// Same data under a new shape.
    Reshape,
    /// Concatenation of N same-rank tensors along one axis.
    Concat { axis: usize },
    /// Contiguous sub-range along one axis.
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Row lookup into a `[rows, d]` table; output shape is `id_shape + [d]`.
    Embedding {
        ids: Rc<Vec<usize>>,
        id_shape: Vec<usize>,
    },
    /// Per-row (last axis) normalization with learned scale and shift.
    LayerNorm { eps: f64 },
    /// Per-column standardization of a `[n, d]` matrix over the batch axis.
    BatchNormCols { eps: f64 },
    /// Stable softmax over the last axis.
    Softmax,
    /// Gaussian error linear unit (tanh form).
    Gelu,
    /// Elementwise product with a pre-drawn inverted-scaling mask.
    Dropout { mask: Rc<Vec<f64>> },
    /// Sum of all elements (scalar output).
    SumAll,
    /// Mean of all elements (scalar output).
    MeanAll,
    /// Weighted mean over the middle axis of `[n, t, d]`, weights `[n, t]`
    /// normalized per row; selects mean/CLS/last-token pooling by mask shape.
    MaskedMeanPool { weights: Rc<Vec<f64>> },
    /// Sum over rows of `weight_i * (logsumexp(logits_i) - logits_i[target_i])`.
    CrossEntropyLogits {
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    },
    /// Rows rescaled to (near-)unit Euclidean norm.
    L2NormalizeRows { eps: f64 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormCols { .. } => "batch_norm_cols",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::MaskedMeanPool { .. } => "masked_mean_pool",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        }
    }
}

// ── dense matrix microkernels ────────────────────────────────────────────────
// Row-major. Loop orders chosen so the innermost loop streams contiguous rows.

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ  (dot products of rows)
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]  (accumulated outer products of rows)
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

// ── shape helpers ────────────────────────────────────────────────────────────

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

fn check_same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Splits `[.., m, k]` into (batch, m, k); errors on rank < 2.
fn matrix_dims(op: &Op, t: &Tensor) -> Result<(usize, usize, usize), GradError> {
    let nd = t.ndim();
    if nd < 2 {
        return Err(GradError::ShapeMismatch {
            op: op.name(),
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    let m = t.shape()[nd - 2];
    let k = t.shape()[nd - 1];
    let batch: usize = t.shape()[..nd - 2].iter().product();
    Ok((batch, m, k))
}

// ── GELU (tanh form) ─────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── forward evaluation ───────────────────────────────────────────────────────

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
    match op {
        Op::Leaf | Op::Constant => unreachable!("inputs carry their own value"),

        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            check_same_shape(op, a, b)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }

        Op::AddBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let d = *x.shape().last().unwrap_or(&0);
            if b.ndim() != 1 || b.len() != d || d == 0 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                for (v, &bj) in row.iter_mut().zip(b.data()) {
                    *v += bj;
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        }

        Op::Scale(c) => {
            let x = inputs[0];
            let data = x.data().iter().map(|&v| c * v).collect();
            Tensor::new(x.shape().to_vec(), data)
        }

        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ba, m, k) = matrix_dims(op, a)?;
            let (bb, kb, n) = matrix_dims(op, b)?;
            let shared_rhs = b.ndim() == 2 && a.ndim() > 2;
            let batches_match = shared_rhs || a.shape()[..a.ndim() - 2] == b.shape()[..b.ndim() - 2];
            if kb != k || !batches_match {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut shape = a.shape()[..a.ndim() - 2].to_vec();
            shape.push(m);
            shape.push(n);
            let mut out = vec![0.0; ba * m * n];
            for i in 0..ba {
                let asl = &a.data()[i * m * k..(i + 1) * m * k];
                let bsl = if shared_rhs {
                    b.data()
                } else {
                    debug_assert_eq!(bb, ba);
                    &b.data()[i * k * n..(i + 1) * k * n]
                };
                matmul_nn(asl, bsl, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
            }
            Tensor::new(shape, out)
        }

        Op::Transpose(ax0, ax1) => {
            let x = inputs[0];
            let (a0, a1) = (*ax0, *ax1);
            if a0 >= x.ndim() || a1 >= x.ndim() || a0 == a1 {
                return Err(GradError::BadAxis {
                    op: op.name(),
                    axis: a0.max(a1),
                    shape: x.shape().to_vec(),
                });
            }
            Ok(transpose_copy(x, a0, a1))
        }

        Op::Reshape => unreachable!("reshape handled at node construction"),

        Op::Concat { axis } => {
            let first = inputs[0];
            if *axis >= first.ndim() {
                return Err(GradError::BadAxis {
                    op: op.name(),
                    axis: *axis,
                    shape: first.shape().to_vec(),
                });
            }
            let mut axis_total = 0;
            for t in inputs {
                if t.ndim() != first.ndim() {
                    return Err(GradError::ShapeMismatch {
                        op: op.name(),
                        lhs: first.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                for (ax, (&da, &db)) in first.shape().iter().zip(t.shape()).enumerate() {
                    if ax != *axis && da != db {
                        return Err(GradError::ShapeMismatch {
                            op: op.name(),
                            lhs: first.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                }
                axis_total += t.shape()[*axis];
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = axis_total;
            let (outer, _, inner) = outer_inner(&shape, *axis);
            let mut out = vec![0.0; outer * axis_total * inner];
            let mut offset = 0;
            for t in inputs {
                let alen = t.shape()[*axis];
                for o in 0..outer {
                    let src = &t.data()[o * alen * inner..(o + 1) * alen * inner];
                    let dst_start = (o * axis_total + offset) * inner;
                    out[dst_start..dst_start + alen * inner].copy_from_slice(src);
                }
                offset += alen;
            }
            Tensor::new(shape, out)
        }

        Op::Slice { axis, start, len } => {
            let x = inputs[0];
            if *axis >= x.ndim() {
                return Err(GradError::BadAxis {
                    op: op.name(),
                    axis: *axis,
                    shape: x.shape().to_vec(),
                });
            }
            let (outer, alen, inner) = outer_inner(x.shape(), *axis);
            if start + len > alen || *len == 0 {
                return Err(GradError::BadSlice {
                    start: *start,
                    len: *len,
                    axis_len: alen,
                });
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src_start = (o * alen + start) * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&x.data()[src_start..src_start + len * inner]);
            }
            Tensor::new(shape, out)
        }

        Op::Embedding { ids, id_shape } => {
            let table = inputs[0];
            if table.ndim() != 2 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: table.shape().to_vec(),
                    rhs: id_shape.clone(),
                });
            }
            let rows = table.shape()[0];
            let d = table.shape()[1];
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                if id >= rows {
                    return Err(GradError::IndexOutOfRange { index: id, rows });
                }
                out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            let mut shape = id_shape.clone();
            shape.push(d);
            Tensor::new(shape, out)
        }

        Op::LayerNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = *x.shape().last().unwrap_or(&0);
            if d == 0 || gamma.len() != d || beta.len() != d {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: gamma.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    orow[j] = gamma.data()[j] * (row[j] - mean) * inv + beta.data()[j];
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }

        Op::BatchNormCols { eps } => {
            let x = inputs[0];
            if x.ndim() != 2 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; n * d];
            for j in 0..d {
                let mut mean = 0.0;
                for i in 0..n {
                    mean += x.data()[i * d + j];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for i in 0..n {
                    let c = x.data()[i * d + j] - mean;
                    var += c * c;
                }
                var /= n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..n {
                    out[i * d + j] = (x.data()[i * d + j] - mean) * inv;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }

        Op::Softmax => {
            let x = inputs[0];
            let d = *x.shape().last().unwrap_or(&0);
            if d == 0 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..d {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum += e;
                }
                for v in orow.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }

        Op::Gelu => {
            let x = inputs[0];
            let data = x.data().iter().map(|&v| gelu(v)).collect();
            Tensor::new(x.shape().to_vec(), data)
        }

        Op::Dropout { mask } => {
            let x = inputs[0];
            if mask.len() != x.len() {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let data = x.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
            Tensor::new(x.shape().to_vec(), data)
        }

        Op::SumAll => Ok(Tensor::scalar(inputs[0].data().iter().sum())),

        Op::MeanAll => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(GradError::EmptyInput { op: op.name() });
            }
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }

        Op::MaskedMeanPool { weights } => {
            let x = inputs[0];
            if x.ndim() != 3 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![weights.len()],
                });
            }
            let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if weights.len() != n * t {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![weights.len()],
                });
            }
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let wrow = &weights[i * t..(i + 1) * t];
                let wsum: f64 = wrow.iter().sum();
                if wsum <= 0.0 {
                    return Err(GradError::EmptyPool { row: i });
                }
                for (ti, &w) in wrow.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let xrow = &x.data()[(i * t + ti) * d..(i * t + ti + 1) * d];
                    let orow = &mut out[i * d..(i + 1) * d];
                    let scale = w / wsum;
                    for (ov, &xv) in orow.iter_mut().zip(xrow) {
                        *ov += scale * xv;
                    }
                }
            }
            Tensor::new(vec![n, d], out)
        }

        Op::CrossEntropyLogits { targets, weights } => {
            let logits = inputs[0];
            if logits.ndim() != 2 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: logits.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let (rows, v) = (logits.shape()[0], logits.shape()[1]);
            if targets.len() != rows || weights.len() != rows {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: logits.shape().to_vec(),
                    rhs: vec![targets.len(), weights.len()],
                });
            }
            let mut total = 0.0;
            for i in 0..rows {
                let w = weights[i];
                if w == 0.0 {
                    continue;
                }
                let t = targets[i];
                if t >= v {
                    return Err(GradError::IndexOutOfRange { index: t, rows: v });
                }
                let row = &logits.data()[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
                total += w * (lse - row[t]);
            }
            Ok(Tensor::scalar(total))
        }

        Op::L2NormalizeRows { eps } => {
            let x = inputs[0];
            let d = *x.shape().last().unwrap_or(&0);
            if d == 0 {
                return Err(GradError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let norm = (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
                for j in 0..d {
                    orow[j] = row[j] / norm;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
    }
}

fn transpose_copy(x: &Tensor, a0: usize, a1: usize) -> Tensor {
    let nd = x.ndim();
    let mut shape = x.shape().to_vec();
    shape.swap(a0, a1);
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a0, a1);
    let mut out = vec![0.0; x.len()];
    let mut coords = vec![0usize; nd];
    for (oi, slot) in out.iter_mut().enumerate() {
        // decode oi into coords of the *output* shape
        let mut rem = oi;
        for i in (0..nd).rev() {
            coords[i] = rem % shape[i];
            rem /= shape[i];
        }
        let mut src = 0;
        for i in 0..nd {
            src += coords[i] * perm_strides[i];
        }
        *slot = x.data()[src];
    }
    Tensor::new(shape, out).expect("transpose preserves element count")
}

// ── vector-Jacobian products ─────────────────────────────────────────────────

/// Computes per-input gradients for one node. `wants[i]` gates whether input
/// `i`'s gradient is materialized (inputs outside any differentiable path are
/// skipped). `grad` is the upstream gradient with the output's shape.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &[f64],
    wants: &[bool],
) -> Result<Vec<Option<Tensor>>, GradError> {
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf | Op::Constant => {}

        Op::Add => {
            for slot in 0..2 {
                if wants[slot] {
                    out[slot] = Some(Tensor::new(inputs[slot].shape().to_vec(), grad.to_vec())?);
                }
            }
        }

        Op::Sub => {
            if wants[0] {
                out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), grad.to_vec())?);
            }
            if wants[1] {
                let data = grad.iter().map(|&g| -g).collect();
                out[1] = Some(Tensor::new(inputs[1].shape().to_vec(), data)?);
            }
        }

        Op::Mul => {
            for slot in 0..2 {
                if wants[slot] {
                    let other = inputs[1 - slot];
                    let data = grad.iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
                    out[slot] = Some(Tensor::new(inputs[slot].shape().to_vec(), data)?);
                }
            }
        }

        Op::AddBias => {
            if wants[0] {
                out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), grad.to_vec())?);
            }
            if wants[1] {
                let d = inputs[1].len();
                let mut gb = vec![0.0; d];
                for row in grad.chunks(d) {
                    for (g, &r) in gb.iter_mut().zip(row) {
                        *g += r;
                    }
                }
                out[1] = Some(Tensor::new(vec![d], gb)?);
            }
        }

        Op::Scale(c) => {
            if wants[0] {
                let data = grad.iter().map(|&g| c * g).collect();
                out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), data)?);
            }
        }

        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k) = matrix_dims(op, a)?;
            let n = *b.shape().last().unwrap();
            let shared_rhs = b.ndim() == 2 && a.ndim() > 2;
            if wants[0] {
                // ga = g · bᵀ
                let mut ga = vec![0.0; a.len()];
                for i in 0..batch {
                    let gsl = &grad[i * m * n..(i + 1) * m * n];
                    let bsl = if shared_rhs {
                        b.data()
                    } else {
                        &b.data()[i * k * n..(i + 1) * k * n]
                    };
                    matmul_nt(gsl, bsl, &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                }
                out[0] = Some(Tensor::new(a.shape().to_vec(), ga)?);
            }
            if wants[1] {
                // gb = aᵀ · g (accumulated over the batch when rhs is shared)
                let mut gb = vec![0.0; b.len()];
                for i in 0..batch {
                    let asl = &a.data()[i * m * k..(i + 1) * m * k];
                    let gsl = &grad[i * m * n..(i + 1) * m * n];
                    let dst = if shared_rhs {
                        &mut gb[..]
                    } else {
                        &mut gb[i * k * n..(i + 1) * k * n]
                    };
                    matmul_tn(asl, gsl, dst, k, m, n);
                }
                out[1] = Some(Tensor::new(b.shape().to_vec(), gb)?);
            }
        }

        Op::Transpose(a0, a1) => {
            if wants[0] {
                let gt = Tensor::new(output.shape().to_vec(), grad.to_vec())?;
                out[0] = Some(transpose_copy(&gt, *a0, *a1));
            }
        }

        Op::Reshape => {
            if wants[0] {
                out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), grad.to_vec())?);
            }
        }

        Op::Concat { axis } => {
            let shape = output.shape();
            let (outer, axis_total, inner) = outer_inner(shape, *axis);
            let mut offset = 0;
            for (slot, t) in inputs.iter().enumerate() {
                let alen = t.shape()[*axis];
                if wants[slot] {
                    let mut g = vec![0.0; t.len()];
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        g[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&grad[src_start..src_start + alen * inner]);
                    }
                    out[slot] = Some(Tensor::new(t.shape().to_vec(), g)?);
                }
                offset += alen;
            }
        }

        Op::Slice { axis, start, len } => {
            if wants[0] {
                let x = inputs[0];
                let (outer, alen, inner) = outer_inner(x.shape(), *axis);
                let mut g = vec![0.0; x.len()];
                for o in 0..outer {
                    let dst_start = (o * alen + start) * inner;
                    g[dst_start..dst_start + len * inner]
                        .copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
                }
                out[0] = Some(Tensor::new(x.shape().to_vec(), g)?);
            }
        }

        Op::Embedding { ids, .. } => {
            if wants[0] {
                let table = inputs[0];
                let d = table.shape()[1];
                let mut g = vec![0.0; table.len()];
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &grad[pos * d..(pos + 1) * d];
                    let dst = &mut g[id * d..(id + 1) * d];
                    for (gv, &sv) in dst.iter_mut().zip(src) {
                        *gv += sv;
                    }
                }
                out[0] = Some(Tensor::new(table.shape().to_vec(), g)?);
            }
        }

        Op::LayerNorm { eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let d = *x.shape().last().unwrap();
            let rows = x.len() / d;
            let mut gx = if wants[0] { vec![0.0; x.len()] } else { vec![] };
            let mut ggamma = if wants[1] { vec![0.0; d] } else { vec![] };
            let mut gbeta = if wants[2] { vec![0.0; d] } else { vec![] };
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let grow = &grad[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                if wants[1] || wants[2] {
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        if wants[1] {
                            ggamma[j] += grow[j] * xhat;
                        }
                        if wants[2] {
                            gbeta[j] += grow[j];
                        }
                    }
                }
                if wants[0] {
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    for j in 0..d {
                        let gy = gamma.data()[j] * grow[j];
                        let xhat = (row[j] - mean) * inv;
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat;
                    }
                    mean_gy /= d as f64;
                    mean_gy_xhat /= d as f64;
                    for j in 0..d {
                        let gy = gamma.data()[j] * grow[j];
                        let xhat = (row[j] - mean) * inv;
                        gx[r * d + j] = inv * (gy - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
            if wants[0] {
                out[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
            }
            if wants[1] {
                out[1] = Some(Tensor::new(vec![d], ggamma)?);
            }
            if wants[2] {
                out[2] = Some(Tensor::new(vec![d], gbeta)?);
            }
        }

        Op::BatchNormCols { eps } => {
            if wants[0] {
                let x = inputs[0];
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let nf = n as f64;
                let mut gx = vec![0.0; n * d];
                for j in 0..d {
                    let mut mean = 0.0;
                    for i in 0..n {
                        mean += x.data()[i * d + j];
                    }
                    mean /= nf;
                    let mut var = 0.0;
                    for i in 0..n {
                        let c = x.data()[i * d + j] - mean;
                        var += c * c;
                    }
                    var /= nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_g = 0.0;
                    let mut mean_g_xhat = 0.0;
                    for i in 0..n {
                        let xhat = (x.data()[i * d + j] - mean) * inv;
                        let g = grad[i * d + j];
                        mean_g += g;
                        mean_g_xhat += g * xhat;
                    }
                    mean_g /= nf;
                    mean_g_xhat /= nf;
                    for i in 0..n {
                        let xhat = (x.data()[i * d + j] - mean) * inv;
                        gx[i * d + j] = inv * (grad[i * d + j] - mean_g - xhat * mean_g_xhat);
                    }
                }
                out[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
            }
        }

        Op::Softmax => {
            if wants[0] {
                let y = output;
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yrow, grow), gxrow) in y
                    .data()
                    .chunks(d)
                    .zip(grad.chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        gxrow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                out[0] = Some(Tensor::new(y.shape().to_vec(), gx)?);
            }
        }

        Op::Gelu => {
            if wants[0] {
                let x = inputs[0];
                let data = x
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| g * gelu_deriv(v))
                    .collect();
                out[0] = Some(Tensor::new(x.shape().to_vec(), data)?);
            }
        }

        Op::Dropout { mask } => {
            if wants[0] {
                let data = grad.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect();
                out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), data)?);
            }
        }

        Op::SumAll => {
            if wants[0] {
                let g = grad[0];
                out[0] = Some(Tensor::full(inputs[0].shape(), g));
            }
        }

        Op::MeanAll => {
            if wants[0] {
                let g = grad[0] / inputs[0].len() as f64;
                out[0] = Some(Tensor::full(inputs[0].shape(), g));
            }
        }

        Op::MaskedMeanPool { weights } => {
            if wants[0] {
                let x = inputs[0];
                let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gx = vec![0.0; x.len()];
                for i in 0..n {
                    let wrow = &weights[i * t..(i + 1) * t];
                    let wsum: f64 = wrow.iter().sum();
                    let grow = &grad[i * d..(i + 1) * d];
                    for (ti, &w) in wrow.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = w / wsum;
                        let dst = &mut gx[(i * t + ti) * d..(i * t + ti + 1) * d];
                        for (gv, &sv) in dst.iter_mut().zip(grow) {
                            *gv += scale * sv;
                        }
                    }
                }
                out[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
            }
        }

        Op::CrossEntropyLogits { targets, weights } => {
            if wants[0] {
                let logits = inputs[0];
                let (rows, v) = (logits.shape()[0], logits.shape()[1]);
                let gup = grad[0];
                let mut gl = vec![0.0; logits.len()];
                for i in 0..rows {
                    let w = weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    let row = &logits.data()[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let grow = &mut gl[i * v..(i + 1) * v];
                    for j in 0..v {
                        let e = (row[j] - max).exp();
                        grow[j] = e;
                        sum += e;
                    }
                    let scale = gup * w;
                    for g in grow.iter_mut() {
                        *g = *g / sum * scale;
                    }
                    grow[targets[i]] -= scale;
                }
                out[0] = Some(Tensor::new(logits.shape().to_vec(), gl)?);
            }
        }

        Op::L2NormalizeRows { eps } => {
            if wants[0] {
                let x = inputs[0];
                let d = *x.shape().last().unwrap();
                let mut gx = vec![0.0; x.len()];
                for ((row, grow), gxrow) in x
                    .data()
                    .chunks(d)
                    .zip(grad.chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let norm = (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
                    let dot: f64 = row.iter().zip(grow).map(|(&xv, &gv)| xv * gv).sum();
                    let k = dot / (norm * norm * norm);
                    for j in 0..d {
                        gxrow[j] = grow[j] / norm - row[j] * k;
                    }
                }
                out[0] = Some(Tensor::new(x.shape().to_vec(), gx)?);
            }
        }
    }
    Ok(out)
}
