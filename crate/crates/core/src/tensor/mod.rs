//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! crate is built from.
//!
//! Every kernel is a pure function of its inputs. Reductions run in a fixed
//! order so results are bitwise reproducible:
//!
//! * [`matmul`] accumulates each output element left to right over the
//!   contraction axis, starting from `0.0`:
//!   `out[i][j] = ((0 + a[i][0]*b[0][j]) + a[i][1]*b[1][j]) + ...`.
//! * [`softmax`] sums exponentials left to right along the axis.
//! * [`sum_axis`] and [`sum_to_shape`] accumulate in increasing flat-index
//!   order of the source tensor.

mod io;
mod mask;

pub use io::{read_sgt1, write_sgt1, SGT1_MAGIC};
pub use mask::Mask;

use crate::error::{Error, Result};

/// Additive sentinel applied to masked logits before normalization.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a rank-2 tensor from rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("valid row literal")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut flat = 0;
    for (&extent, &i) in shape.iter().zip(index) {
        assert!(i < extent, "index {index:?} out of bounds for {shape:?}");
        flat = flat * extent + i;
    }
    flat
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (aligned from the trailing axis).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_flat, a_flat, b_flat)` for every element of the broadcast
/// shape, in increasing output order.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out =
        broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::dim(op, &a.shape, &b.shape))?;
    // Fast path: b repeats over the leading axes of a.
    if out == a.shape && a.shape.ends_with(&b.shape) {
        let n = b.data.len();
        let data = a
            .data
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor { shape: out, data });
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(a.data[i], b.data[j]));
    Ok(Tensor { shape: out, data })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

/// Materializes `a` at a broadcast-compatible larger shape.
pub fn broadcast_to(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    match broadcast_shape(&a.shape, shape) {
        Some(out) if out == shape => {}
        _ => return Err(Error::dim("broadcast_to", &a.shape, shape)),
    }
    if a.shape == shape {
        return Ok(a.clone());
    }
    let sa = broadcast_strides(&a.shape, shape);
    let zeros = vec![0; shape.len()];
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, &sa, &zeros, |o, i, _| data[o] = a.data[i]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Sums `a` down to `shape`, the inverse of broadcasting. Used to reduce
/// gradients of broadcast operands.
pub fn sum_to_shape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    match broadcast_shape(shape, &a.shape) {
        Some(out) if out == a.shape => {}
        _ => return Err(Error::dim("sum_to_shape", &a.shape, shape)),
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    if a.shape.ends_with(shape) {
        for chunk in a.data.chunks(n) {
            for (d, &x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
    } else {
        let st = broadcast_strides(shape, &a.shape);
        let zeros = vec![0; a.shape.len()];
        for_each_broadcast(&a.shape, &zeros, &st, |o, _, t| data[t] += a.data[o]);
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Matrix product over the last two axes with broadcast leading batch axes.
///
/// Each output element is accumulated left to right over the contraction
/// axis starting from `0.0`; the result is bitwise identical to a scalar
/// triple loop using the same order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (n, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (k2, m) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let batch_a = &a.shape[..a.rank() - 2];
    let batch_b = &b.shape[..b.rank() - 2];
    let batch = broadcast_shape(batch_a, batch_b)
        .ok_or_else(|| Error::dim("matmul", &a.shape, &b.shape))?;
    let n_batch: usize = batch.iter().product();
    let mut shape = batch.clone();
    shape.extend([n, m]);
    let mut out = vec![0.0; n_batch * n * m];

    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let mut pairs = Vec::with_capacity(n_batch);
    if batch.is_empty() {
        pairs.push((0, 0));
    } else {
        for_each_broadcast(&batch, &sa, &sb, |_, i, j| pairs.push((i, j)));
    }
    for (bi, (ia, ib)) in pairs.into_iter().enumerate() {
        let a_mat = &a.data[ia * n * k..(ia + 1) * n * k];
        let b_mat = &b.data[ib * k * m..(ib + 1) * k * m];
        let o_mat = &mut out[bi * n * m..(bi + 1) * n * m];
        matmul_kernel(a_mat, b_mat, o_mat, n, k, m);
    }
    Ok(Tensor { shape, data: out })
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Swaps the last two axes.
pub fn transpose_last2(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::dim("transpose", &a.shape, &[]));
    }
    let r = a.rank();
    let (n, m) = (a.shape[r - 2], a.shape[r - 1]);
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    let mut data = vec![0.0; a.data.len()];
    for (src, dst) in a.data.chunks(n * m).zip(data.chunks_mut(n * m)) {
        for i in 0..n {
            for j in 0..m {
                dst[j * n + i] = src[i * m + j];
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, a: &Tensor, axis: usize) -> Result<()> {
    if axis >= a.rank() {
        return Err(Error::dim(op, &a.shape, &[axis]));
    }
    Ok(())
}

/// Numerically stabilized softmax along `axis`.
///
/// `mask` holds 1.0 for valid and 0.0 for padded positions and must be
/// broadcastable to `x`. Masked logits are shifted by [`MASK_SENTINEL`]
/// before normalization and their outputs are then set to exactly zero.
pub fn softmax(x: &Tensor, axis: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let mask = mask.map(|m| broadcast_to(m, &x.shape)).transpose()?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; x.data.len()];
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut any_valid = false;
            for (j, v) in lane.iter_mut().enumerate() {
                let valid = mask.as_ref().is_none_or(|m| m.data[at(j)] != 0.0);
                any_valid |= valid;
                *v = if valid {
                    x.data[at(j)]
                } else {
                    x.data[at(j)] + MASK_SENTINEL
                };
            }
            if !any_valid {
                return Err(Error::InvalidMask(
                    "every position along the softmax axis is masked".into(),
                ));
            }
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for (j, v) in lane.iter().enumerate() {
                let valid = mask.as_ref().is_none_or(|m| m.data[at(j)] != 0.0);
                out[at(j)] = if valid { v / total } else { 0.0 };
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Concatenates tensors along `axis`, preserving part order.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
    check_axis("concat", first, axis)?;
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::dim("concat", &first.shape, &p.shape));
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Sums over `axis`, removing it.
pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", a, axis)?;
    let (outer, len, inner) = split_axis(&a.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &a.data[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += x;
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

/// Selects index `index` along `axis`, removing that axis.
pub fn slice_axis(a: &Tensor, axis: usize, index: usize) -> Result<Tensor> {
    check_axis("slice_axis", a, axis)?;
    let (outer, len, inner) = split_axis(&a.shape, axis);
    if index >= len {
        return Err(Error::dim("slice_axis", &a.shape, &[axis, index]));
    }
    let mut data = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let start = (o * len + index) * inner;
        data.extend_from_slice(&a.data[start..start + inner]);
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

/// Stacks equally shaped tensors along a new axis at position `axis`.
pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("stack of zero parts".into()))?;
    if axis > first.rank() {
        return Err(Error::dim("stack", &first.shape, &[axis]));
    }
    let mut expanded = first.shape.clone();
    expanded.insert(axis, 1);
    let views = parts
        .iter()
        .map(|p| {
            if p.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &p.shape));
            }
            p.reshape(&expanded)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&views.iter().collect::<Vec<_>>(), axis)
}
