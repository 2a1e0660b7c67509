//! Reverse-mode differentiation over tensor kernels.
//!
//! A [`Graph`] records every primitive executed during a forward pass in
//! execution order, so each node's inputs precede it. [`Graph::backward`]
//! walks the record in reverse once and returns the gradient of a scalar
//! loss with respect to every parameter read through [`Graph::param`].

mod adam;
mod gradcheck;
mod params;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ProbeResult};
pub use params::{
    read_checkpoint, write_checkpoint, xavier_uniform, Gradients, Param, ParamId, ParameterStore,
};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Slice {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape for one forward/backward pair.
pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a trainable parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.store.get(id).value.clone();
        let v = self.push(value, Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = tensor::scale(self.value(a), s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = tensor::relu(self.value(a));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = tensor::sigmoid(self.value(a));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose_last2(self.value(a))?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Softmax along `axis`; `mask` (1 valid / 0 padded) must broadcast to `x`.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let value = tensor::softmax(self.value(x), axis, mask)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("layer_norm needs rank >= 1");
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(src.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&refs, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::sum_axis(self.value(x), axis)?;
        Ok(self.push(value, Op::SumAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn slice(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let value = tensor::slice_axis(self.value(x), axis, index)?;
        Ok(self.push(value, Op::Slice { x, axis, index }))
    }

    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::stack(&refs, axis)?;
        Ok(self.push(
            value,
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup into a rank-2 `table`; the result has shape
    /// `index_shape ++ [table_cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("gather", t.shape(), index_shape));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "id {id} outside table of {rows} rows"
                )));
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(cols);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", l.shape(), &[labels.len()]));
        }
        let classes = l.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        let probs = tensor::softmax(l, 1, None)?;
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &l.data()[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from the scalar `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.insert(*id, g),
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    self.accumulate(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    self.accumulate(&mut grads, *b, &tensor::scale(&g, -1.0))?;
                }
                Op::Mul(a, b) => {
                    let ga = tensor::mul(&g, self.value(*b))?;
                    let gb = tensor::mul(&g, self.value(*a))?;
                    self.accumulate(&mut grads, *a, &ga)?;
                    self.accumulate(&mut grads, *b, &gb)?;
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, *a, &tensor::scale(&g, *s))?,
                Op::Relu(a) => {
                    // Subgradient at exactly zero is taken as 0.
                    let ga = tensor::zip_with("relu'", &g, self.value(*a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    self.accumulate(&mut grads, *a, &ga)?;
                }
                Op::Sigmoid(a) => {
                    let ga =
                        tensor::zip_with("sigmoid'", &g, &node.value, |gv, y| gv * y * (1.0 - y))?;
                    self.accumulate(&mut grads, *a, &ga)?;
                }
                Op::Matmul(a, b) => {
                    let (ga, gb) = self.matmul_grads(&g, *a, *b)?;
                    self.accumulate(&mut grads, *a, &ga)?;
                    self.accumulate(&mut grads, *b, &gb)?;
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, *a, &tensor::transpose_last2(&g)?)?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.shape(*a))?;
                    self.accumulate(&mut grads, *a, &ga)?;
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let yg = tensor::mul(y, &g)?;
                    let mut dot = tensor::sum_axis(&yg, *axis)?;
                    let mut kept = y.shape().to_vec();
                    kept[*axis] = 1;
                    dot = dot.reshape(&kept)?;
                    let centered = tensor::sub(&g, &dot)?;
                    self.accumulate(&mut grads, *x, &tensor::mul(y, &centered)?)?;
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let mut gx = Tensor::zeros(y.shape());
                    for (((gx_row, g_row), y_row), inv) in gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(y.data().chunks(d))
                        .zip(inv_std)
                    {
                        let mean_g = g_row.iter().sum::<f64>() / d as f64;
                        let mean_gy =
                            g_row.iter().zip(y_row).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, gv), yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *o = inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx)?;
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.shape(p)[*axis];
                        let piece = narrow(&g, *axis, offset, width)?;
                        offset += width;
                        self.accumulate(&mut grads, p, &piece)?;
                    }
                }
                Op::SumAxis { x, axis } => {
                    let mut kept = self.shape(*x).to_vec();
                    kept[*axis] = 1;
                    let expanded = tensor::broadcast_to(&g.reshape(&kept)?, self.shape(*x))?;
                    self.accumulate(&mut grads, *x, &expanded)?;
                }
                Op::SumAll(x) => {
                    let expanded = Tensor::full(self.shape(*x), g.item());
                    self.accumulate(&mut grads, *x, &expanded)?;
                }
                Op::Slice { x, axis, index } => {
                    let gx = scatter_slice(&g, self.shape(*x), *axis, *index)?;
                    self.accumulate(&mut grads, *x, &gx)?;
                }
                Op::Stack { parts, axis } => {
                    for (i, &p) in parts.iter().enumerate() {
                        let piece = tensor::slice_axis(&g, *axis, i)?;
                        self.accumulate(&mut grads, p, &piece)?;
                    }
                }
                Op::Gather { table, ids } => {
                    let shape = self.shape(*table).to_vec();
                    let cols = shape[1];
                    let mut gt = Tensor::zeros(&shape);
                    for (row, &id) in g.data().chunks(cols).zip(ids) {
                        for (t, v) in gt.data_mut()[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(row)
                        {
                            *t += v;
                        }
                    }
                    self.accumulate(&mut grads, *table, &gt)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = probs.shape()[1];
                    let scale = g.item() / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (b, &y) in labels.iter().enumerate() {
                        gl.data_mut()[b * classes + y] -= 1.0;
                    }
                    self.accumulate(&mut grads, *logits, &tensor::scale(&gl, scale))?;
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) -> Result<()> {
        let g = tensor::sum_to_shape(g, self.shape(v))?;
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn matmul_grads(&self, g: &Tensor, a: Var, b: Var) -> Result<(Tensor, Tensor)> {
        let (av, bv) = (self.value(a), self.value(b));
        let ga = tensor::matmul(g, &tensor::transpose_last2(bv)?)?;
        let gb = if bv.rank() == 2 {
            // Fold the batch axes of `a` into rows: dB = A_flat^T G_flat.
            let k = *av.shape().last().unwrap();
            let m = *g.shape().last().unwrap();
            let a_flat = av.reshape(&[av.len() / k, k])?;
            let g_flat = g.reshape(&[g.len() / m, m])?;
            tensor::matmul(&tensor::transpose_last2(&a_flat)?, &g_flat)?
        } else {
            tensor::matmul(&tensor::transpose_last2(av)?, g)?
        };
        Ok((ga, gb))
    }
}

/// `width` consecutive indices of `axis` starting at `offset`.
fn narrow(t: &Tensor, axis: usize, offset: usize, width: usize) -> Result<Tensor> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut data = Vec::with_capacity(outer * width * inner);
    for o in 0..outer {
        let start = (o * len + offset) * inner;
        data.extend_from_slice(&t.data()[start..start + width * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = width;
    Tensor::new(out_shape, data)
}

fn scatter_slice(g: &Tensor, shape: &[usize], axis: usize, index: usize) -> Result<Tensor> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        let start = (o * len + index) * inner;
        out.data_mut()[start..start + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central-difference check of d(sum(f(x) * r))/dx for a unary graph
    /// function `f` and a fixed random weighting `r`.
    fn check_unary(shape: &[usize], f: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParameterStore::new();
        let x = store.add("x", rand_tensor(shape, &mut rng)).unwrap();
        let out_shape = {
            let mut g = Graph::new(&store);
            let xv = g.param(x);
            let y = f(&mut g, xv).unwrap();
            g.shape(y).to_vec()
        };
        let weights = rand_tensor(&out_shape, &mut rng);
        let loss = |store: &ParameterStore| -> (f64, Option<Gradients>) {
            let mut g = Graph::new(store);
            let xv = g.param(x);
            let y = f(&mut g, xv).unwrap();
            let r = g.constant(weights.clone());
            let p = g.mul(y, r).unwrap();
            let l = g.sum_all(p);
            let value = g.value(l).item();
            (value, Some(g.backward(l).unwrap()))
        };
        let (_, grads) = loss(&store);
        let analytic = grads.unwrap().get(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..analytic.len() {
            let orig = store.get(x).value.data()[i];
            store.value_mut(x).data_mut()[i] = orig + h;
            let (lp, _) = loss(&store);
            store.value_mut(x).data_mut()[i] = orig - h;
            let (lm, _) = loss(&store);
            store.value_mut(x).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn primitive_jacobians_match_finite_differences() {
        check_unary(&[2, 3], |g, x| Ok(g.relu(x)));
        check_unary(&[2, 3], |g, x| Ok(g.sigmoid(x)));
        check_unary(&[2, 3], |g, x| Ok(g.scale(x, -1.5)));
        check_unary(&[2, 3], |g, x| g.mul(x, x));
        check_unary(&[2, 3], |g, x| g.sub(x, x).and_then(|d| g.add(d, x)));
        check_unary(&[2, 3, 4], |g, x| g.softmax(x, 2, None));
        check_unary(&[2, 3, 4], |g, x| g.softmax(x, 1, None));
        let mask = Tensor::new(vec![1, 1, 4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        check_unary(&[2, 3, 4], move |g, x| g.softmax(x, 2, Some(&mask)));
        check_unary(&[3, 5], |g, x| Ok(g.layer_norm(x, 1e-5)));
        check_unary(&[2, 3], |g, x| g.transpose(x));
        check_unary(&[2, 3], |g, x| g.reshape(x, &[3, 2]));
        check_unary(&[2, 3, 2], |g, x| g.sum_axis(x, 1));
        check_unary(&[2, 3, 2], |g, x| g.slice(x, 1, 2));
        check_unary(&[2, 3], |g, x| {
            let y = g.scale(x, 2.0);
            g.concat(&[x, y], 1)
        });
        check_unary(&[2, 3], |g, x| {
            let y = g.relu(x);
            g.stack(&[x, y], 1)
        });
        check_unary(&[4, 3], |g, x| g.gather(x, &[0, 2, 2, 3], &[2, 2]));
        check_unary(&[2, 3, 4], |g, x| {
            let t = g.transpose(x)?;
            g.matmul(x, t)
        });
        check_unary(&[3, 4], |g, x| {
            let w = g.constant(Tensor::from_rows(&[
                &[1.0, 2.0],
                &[0.5, -1.0],
                &[0.0, 3.0],
                &[1.0, 1.0],
            ]));
            let xs = g.reshape(x, &[1, 3, 4])?;
            g.matmul(xs, w)
        });
        check_unary(&[4, 2], |g, w| {
            let a = g.constant(
                Tensor::new(vec![2, 3, 4], (0..24).map(|i| (i as f64).cos()).collect()).unwrap(),
            );
            g.matmul(a, w)
        });
        check_unary(&[3], |g, v| {
            let a =
                g.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
            g.mul(a, v)
        });
        check_unary(&[2, 4], |g, x| {
            let l = g.cross_entropy(x, &[1, 3])?;
            g.reshape(l, &[1])
        });
    }

    #[test]
    fn linear_case_gradient() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::from_rows(&[&[0.7, -0.2]])).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let x = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let y = g.matmul(wv, x).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn sigmoid_of_zero_input_has_zero_weight_gradient() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::scalar(1.3)).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let zero = g.constant(Tensor::scalar(0.0));
        let p = g.mul(zero, wv).unwrap();
        let s = g.sigmoid(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_contract_errors() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::zeros(&[2])).unwrap();
        let unused = store.add("unused", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        assert!(matches!(g.backward(wv), Err(Error::Contract(_))));
        let l = g.sum_all(wv);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(matches!(g.backward(l), Err(Error::Usage(_))));

        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(store.get(w).grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_linear_over_independent_subgraphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let a = store.add("a", rand_tensor(&[3, 3], &mut rng)).unwrap();
        let b = store.add("b", rand_tensor(&[3, 3], &mut rng)).unwrap();
        let branch = |g: &mut Graph, id: ParamId| {
            let v = g.param(id);
            let s = g.sigmoid(v);
            let m = g.matmul(s, v).unwrap();
            g.sum_all(m)
        };
        let mut g = Graph::new(&store);
        let la = branch(&mut g, a);
        let lb = branch(&mut g, b);
        let total = g.add(la, lb).unwrap();
        let joint = g.backward(total).unwrap();

        let mut ga = Graph::new(&store);
        let la = branch(&mut ga, a);
        let sep_a = ga.backward(la).unwrap();
        let mut gb = Graph::new(&store);
        let lb = branch(&mut gb, b);
        let sep_b = gb.backward(lb).unwrap();

        assert!(joint.get(a).unwrap().max_abs_diff(sep_a.get(a).unwrap()) <= 1e-12);
        assert!(joint.get(b).unwrap().max_abs_diff(sep_b.get(b).unwrap()) <= 1e-12);
    }
}
