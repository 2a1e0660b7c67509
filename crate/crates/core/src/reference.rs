//! Scalar brute-force versions of the attention and segregation equations,
//! written with plain nested loops over `Vec<Vec<f64>>` and no shared code
//! with the tensor path. Used as an oracle by tests and the `oracle`
//! command.

use crate::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

/// Rows of a rank-2 tensor.
pub fn rows(t: &Tensor) -> Rows {
    assert_eq!(t.rank(), 2, "reference::rows needs a matrix");
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; a.len()];
    for i in 0..a.len() {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

/// Scaled dot-product attention; `key_valid[j] == false` removes key `j`.
pub fn attention(a: &Rows, b: &Rows, c: &Rows, key_valid: Option<&[bool]>) -> Rows {
    let d = a[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c[0].len()]; a.len()];
    for i in 0..a.len() {
        let mut logits = vec![0.0; b.len()];
        for j in 0..b.len() {
            let mut dot = 0.0;
            for p in 0..d {
                dot += a[i][p] * b[j][p];
            }
            logits[j] = dot * scale;
            if key_valid.is_some_and(|v| !v[j]) {
                logits[j] += -1e9;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let mut total = 0.0;
        for e in &exps {
            total += e;
        }
        for j in 0..b.len() {
            let w = if key_valid.is_some_and(|v| !v[j]) {
                0.0
            } else {
                exps[j] / total
            };
            for col in 0..c[0].len() {
                out[i][col] += w * c[j][col];
            }
        }
    }
    out
}

/// Per-head projection matrices `(W_A, W_B, W_C)`.
pub struct HeadWeights {
    pub w_a: Rows,
    pub w_b: Rows,
    pub w_c: Rows,
}

/// `[head_1 .. head_h] W` where head `i` reads `head_inputs[i]` on the query side.
fn routed_multi_head(
    head_inputs: &[Rows],
    b: &Rows,
    c: &Rows,
    heads: &[HeadWeights],
    w_out: &Rows,
    key_valid: Option<&[bool]>,
) -> Rows {
    let n = head_inputs[0].len();
    let mut joined = vec![Vec::new(); n];
    for (a_h, hw) in head_inputs.iter().zip(heads) {
        let out = attention(
            &matmul(a_h, &hw.w_a),
            &matmul(b, &hw.w_b),
            &matmul(c, &hw.w_c),
            key_valid,
        );
        for (row, head_row) in joined.iter_mut().zip(out) {
            row.extend(head_row);
        }
    }
    matmul(&joined, w_out)
}

pub fn multi_head(
    a: &Rows,
    b: &Rows,
    c: &Rows,
    heads: &[HeadWeights],
    w_out: &Rows,
    key_valid: Option<&[bool]>,
) -> Rows {
    let inputs: Vec<Rows> = heads.iter().map(|_| a.clone()).collect();
    routed_multi_head(&inputs, b, c, heads, w_out, key_valid)
}

/// Gate weights `(U_A, U_B, U_AB)` for one head.
pub struct GateWeights {
    pub u_a: Rows,
    pub u_b: Rows,
    pub u_ab: Rows,
}

/// `sigmoid(relu(a_r U_A + mean(B) U_B) U_AB)` for every row `a_r` of `A`,
/// where the mean runs over the valid rows of `B`.
pub fn gate(a: &Rows, b: &Rows, b_valid: Option<&[bool]>, w: &GateWeights) -> Rows {
    let d = b[0].len();
    let mut ctx = vec![0.0; d];
    let mut count = 0.0;
    for (j, row) in b.iter().enumerate() {
        if b_valid.is_some_and(|v| !v[j]) {
            continue;
        }
        count += 1.0;
        for p in 0..d {
            ctx[p] += row[p];
        }
    }
    for v in &mut ctx {
        *v /= count;
    }
    let ctx_proj = matmul(&vec![ctx], &w.u_b);
    let a_proj = matmul(a, &w.u_a);
    let hidden: Rows = a_proj
        .iter()
        .map(|r| {
            r.iter()
                .zip(&ctx_proj[0])
                .map(|(x, y)| (x + y).max(0.0))
                .collect()
        })
        .collect();
    matmul(&hidden, &w.u_ab)
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect()
}

/// Coordinated-segregation layer without scaffolding: head `i` attends with
/// query input `omega_i * A`, where `omega_i` comes from `A` and `B`.
pub fn cst_layer(
    a: &Rows,
    b: &Rows,
    c: &Rows,
    heads: &[HeadWeights],
    gates: &[GateWeights],
    w_out: &Rows,
    key_valid: Option<&[bool]>,
) -> Rows {
    let inputs: Vec<Rows> = gates
        .iter()
        .map(|gw| {
            let omega = gate(a, b, key_valid, gw);
            a.iter()
                .zip(&omega)
                .map(|(ar, wr)| ar.iter().zip(wr).map(|(x, w)| w * x).collect())
                .collect()
        })
        .collect();
    routed_multi_head(&inputs, b, c, heads, w_out, key_valid)
}
