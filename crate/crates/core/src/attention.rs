//! Scaled dot-product and multi-head attention with the optional
//! residual / layer-norm / feed-forward scaffolding around each layer.
//!
//! Inputs are `[.., rows, features]` tensors; a leading batch axis is
//! carried through every product. Key masks are 1.0/0.0 tensors that
//! broadcast onto the `[.., n_q, n_k]` logits, e.g. `[batch, 1, n_k]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier_uniform, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub use_residual: bool,
    pub use_norm: bool,
    pub use_ffn: bool,
}

impl LayerConfig {
    /// Full scaffolding with `d_ff = 4 * d_model`.
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            d_ff: 4 * d_model,
            use_residual: true,
            use_norm: true,
            use_ffn: true,
        }
    }

    /// Pure multi-head attention with every scaffold flag off.
    pub fn bare(d_model: usize, heads: usize) -> Self {
        Self {
            use_residual: false,
            use_norm: false,
            use_ffn: false,
            ..Self::new(d_model, heads)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.use_ffn && self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Per-head projections `W_A`, `W_B`, `W_C` (each `d_model x d_head`), the
/// output mixer `W` (`heads*d_head x d_model`) and optional scaffolding.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_a: Vec<ParamId>,
    pub w_b: Vec<ParamId>,
    pub w_c: Vec<ParamId>,
    pub w_out: ParamId,
    pub ffn: Option<FeedForwardParams>,
    pub norm1: Option<NormParams>,
    pub norm2: Option<NormParams>,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: &LayerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let proj = |tag: &str, store: &mut ParameterStore, rng: &mut _| {
            (0..cfg.heads)
                .map(|h| {
                    store.add(
                        format!("{prefix}.{tag}.{h}"),
                        xavier_uniform(&[d, dh], d, dh, rng),
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let w_a = proj("w_a", store, rng)?;
        let w_b = proj("w_b", store, rng)?;
        let w_c = proj("w_c", store, rng)?;
        let w_out = store.add(
            format!("{prefix}.w_out"),
            xavier_uniform(&[d, d], d, d, rng),
        )?;
        let norm = |tag: &str, store: &mut ParameterStore| -> Result<NormParams> {
            Ok(NormParams {
                gain: store.add(format!("{prefix}.{tag}.gain"), Tensor::ones(&[d]))?,
                bias: store.add(format!("{prefix}.{tag}.bias"), Tensor::zeros(&[d]))?,
            })
        };
        let norm1 = cfg.use_norm.then(|| norm("norm1", store)).transpose()?;
        let ffn = if cfg.use_ffn {
            Some(FeedForwardParams {
                w1: store.add(
                    format!("{prefix}.ffn.w1"),
                    xavier_uniform(&[d, cfg.d_ff], d, cfg.d_ff, rng),
                )?,
                b1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[cfg.d_ff]))?,
                w2: store.add(
                    format!("{prefix}.ffn.w2"),
                    xavier_uniform(&[cfg.d_ff, d], cfg.d_ff, d, rng),
                )?,
                b2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]))?,
            })
        } else {
            None
        };
        let norm2 = (cfg.use_norm && cfg.use_ffn)
            .then(|| norm("norm2", store))
            .transpose()?;
        Ok(Self {
            w_a,
            w_b,
            w_c,
            w_out,
            ffn,
            norm1,
            norm2,
        })
    }

    pub fn heads(&self) -> usize {
        self.w_a.len()
    }
}

/// Result of a multi-head layer: the layer output and each head's
/// attention weights `[.., n_q, n_k]`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// A validity mask over the rows of `[.., n, d]` tensors, pre-shaped for
/// the three ways layers consume it.
#[derive(Debug, Clone)]
pub struct SeqMask {
    /// `[.., n, 1]`: multiplies rows.
    pub rows: Tensor,
    /// `[.., 1, n]`: broadcasts onto `[.., n_q, n]` attention logits.
    pub keys: Tensor,
    /// `[.., 1, 1]`: reciprocal of the valid-row count per sequence.
    pub inv_counts: Tensor,
}

impl SeqMask {
    pub fn new(mask: &Mask) -> Self {
        let shape = mask.shape();
        let lead = &shape[..shape.len() - 1];
        let n = mask.seq_len();
        let with = |tail: &[usize]| {
            let mut s = lead.to_vec();
            s.extend_from_slice(tail);
            s
        };
        let rows = mask
            .to_tensor_shaped(&with(&[n, 1]))
            .expect("same element count");
        let keys = mask
            .to_tensor_shaped(&with(&[1, n]))
            .expect("same element count");
        let sequences = mask.flags().len() / n;
        let inv = (0..sequences)
            .map(|s| 1.0 / mask.valid_count(s) as f64)
            .collect();
        let inv_counts = Tensor::new(with(&[1, 1]), inv).expect("one count per sequence");
        Self {
            rows,
            keys,
            inv_counts,
        }
    }

    /// `[batch, 1]` validity of position `t` for batch-major masks.
    pub fn step(&self, t: usize) -> Result<Tensor> {
        crate::tensor::slice_axis(&self.rows, self.rows.rank() - 2, t)
    }
}

/// `softmax(A B^T / sqrt(d_head)) C` along the key axis. Returns the output
/// and the attention weights.
pub fn attention_core(
    g: &mut Graph<'_>,
    a: Var,
    b: Var,
    c: Var,
    mask: Option<&Tensor>,
) -> Result<(Var, Var)> {
    let (sa, sb, sc) = (
        g.shape(a).to_vec(),
        g.shape(b).to_vec(),
        g.shape(c).to_vec(),
    );
    let rank = sa.len();
    if rank < 2 || sb.len() != rank || sc.len() != rank {
        return Err(Error::dim("attention_core", &sa, &sb));
    }
    if sa[rank - 1] != sb[rank - 1] {
        return Err(Error::dim("attention_core", &sa, &sb));
    }
    if sb[rank - 2] != sc[rank - 2] {
        return Err(Error::dim("attention_core", &sb, &sc));
    }
    let d_head = sa[rank - 1];
    let bt = g.transpose(b)?;
    let raw = g.matmul(a, bt)?;
    let logits = g.scale(raw, 1.0 / (d_head as f64).sqrt());
    let weights = g.softmax(logits, rank - 1, mask)?;
    let out = g.matmul(weights, c)?;
    Ok((out, weights))
}

/// Multi-head attention where head `i` projects its own query-side input
/// `head_inputs[i]`; `residual` is the layer input added back by the
/// scaffolding. Shared by the plain and segregated layers so both execute
/// the same operation sequence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_routed(
    g: &mut Graph<'_>,
    head_inputs: &[Var],
    residual: Var,
    b: Var,
    c: Var,
    params: &AttentionParams,
    cfg: &LayerConfig,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    if head_inputs.len() != params.heads() || params.heads() != cfg.heads {
        return Err(Error::Config(format!(
            "{} head inputs for {} heads (config says {})",
            head_inputs.len(),
            params.heads(),
            cfg.heads
        )));
    }
    let d = *g.shape(residual).last().unwrap();
    if d != cfg.d_model || *g.shape(b).last().unwrap() != d || *g.shape(c).last().unwrap() != d {
        return Err(Error::dim("multi_head", g.shape(residual), g.shape(b)));
    }
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for (h, &a_h) in head_inputs.iter().enumerate() {
        let (wa, wb, wc) = (
            g.param(params.w_a[h]),
            g.param(params.w_b[h]),
            g.param(params.w_c[h]),
        );
        let qa = g.matmul(a_h, wa)?;
        let kb = g.matmul(b, wb)?;
        let vc = g.matmul(c, wc)?;
        let (out, w) = attention_core(g, qa, kb, vc, mask)?;
        heads.push(out);
        weights.push(w);
    }
    let rank = g.shape(heads[0]).len();
    let joined = g.concat(&heads, rank - 1)?;
    let w_out = g.param(params.w_out);
    let mut x = g.matmul(joined, w_out)?;

    if cfg.use_residual {
        x = g.add(x, residual)?;
    }
    if let Some(n) = &params.norm1 {
        x = affine_norm(g, x, n)?;
    }
    if let Some(f) = &params.ffn {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h1 = g.matmul(x, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, w2)?;
        let mut y = g.add(h2, b2)?;
        if cfg.use_residual {
            y = g.add(y, x)?;
        }
        if let Some(n) = &params.norm2 {
            y = affine_norm(g, y, n)?;
        }
        x = y;
    }
    Ok(AttentionOutput { out: x, weights })
}

fn affine_norm(g: &mut Graph<'_>, x: Var, n: &NormParams) -> Result<Var> {
    let y = g.layer_norm(x, LAYER_NORM_EPS);
    let gain = g.param(n.gain);
    let bias = g.param(n.bias);
    let y = g.mul(y, gain)?;
    g.add(y, bias)
}

/// `[head_1, ..., head_h] W` with `head_i = attention_core(A W_Ai, B W_Bi, C W_Ci)`,
/// followed by the scaffolding enabled in `cfg`.
pub fn multi_head(
    g: &mut Graph<'_>,
    a: Var,
    b: Var,
    c: Var,
    params: &AttentionParams,
    cfg: &LayerConfig,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    let inputs = vec![a; params.heads()];
    multi_head_routed(g, &inputs, a, b, c, params, cfg, mask)
}

pub fn self_attention(
    g: &mut Graph<'_>,
    x: Var,
    params: &AttentionParams,
    cfg: &LayerConfig,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    multi_head(g, x, x, x, params, cfg, mask)
}

/// Queries from `x`, keys and values from `y` (masked by `mask_y`).
pub fn guided_attention(
    g: &mut Graph<'_>,
    x: Var,
    y: Var,
    params: &AttentionParams,
    cfg: &LayerConfig,
    mask_y: Option<&Tensor>,
) -> Result<AttentionOutput> {
    multi_head(g, x, y, y, params, cfg, mask_y)
}
