//! Feature composition decoder: recurrent encoding of an attended
//! sequence, alpha-weighted fusion, and the beta-weighted projection that
//! feeds the answer classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SeqMask;
use crate::autodiff::{xavier_uniform, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on `sum(alpha) == 1` accepted by [`weighted_fusion`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    /// Last recurrent state of the sequence.
    #[default]
    Encode,
    /// Convex combination of the sequence with MLP-derived weights.
    Weighted,
}

impl std::str::FromStr for Decoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "encode" => Ok(Self::Encode),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Config(format!("unknown decoder {other}"))),
        }
    }
}

/// `E_t = relu(A_t W_in + E_{t-1} W_hid)`, no bias.
#[derive(Debug, Clone)]
pub struct RecurrentCell {
    pub w_in: ParamId,
    pub w_hid: ParamId,
}

impl RecurrentCell {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_in = store.add(
            format!("{prefix}.w_in"),
            xavier_uniform(&[d_in, d_hidden], d_in, d_hidden, rng),
        )?;
        let w_hid = store.add(
            format!("{prefix}.w_hid"),
            xavier_uniform(&[d_hidden, d_hidden], d_hidden, d_hidden, rng),
        )?;
        Ok(Self { w_in, w_hid })
    }

    pub fn hidden(&self, store: &ParameterStore) -> usize {
        store.get(self.w_hid).value.shape()[0]
    }
}

/// Splits `[B, n, d]` into `n` tensors of shape `[B, d]`.
pub fn sequence_steps(g: &mut Graph<'_>, x: Var) -> Result<Vec<Var>> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("sequence_steps", &shape, &[]));
    }
    (0..shape[1]).map(|t| g.slice(x, 1, t)).collect()
}

/// Every state `E_1..E_n` of the recurrent scan over `steps` (each
/// `[B, d_in]`). With a mask, invalid steps carry the previous state
/// forward unchanged.
pub fn encode_states(
    g: &mut Graph<'_>,
    steps: &[Var],
    mask: Option<&SeqMask>,
    cell: &RecurrentCell,
) -> Result<Vec<Var>> {
    let first = *steps
        .first()
        .ok_or_else(|| Error::Contract("encode_sequence needs at least one step".into()))?;
    let d_in = *g.shape(first).last().unwrap();
    if steps.iter().any(|&s| g.shape(s).last() != Some(&d_in)) {
        return Err(Error::Contract(
            "encode_sequence steps differ in feature extent".into(),
        ));
    }
    let (w_in, w_hid) = (g.param(cell.w_in), g.param(cell.w_hid));
    let mut states: Vec<Var> = Vec::with_capacity(steps.len());
    for (t, &a_t) in steps.iter().enumerate() {
        let mut pre = g.matmul(a_t, w_in)?;
        if let Some(&prev) = states.last() {
            let carried = g.matmul(prev, w_hid)?;
            pre = g.add(pre, carried)?;
        }
        let fresh = g.relu(pre);
        let next = match mask {
            Some(m) => {
                let keep = m.step(t)?;
                let skip = keep.map(|v| 1.0 - v);
                let keep = g.constant(keep);
                let kept = g.mul(fresh, keep)?;
                match states.last() {
                    Some(&prev) => {
                        let skip = g.constant(skip);
                        let held = g.mul(prev, skip)?;
                        g.add(kept, held)?
                    }
                    None => kept,
                }
            }
            None => fresh,
        };
        states.push(next);
    }
    Ok(states)
}

/// `F = E_n`, the final recurrent state.
pub fn encode_sequence(
    g: &mut Graph<'_>,
    steps: &[Var],
    mask: Option<&SeqMask>,
    cell: &RecurrentCell,
) -> Result<Var> {
    Ok(*encode_states(g, steps, mask, cell)?.last().unwrap())
}

/// One hidden relu layer over the concatenated encodings, `n` output logits.
#[derive(Debug, Clone)]
pub struct AlphaMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AlphaMlp {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        n: usize,
        d_hidden: usize,
        d_mlp: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d_cat = n * d_hidden;
        Ok(Self {
            w1: store.add(
                format!("{prefix}.w1"),
                xavier_uniform(&[d_cat, d_mlp], d_cat, d_mlp, rng),
            )?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_mlp]))?,
            w2: store.add(
                format!("{prefix}.w2"),
                xavier_uniform(&[d_mlp, n], d_mlp, n, rng),
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[n]))?,
        })
    }
}

/// `alpha = softmax(MLP([E_1, ..., E_n]))`, shape `[B, n]`. Masked steps get
/// weight exactly 0.
pub fn attention_weights_alpha(
    g: &mut Graph<'_>,
    encodings: &[Var],
    mlp: &AlphaMlp,
    mask: Option<&SeqMask>,
) -> Result<Var> {
    if encodings.is_empty() {
        return Err(Error::Contract("alpha needs at least one encoding".into()));
    }
    let joined = g.concat(encodings, 1)?;
    let (w1, b1, w2, b2) = (
        g.param(mlp.w1),
        g.param(mlp.b1),
        g.param(mlp.w2),
        g.param(mlp.b2),
    );
    let h = g.matmul(joined, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let logits = g.matmul(h, w2)?;
    let logits = g.add(logits, b2)?;
    let n = encodings.len();
    let lshape = g.shape(logits).to_vec();
    if lshape[1] != n {
        return Err(Error::dim(
            "attention_weights_alpha",
            &lshape,
            &[lshape[0], n],
        ));
    }
    let key_mask = match mask {
        Some(m) => Some(m.rows.reshape(&[lshape[0], n])?),
        None => None,
    };
    g.softmax(logits, 1, key_mask.as_ref())
}

/// `F = sum_i alpha_i A_i` for `alpha` of shape `[B, n]` and `n` tensors of
/// shape `[B, d]`.
pub fn weighted_fusion(g: &mut Graph<'_>, attended: &[Var], alpha: Var) -> Result<Var> {
    let ashape = g.shape(alpha).to_vec();
    if ashape.len() != 2 || ashape[1] != attended.len() {
        return Err(Error::Contract(format!(
            "alpha of shape {ashape:?} for {} tensors",
            attended.len()
        )));
    }
    for row in g.value(alpha).data().chunks(ashape[1]) {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&w| w < 0.0) {
            return Err(Error::Contract(format!(
                "alpha {row:?} is not on the simplex"
            )));
        }
    }
    let mut fused: Option<Var> = None;
    for (i, &a_i) in attended.iter().enumerate() {
        let w = g.slice(alpha, 1, i)?;
        let w = g.reshape(w, &[ashape[0], 1])?;
        let term = g.mul(a_i, w)?;
        fused = Some(match fused {
            Some(f) => g.add(f, term)?,
            None => term,
        });
    }
    Ok(fused.unwrap())
}

/// Per-stream decoder weights.
#[derive(Debug, Clone)]
pub struct StreamDecoder {
    pub cell: RecurrentCell,
    pub alpha: Option<AlphaMlp>,
}

impl StreamDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        kind: Decoder,
        d: usize,
        n_max: usize,
        d_mlp: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cell = RecurrentCell::init(store, &format!("{prefix}.cell"), d, d, rng)?;
        let alpha = match kind {
            Decoder::Encode => None,
            Decoder::Weighted => Some(AlphaMlp::init(
                store,
                &format!("{prefix}.alpha"),
                n_max,
                d,
                d_mlp,
                rng,
            )?),
        };
        Ok(Self { cell, alpha })
    }
}

/// Reduces an attended stream `[B, n, d]` to `[B, d]`; returns the alpha
/// weights used by the weighted decoder.
pub fn decode_stream(
    g: &mut Graph<'_>,
    x: Var,
    mask: Option<&SeqMask>,
    dec: &StreamDecoder,
) -> Result<(Var, Option<Var>)> {
    let steps = sequence_steps(g, x)?;
    let states = encode_states(g, &steps, mask, &dec.cell)?;
    match &dec.alpha {
        None => Ok((*states.last().unwrap(), None)),
        Some(mlp) => {
            let alpha = attention_weights_alpha(g, &states, mlp, mask)?;
            Ok((weighted_fusion(g, &steps, alpha)?, Some(alpha)))
        }
    }
}

/// Beta logits, per-stream projections `W_i` (`d x d_z`), the shared
/// `W_{k+1}` (`d_z x d_z`) and the answer classifier.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub beta_logits: ParamId,
    pub proj: Vec<ParamId>,
    pub w_final: ParamId,
    pub classifier: ParamId,
    pub classifier_bias: ParamId,
}

impl FusionParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        streams: usize,
        d: usize,
        d_z: usize,
        answers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if streams == 0 {
            return Err(Error::Config("fusion needs at least one stream".into()));
        }
        let beta_logits = store.add(format!("{prefix}.beta"), Tensor::zeros(&[streams]))?;
        let proj = (0..streams)
            .map(|i| {
                store.add(
                    format!("{prefix}.w.{i}"),
                    xavier_uniform(&[d, d_z], d, d_z, rng),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let w_final = store.add(
            format!("{prefix}.w_final"),
            xavier_uniform(&[d_z, d_z], d_z, d_z, rng),
        )?;
        // small classifier so initial logits are close to uniform
        let classifier = store.add(
            format!("{prefix}.classifier"),
            xavier_uniform(&[d_z, answers], d_z, answers, rng).map(|v| 0.1 * v),
        )?;
        let classifier_bias = store.add(
            format!("{prefix}.classifier_bias"),
            Tensor::zeros(&[answers]),
        )?;
        Ok(Self {
            beta_logits,
            proj,
            w_final,
            classifier,
            classifier_bias,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    pub z: Var,
    pub logits: Var,
    pub beta: Var,
    pub alphas: Vec<Option<Var>>,
}

/// `z = (sum_i beta_i F_i W_i) W_{k+1}` for an explicit `beta` var of shape `[k]`.
pub fn project_with_beta(
    g: &mut Graph<'_>,
    streams: &[Var],
    beta: Var,
    proj: &[ParamId],
    w_final: ParamId,
) -> Result<Var> {
    if streams.len() != proj.len() || g.shape(beta) != [streams.len()] {
        return Err(Error::Contract(format!(
            "{} streams, {} projections, beta of shape {:?}",
            streams.len(),
            proj.len(),
            g.shape(beta)
        )));
    }
    let mut acc: Option<Var> = None;
    for (i, (&f, &w)) in streams.iter().zip(proj).enumerate() {
        let w = g.param(w);
        let projected = g.matmul(f, w)?;
        let b = g.slice(beta, 0, i)?;
        let term = g.mul(projected, b)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let w_final = g.param(w_final);
    g.matmul(acc.unwrap(), w_final)
}

/// `beta = softmax(beta_logits)`, then [`project_with_beta`] and the classifier.
pub fn final_projection(
    g: &mut Graph<'_>,
    streams: &[Var],
    params: &FusionParams,
) -> Result<FusedRepresentation> {
    let logits_b = g.param(params.beta_logits);
    let beta = g.softmax(logits_b, 0, None)?;
    let z = project_with_beta(g, streams, beta, &params.proj, params.w_final)?;
    let (c, cb) = (g.param(params.classifier), g.param(params.classifier_bias));
    let logits = g.matmul(z, c)?;
    let logits = g.add(logits, cb)?;
    Ok(FusedRepresentation {
        z,
        logits,
        beta,
        alphas: Vec::new(),
    })
}
