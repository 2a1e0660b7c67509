//! The dual-stream answer model.
//!
//! Tokens are embedded and run through a recurrent encoder; regions are
//! projected to the model width. The question stream is a stack of
//! self-attention layers. Each image-stream layer self-attends over the
//! regions and then attends to the final question representation. Both
//! streams are reduced by the fusion decoder and classified.
//!
//! Where gates go depends on the variant and stacking:
//!
//! | variant | stacking | question stream      | image self        | image guided      |
//! |---------|----------|----------------------|-------------------|-------------------|
//! | vanilla | any      | none                 | none              | none              |
//! | sst     | cset     | every layer          | every layer       | none              |
//! | cst     | cset     | every layer          | every layer (q)   | every layer (q)   |
//! | sst/cst | eset     | one end gate         | one end gate on the image stream      |
//!
//! `(q)` marks gates whose context is the pooled question. SST image gates
//! take their context from [`GateContext`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionParams, LayerConfig, SeqMask};
use crate::autodiff::{xavier_uniform, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::fusion::{
    decode_stream, encode_sequence, final_projection, sequence_steps, Decoder, FusionParams,
    RecurrentCell, StreamDecoder,
};
use crate::segregation::{
    end_segregate, pool_context, segregated_attention, GateMode, GateParams, GateTelemetry,
    Stacking, Variant,
};
use crate::tensor::Tensor;

use super::data::VqaBatch;

/// Coordinating summary for SST image-stream gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateContext {
    /// Masked mean of the current region features.
    #[default]
    ImageBar,
    /// Final recurrent state over the projected regions.
    EncImage,
    /// Masked mean of the final question representation.
    Question,
}

impl std::str::FromStr for GateContext {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "image_bar" => Ok(Self::ImageBar),
            "enc_image" => Ok(Self::EncImage),
            "question" => Ok(Self::Question),
            other => Err(Error::Config(format!("unknown gate context {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    /// Hidden width of each gate (`U_A`, `U_B` are `d x d_gate`).
    pub d_gate: usize,
    pub d_img: usize,
    pub d_emb: usize,
    pub vocab: usize,
    pub answers: usize,
    pub max_regions: usize,
    pub max_tokens: usize,
    /// Width of the fused representation `z`.
    pub d_z: usize,
    /// Hidden width of the alpha MLP in the weighted decoder.
    pub d_mlp: usize,
    pub variant: Variant,
    pub stacking: Stacking,
    pub decoder: Decoder,
    pub gate_context: GateContext,
    /// Also coordinate the question stream's gates with the image summary.
    pub coordinate_both: bool,
    pub hard_threshold: Option<f64>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            depth: 2,
            d_ff: 128,
            d_gate: 16,
            d_img: 32,
            d_emb: 16,
            vocab: 20,
            answers: 8,
            max_regions: 10,
            max_tokens: 8,
            d_z: 128,
            d_mlp: 32,
            variant: Variant::Sst,
            stacking: Stacking::Cset,
            decoder: Decoder::Encode,
            gate_context: GateContext::ImageBar,
            coordinate_both: false,
            hard_threshold: None,
            seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            depth: 2,
            d_ff: 2048,
            d_gate: 64,
            d_img: 2048,
            d_emb: 300,
            vocab: 10_000,
            answers: 3129,
            max_regions: 100,
            max_tokens: 14,
            d_z: 1024,
            d_mlp: 512,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("depth", self.depth),
            ("d_ff", self.d_ff),
            ("d_gate", self.d_gate),
            ("d_img", self.d_img),
            ("d_emb", self.d_emb),
            ("vocab", self.vocab),
            ("answers", self.answers),
            ("max_regions", self.max_regions),
            ("max_tokens", self.max_tokens),
            ("d_z", self.d_z),
            ("d_mlp", self.d_mlp),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        if let Some(t) = self.hard_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!(
                    "hard_threshold must lie in (0,1), got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            d_ff: self.d_ff,
            ..LayerConfig::new(self.d_model, self.heads)
        }
    }

    /// Gate mode for inference under this config.
    pub fn eval_mode(&self) -> GateMode {
        match self.hard_threshold {
            Some(t) => GateMode::Hard(t),
            None => GateMode::Soft,
        }
    }
}

#[derive(Debug, Clone)]
struct QuestionLayer {
    attn: AttentionParams,
    gate: Option<GateParams>,
}

#[derive(Debug, Clone)]
struct ImageLayer {
    self_attn: AttentionParams,
    self_gate: Option<GateParams>,
    guided_attn: AttentionParams,
    guided_gate: Option<GateParams>,
}

#[derive(Debug, Clone)]
pub struct VqaModel {
    pub cfg: ModelConfig,
    embed: ParamId,
    q_cell: RecurrentCell,
    img_proj: ParamId,
    img_bias: ParamId,
    enc_image: Option<RecurrentCell>,
    q_layers: Vec<QuestionLayer>,
    i_layers: Vec<ImageLayer>,
    q_end: Option<GateParams>,
    i_end: Option<GateParams>,
    q_dec: StreamDecoder,
    i_dec: StreamDecoder,
    fusion: FusionParams,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub beta: Var,
    pub alphas: [Option<Var>; 2],
    pub telemetry: GateTelemetry,
}

/// Builds a model for any variant. Gate weights draw from their own
/// random stream, so models that differ only in variant share every
/// other weight.
pub fn build_model(cfg: &ModelConfig, store: &mut ParameterStore) -> Result<VqaModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gate_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a7e_5eed);
    let lc = cfg.layer_config();
    let (d, h) = (cfg.d_model, cfg.heads);
    let gated = cfg.variant != Variant::Vanilla;
    let per_layer = gated && cfg.stacking == Stacking::Cset;

    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let table = (0..cfg.vocab * cfg.d_emb)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let embed = store.add("embed", Tensor::new(vec![cfg.vocab, cfg.d_emb], table)?)?;
    let q_cell = RecurrentCell::init(store, "question.encoder", cfg.d_emb, d, &mut rng)?;
    let img_proj = store.add(
        "image.proj",
        xavier_uniform(&[cfg.d_img, d], cfg.d_img, d, &mut rng),
    )?;
    let img_bias = store.add("image.bias", Tensor::zeros(&[d]))?;

    let mut gate = |store: &mut ParameterStore, name: String, heads: usize| {
        GateParams::init(store, &name, d, cfg.d_gate, heads, &mut gate_rng)
    };
    let mut q_layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let attn = AttentionParams::init(store, &format!("question.layer{l}.attn"), &lc, &mut rng)?;
        let gate = per_layer
            .then(|| gate(store, format!("question.layer{l}.gate"), h))
            .transpose()?;
        q_layers.push(QuestionLayer { attn, gate });
    }
    let mut i_layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let self_attn =
            AttentionParams::init(store, &format!("image.layer{l}.self"), &lc, &mut rng)?;
        let guided_attn =
            AttentionParams::init(store, &format!("image.layer{l}.guided"), &lc, &mut rng)?;
        let self_gate = per_layer
            .then(|| gate(store, format!("image.layer{l}.self_gate"), h))
            .transpose()?;
        let guided_gate = (per_layer && cfg.variant == Variant::Cst)
            .then(|| gate(store, format!("image.layer{l}.guided_gate"), h))
            .transpose()?;
        i_layers.push(ImageLayer {
            self_attn,
            self_gate,
            guided_attn,
            guided_gate,
        });
    }
    let end = gated && cfg.stacking == Stacking::Eset;
    let q_end = end
        .then(|| gate(store, "question.end_gate".into(), 1))
        .transpose()?;
    let i_end = end
        .then(|| gate(store, "image.end_gate".into(), 1))
        .transpose()?;
    let enc_image = (cfg.variant == Variant::Sst && cfg.gate_context == GateContext::EncImage)
        .then(|| RecurrentCell::init(store, "image.context_encoder", d, d, &mut gate_rng))
        .transpose()?;

    let q_dec = StreamDecoder::init(
        store,
        "decoder.question",
        cfg.decoder,
        d,
        cfg.max_tokens,
        cfg.d_mlp,
        &mut rng,
    )?;
    let i_dec = StreamDecoder::init(
        store,
        "decoder.image",
        cfg.decoder,
        d,
        cfg.max_regions,
        cfg.d_mlp,
        &mut rng,
    )?;
    let fusion = FusionParams::init(store, "fusion", 2, d, cfg.d_z, cfg.answers, &mut rng)?;
    Ok(VqaModel {
        cfg: *cfg,
        embed,
        q_cell,
        img_proj,
        img_bias,
        enc_image,
        q_layers,
        i_layers,
        q_end,
        i_end,
        q_dec,
        i_dec,
        fusion,
    })
}

fn build_checked(cfg: &ModelConfig, store: &mut ParameterStore, want: Variant) -> Result<VqaModel> {
    if cfg.variant != want {
        return Err(Error::Config(format!(
            "expected variant {want:?}, config says {:?}",
            cfg.variant
        )));
    }
    build_model(cfg, store)
}

/// Image-stream gates coordinated by the question.
pub fn build_cst_model(cfg: &ModelConfig, store: &mut ParameterStore) -> Result<VqaModel> {
    build_checked(cfg, store, Variant::Cst)
}

/// Image-stream gates derived from the configured [`GateContext`].
pub fn build_sst_model(cfg: &ModelConfig, store: &mut ParameterStore) -> Result<VqaModel> {
    build_checked(cfg, store, Variant::Sst)
}

pub fn build_vanilla_model(cfg: &ModelConfig, store: &mut ParameterStore) -> Result<VqaModel> {
    build_checked(cfg, store, Variant::Vanilla)
}

impl VqaModel {
    fn check_batch(&self, batch: &VqaBatch) -> Result<()> {
        let c = &self.cfg;
        let b = batch.len();
        let want = [b, c.max_regions, c.d_img];
        if batch.regions.shape() != want {
            return Err(Error::dim(
                "model input regions",
                batch.regions.shape(),
                &want,
            ));
        }
        if batch.region_mask.shape() != [b, c.max_regions] {
            return Err(Error::dim(
                "model region mask",
                batch.region_mask.shape(),
                &[b, c.max_regions],
            ));
        }
        if batch.token_mask.shape() != [b, c.max_tokens] || batch.tokens.len() != b * c.max_tokens {
            return Err(Error::dim(
                "model tokens",
                batch.token_mask.shape(),
                &[b, c.max_tokens],
            ));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocab {}",
                c.vocab
            )));
        }
        if let Some(&bad) = batch.answers.iter().find(|&&a| a >= c.answers) {
            return Err(Error::Contract(format!(
                "answer {bad} outside {} answers",
                c.answers
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &VqaBatch,
        mode: GateMode,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let c = &self.cfg;
        let lc = c.layer_config();
        let b = batch.len();
        let qmask = SeqMask::new(&batch.token_mask);
        let rmask = SeqMask::new(&batch.region_mask);
        let mut tel = GateTelemetry::default();

        // inputs, re-zeroed at padding
        let q_rows = g.constant(qmask.rows.clone());
        let r_rows = g.constant(rmask.rows.clone());
        let table = g.param(self.embed);
        let emb = g.gather(table, &batch.tokens, &[b, c.max_tokens])?;
        let emb = g.mul(emb, q_rows)?;
        let steps = sequence_steps(g, emb)?;
        let states = crate::fusion::encode_states(g, &steps, Some(&qmask), &self.q_cell)?;
        let q0 = g.stack(&states, 1)?;
        let mut q = g.mul(q0, q_rows)?;

        let regions = g.constant(batch.regions.clone());
        let regions = g.mul(regions, r_rows)?;
        let (w, bias) = (g.param(self.img_proj), g.param(self.img_bias));
        let r0 = g.matmul(regions, w)?;
        let r0 = g.add(r0, bias)?;
        let r0 = g.mul(r0, r_rows)?;
        let mut r = r0;

        let image_summary = if c.coordinate_both && c.variant != Variant::Vanilla {
            Some(pool_context(g, r0, Some(&rmask))?)
        } else {
            None
        };

        for layer in &self.q_layers {
            q = match &layer.gate {
                Some(gate) => {
                    let ctx = match image_summary {
                        Some(s) => s,
                        None => pool_context(g, q, Some(&qmask))?,
                    };
                    let seg = segregated_attention(
                        g,
                        q,
                        q,
                        q,
                        ctx,
                        &layer.attn,
                        gate,
                        &lc,
                        Some(&qmask),
                        Some(&qmask),
                        mode,
                        &mut tel,
                    )?;
                    seg.out
                }
                None => multi_head(g, q, q, q, &layer.attn, &lc, Some(&qmask.keys))?.out,
            };
        }
        if let Some(gate) = &self.q_end {
            let ctx = match image_summary {
                Some(s) => s,
                None => pool_context(g, q, Some(&qmask))?,
            };
            q = end_segregate(g, q, ctx, gate, Some(&qmask), mode, &mut tel)?;
        }

        let q_summary = match c.variant {
            Variant::Vanilla => None,
            _ => Some(pool_context(g, q, Some(&qmask))?),
        };
        let enc = match &self.enc_image {
            Some(cell) => {
                let steps = sequence_steps(g, r0)?;
                let e = encode_sequence(g, &steps, Some(&rmask), cell)?;
                Some(g.reshape(e, &[b, 1, c.d_model])?)
            }
            None => None,
        };
        let image_context = |g: &mut Graph<'_>, r: Var| -> Result<Var> {
            match (c.variant, c.gate_context) {
                (Variant::Sst, GateContext::ImageBar) => pool_context(g, r, Some(&rmask)),
                (Variant::Sst, GateContext::EncImage) => {
                    Ok(enc.expect("context encoder built for enc_image"))
                }
                _ => Ok(q_summary.expect("question summary for gated variants")),
            }
        };

        for layer in &self.i_layers {
            r = match &layer.self_gate {
                Some(gate) => {
                    let ctx = image_context(g, r)?;
                    let seg = segregated_attention(
                        g,
                        r,
                        r,
                        r,
                        ctx,
                        &layer.self_attn,
                        gate,
                        &lc,
                        Some(&rmask),
                        Some(&rmask),
                        mode,
                        &mut tel,
                    )?;
                    seg.out
                }
                None => multi_head(g, r, r, r, &layer.self_attn, &lc, Some(&rmask.keys))?.out,
            };
            r = match &layer.guided_gate {
                Some(gate) => {
                    let ctx = q_summary.expect("question summary for gated variants");
                    let seg = segregated_attention(
                        g,
                        r,
                        q,
                        q,
                        ctx,
                        &layer.guided_attn,
                        gate,
                        &lc,
                        Some(&rmask),
                        Some(&qmask),
                        mode,
                        &mut tel,
                    )?;
                    seg.out
                }
                None => multi_head(g, r, q, q, &layer.guided_attn, &lc, Some(&qmask.keys))?.out,
            };
        }
        if let Some(gate) = &self.i_end {
            let ctx = image_context(g, r)?;
            r = end_segregate(g, r, ctx, gate, Some(&rmask), mode, &mut tel)?;
        }

        let (fq, aq) = decode_stream(g, q, Some(&qmask), &self.q_dec)?;
        let (fi, ai) = decode_stream(g, r, Some(&rmask), &self.i_dec)?;
        let fused = final_projection(g, &[fq, fi], &self.fusion)?;
        Ok(ForwardOutput {
            logits: fused.logits,
            beta: fused.beta,
            alphas: [aq, ai],
            telemetry: tel,
        })
    }

    /// Mean cross-entropy over the batch, with the forward output.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        batch: &VqaBatch,
        mode: GateMode,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, batch, mode)?;
        let loss = g.cross_entropy(out.logits, &batch.answers)?;
        Ok((loss, out))
    }
}
