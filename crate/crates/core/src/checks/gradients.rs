use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_core, multi_head, AttentionParams, LayerConfig, SeqMask};
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParameterStore, Var};
use crate::error::Result;
use crate::fusion::{decode_stream, final_projection, Decoder, FusionParams, StreamDecoder};
use crate::segregation::{
    cst_layer, gate_coefficients, run_stack, sst_layer, Coordinator, GateMode, GateParams,
    GateTelemetry, SegregatedStack, SegregationConfig, Stacking, Variant,
};
use crate::tensor::{Mask, Tensor};
use crate::vqa::{build_model, generate_dataset, GateContext, ModelConfig, SyntheticTaskSpec};

/// Smallest gradient magnitude resolvable end to end. Rounding in the full
/// forward pass leaves about 1e-11 of absolute noise in a central
/// difference with h = 1e-5, so entries below this are redrawn.
pub const MODEL_RESOLUTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradientSuiteConfig {
    pub tol: f64,
    pub step: f64,
    pub seed: u64,
    /// Probes per parameter tensor.
    pub probes_per_tensor: usize,
    /// Doubles every analytic gradient; the suite must then fail.
    pub corrupt: bool,
}

impl Default for GradientSuiteConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
            seed: 0,
            probes_per_tensor: 2,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("positive extents")
}

/// `sum(out * r)` for a fixed random `r`: checks the vector-Jacobian
/// product of `out` along one direction.
fn project(g: &mut Graph<'_>, out: Var, direction: &Tensor) -> Result<Var> {
    let r = g.constant(direction.clone());
    let p = g.mul(out, r)?;
    Ok(g.sum_all(p))
}

struct Runner {
    cfg: GradientSuiteConfig,
    rng: ChaCha8Rng,
    cases: Vec<GradientCase>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, store: &mut ParameterStore, loss: F) -> Result<()>
    where
        F: Fn(&mut Graph<'_>) -> Result<Var>,
    {
        self.check_resolved(name, store, 0.0, loss)
    }

    fn check_resolved<F>(
        &mut self,
        name: &str,
        store: &mut ParameterStore,
        resolution: f64,
        loss: F,
    ) -> Result<()>
    where
        F: Fn(&mut Graph<'_>) -> Result<Var>,
    {
        let gc = GradCheckConfig {
            probes: self.cfg.probes_per_tensor * store.len(),
            step: self.cfg.step,
            tol: self.cfg.tol,
            seed: self.rng.random(),
            corrupt: self.cfg.corrupt,
            resolution,
            skip_kinks: true,
        };
        let report = grad_check(loss, store, &gc)?;
        self.cases.push(GradientCase {
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    fn layers(&mut self) -> Result<()> {
        let rng = &mut self.rng;
        let (x, y) = (rand_tensor(&[2, 3, 16], rng), rand_tensor(&[2, 4, 16], rng));
        let y_mask = SeqMask::new(&Mask::from_lengths(&[4, 2], 4)?);
        let x_mask = SeqMask::new(&Mask::from_lengths(&[3, 2], 3)?);
        let dir_x = rand_tensor(&[2, 3, 16], rng);
        let dir_core = rand_tensor(&[2, 3, 16], rng);

        // attention core with learnable inputs
        let mut store = ParameterStore::new();
        let (pa, pb, pc) = (
            store.add("a", x.clone())?,
            store.add("b", y.clone())?,
            store.add("c", y.clone())?,
        );
        self.check("attention_core", &mut store, |g| {
            let (a, b, c) = (g.param(pa), g.param(pb), g.param(pc));
            let (out, _) = attention_core(g, a, b, c, Some(&y_mask.keys))?;
            project(g, out, &dir_core)
        })?;

        for (name, cfg) in [
            ("multi_head", LayerConfig::bare(16, 4)),
            ("multi_head_with_scaffolding", LayerConfig::new(16, 4)),
        ] {
            let mut store = ParameterStore::new();
            let attn = AttentionParams::init(&mut store, "attn", &cfg, &mut self.rng)?;
            self.check(name, &mut store, |g| {
                let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
                let out = multi_head(g, a, b, b, &attn, &cfg, Some(&y_mask.keys))?.out;
                project(g, out, &dir_x)
            })?;
        }

        let mut store = ParameterStore::new();
        let gate = GateParams::init(&mut store, "gate", 16, 6, 1, &mut self.rng)?;
        self.check("gate", &mut store, |g| {
            let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
            let w = gate_coefficients(g, a, b, Some(&y_mask), &gate, 0, GateMode::Soft)?;
            project(g, w, &dir_x)
        })?;

        let cfg = LayerConfig::new(16, 4);
        let mut store = ParameterStore::new();
        let attn = AttentionParams::init(&mut store, "attn", &cfg, &mut self.rng)?;
        let gate = GateParams::init(&mut store, "gate", 16, 4, 4, &mut self.rng)?;
        self.check("sst_layer", &mut store, |g| {
            let a = g.constant(x.clone());
            let out = sst_layer(
                g,
                a,
                &attn,
                &gate,
                &cfg,
                Some(&x_mask),
                GateMode::Soft,
                &mut GateTelemetry::default(),
            )?;
            project(g, out.out, &dir_x)
        })?;
        self.check("cst_layer", &mut store, |g| {
            let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
            let out = cst_layer(
                g,
                a,
                b,
                b,
                &attn,
                &gate,
                &cfg,
                Some(&x_mask),
                Some(&y_mask),
                GateMode::Soft,
                &mut GateTelemetry::default(),
            )?;
            project(g, out.out, &dir_x)
        })?;

        for stacking in [Stacking::Cset, Stacking::Eset] {
            for variant in [Variant::Sst, Variant::Cst] {
                let seg = SegregationConfig {
                    variant,
                    stacking,
                    depth: 2,
                    hard_threshold: None,
                };
                let mut store = ParameterStore::new();
                let stack = SegregatedStack::init(
                    &mut store,
                    "stack",
                    LayerConfig::new(16, 4),
                    seg,
                    &mut self.rng,
                )?;
                let name = format!("stack_{variant:?}_{stacking:?}").to_lowercase();
                self.check(&name, &mut store, |g| {
                    let a = g.constant(x.clone());
                    let coord = match variant {
                        Variant::Cst => Some(Coordinator {
                            tensor: g.constant(y.clone()),
                            mask: Some(&y_mask),
                        }),
                        _ => None,
                    };
                    let out = run_stack(
                        g,
                        a,
                        &stack,
                        coord,
                        Some(&x_mask),
                        GateMode::Soft,
                        &mut GateTelemetry::default(),
                    )?;
                    project(g, out, &dir_x)
                })?;
            }
        }

        for decoder in [Decoder::Encode, Decoder::Weighted] {
            let mut store = ParameterStore::new();
            let q = StreamDecoder::init(&mut store, "q", decoder, 16, 3, 6, &mut self.rng)?;
            let i = StreamDecoder::init(&mut store, "i", decoder, 16, 4, 6, &mut self.rng)?;
            let fp = FusionParams::init(&mut store, "fusion", 2, 16, 6, 5, &mut self.rng)?;
            *store.value_mut(fp.beta_logits) = rand_tensor(&[2], &mut self.rng);
            let name = format!("decoder_{decoder:?}").to_lowercase();
            self.check(&name, &mut store, |g| {
                let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
                let (fq, _) = decode_stream(g, a, Some(&x_mask), &q)?;
                let (fi, _) = decode_stream(g, b, Some(&y_mask), &i)?;
                let out = final_projection(g, &[fq, fi], &fp)?;
                g.cross_entropy(out.logits, &[4, 1])
            })?;
        }
        Ok(())
    }

    fn models(&mut self) -> Result<()> {
        let files = generate_dataset(&SyntheticTaskSpec::default(), 8, 2)?;
        let batch = files.data.batch(&[0, 1, 2, 3])?;
        let direction = rand_tensor(&[4, 8], &mut self.rng);
        let grid = [
            (
                Variant::Vanilla,
                Stacking::Cset,
                Decoder::Encode,
                GateContext::ImageBar,
            ),
            (
                Variant::Sst,
                Stacking::Cset,
                Decoder::Encode,
                GateContext::ImageBar,
            ),
            (
                Variant::Sst,
                Stacking::Eset,
                Decoder::Weighted,
                GateContext::EncImage,
            ),
            (
                Variant::Cst,
                Stacking::Cset,
                Decoder::Weighted,
                GateContext::ImageBar,
            ),
            (
                Variant::Cst,
                Stacking::Eset,
                Decoder::Encode,
                GateContext::ImageBar,
            ),
        ];
        for (variant, stacking, decoder, gate_context) in grid {
            let cfg = ModelConfig {
                variant,
                stacking,
                decoder,
                gate_context,
                ..ModelConfig::toy()
            };
            let mut store = ParameterStore::new();
            let model = build_model(&cfg, &mut store)?;
            let name = format!("model_{variant:?}_{stacking:?}_{decoder:?}").to_lowercase();
            // the cross-entropy head is covered by the decoder cases
            self.check_resolved(&name, &mut store, MODEL_RESOLUTION, |g| {
                let out = model.forward(g, &batch, GateMode::Soft)?;
                project(g, out.logits, &direction)
            })?;
        }
        Ok(())
    }
}

/// Finite-difference checks for every layer type, both stackings, both
/// decoders and the full model at toy dimensions.
pub fn gradient_suite(cfg: &GradientSuiteConfig) -> Result<Vec<GradientCase>> {
    let mut runner = Runner {
        cfg: *cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cases: Vec::new(),
    };
    runner.layers()?;
    runner.models()?;
    Ok(runner.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_cases_pass_and_corruption_fails() {
        let mut runner = Runner {
            cfg: GradientSuiteConfig::default(),
            rng: ChaCha8Rng::seed_from_u64(1),
            cases: Vec::new(),
        };
        runner.layers().unwrap();
        for c in &runner.cases {
            assert!(c.report.passed, "{}: {}", c.name, c.report.max_rel_error);
        }
        let mut runner = Runner {
            cfg: GradientSuiteConfig {
                corrupt: true,
                ..Default::default()
            },
            rng: ChaCha8Rng::seed_from_u64(1),
            cases: Vec::new(),
        };
        runner.layers().unwrap();
        assert!(runner.cases.iter().all(|c| !c.report.passed));
    }
}
