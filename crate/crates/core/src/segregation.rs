//! Segregation gates and the self-/coordinated-segregating layers built on
//! them.
//!
//! Head `i` of a segregated layer receives `omega_i * A` on its query side,
//! where
//!
//! ```text
//! omega_i = sigmoid( relu(A U_A_i + mean(B) U_B_i) U_AB_i )
//! ```
//!
//! `mean(B)` is the masked mean over the rows of the coordinating tensor
//! `B`, broadcast over the rows of `A`. The coordinated layer (CST) uses the
//! other modality as `B`; the self-segregating layer (SST) uses `A` itself.
//!
//! Stacks either gate at every layer (constant segregation, CSeT) or run
//! plain layers and gate once at the end (end segregation, ESeT).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head, multi_head_routed, AttentionOutput, AttentionParams, LayerConfig, SeqMask,
};
use crate::autodiff::{xavier_uniform, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Sst,
    Cst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stacking {
    Eset,
    Cset,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Self::Vanilla),
            "sst" => Ok(Self::Sst),
            "cst" => Ok(Self::Cst),
            other => Err(Error::Config(format!("unknown variant {other}"))),
        }
    }
}

impl std::str::FromStr for Stacking {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eset" => Ok(Self::Eset),
            "cset" => Ok(Self::Cset),
            other => Err(Error::Config(format!("unknown stacking {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegregationConfig {
    pub variant: Variant,
    pub stacking: Stacking,
    pub depth: usize,
    /// Inference-time binarization threshold for the gates.
    pub hard_threshold: Option<f64>,
}

impl SegregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
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

    pub fn gated(&self) -> bool {
        self.variant != Variant::Vanilla
    }
}

/// How gate coefficients are produced in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Continuous sigmoid gates (training).
    Soft,
    /// Every gate forced to exactly 1.
    Saturated,
    /// Soft gates binarized at the threshold; not differentiable.
    Hard(f64),
}

/// Per-head gate weights: `U_A` (`d x d_g`), `U_B` (`d x d_g`), `U_AB` (`d_g x d`).
#[derive(Debug, Clone)]
pub struct GateParams {
    pub u_a: Vec<ParamId>,
    pub u_b: Vec<ParamId>,
    pub u_ab: Vec<ParamId>,
}

impl GateParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        d_gate: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut u_a = Vec::with_capacity(heads);
        let mut u_b = Vec::with_capacity(heads);
        let mut u_ab = Vec::with_capacity(heads);
        for h in 0..heads {
            u_a.push(store.add(
                format!("{prefix}.u_a.{h}"),
                xavier_uniform(&[d, d_gate], d, d_gate, rng),
            )?);
            u_b.push(store.add(
                format!("{prefix}.u_b.{h}"),
                xavier_uniform(&[d, d_gate], d, d_gate, rng),
            )?);
            u_ab.push(store.add(
                format!("{prefix}.u_ab.{h}"),
                xavier_uniform(&[d_gate, d], d_gate, d, rng),
            )?);
        }
        Ok(Self { u_a, u_b, u_ab })
    }

    pub fn heads(&self) -> usize {
        self.u_a.len()
    }
}

/// Gate statistics accumulated over forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GateTelemetry {
    pub gate_applications: usize,
    pub entries: usize,
    pub sum: f64,
    pub below_lo: usize,
    pub above_hi: usize,
}

impl GateTelemetry {
    pub const LO: f64 = 0.1;
    pub const HI: f64 = 0.9;

    /// Records gate values, skipping rows whose `row_mask` entry is 0.
    fn record(&mut self, omega: &Tensor, row_mask: Option<&Tensor>) {
        let d = *omega.shape().last().unwrap();
        let valid: Vec<bool> = match row_mask {
            Some(m) => m.data().iter().map(|&v| v != 0.0).collect(),
            None => vec![true; omega.len() / d],
        };
        for (row, ok) in omega.data().chunks(d).zip(valid.iter().cycle()) {
            if !ok {
                continue;
            }
            for &w in row {
                self.entries += 1;
                self.sum += w;
                self.below_lo += usize::from(w < Self::LO);
                self.above_hi += usize::from(w > Self::HI);
            }
        }
    }

    pub fn merge(&mut self, other: &GateTelemetry) {
        self.gate_applications += other.gate_applications;
        self.entries += other.entries;
        self.sum += other.sum;
        self.below_lo += other.below_lo;
        self.above_hi += other.above_hi;
    }

    pub fn mean(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.sum / self.entries as f64
        }
    }

    pub fn frac_lo(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.below_lo as f64 / self.entries as f64
        }
    }

    pub fn frac_hi(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.above_hi as f64 / self.entries as f64
        }
    }
}

/// Masked mean over the rows of `b` (`[.., n, d]` → `[.., 1, d]`).
pub fn pool_context(g: &mut Graph<'_>, b: Var, mask: Option<&SeqMask>) -> Result<Var> {
    let shape = g.shape(b).to_vec();
    let rank = shape.len();
    if rank < 2 {
        return Err(Error::dim("pool_context", &shape, &[]));
    }
    let mut pooled_shape = shape.clone();
    pooled_shape[rank - 2] = 1;
    match mask {
        Some(m) => {
            let rows = g.constant(m.rows.clone());
            let kept = g.mul(b, rows)?;
            let summed = g.sum_axis(kept, rank - 2)?;
            let summed = g.reshape(summed, &pooled_shape)?;
            let inv = g.constant(m.inv_counts.clone());
            g.mul(summed, inv)
        }
        None => {
            let summed = g.sum_axis(b, rank - 2)?;
            let summed = g.reshape(summed, &pooled_shape)?;
            Ok(g.scale(summed, 1.0 / shape[rank - 2] as f64))
        }
    }
}

/// Gate for `head` from `a` (`[.., n_a, d]`) and a pooled context
/// (`[.., 1, d]`); the result has `a`'s shape.
pub fn gate_from_context(
    g: &mut Graph<'_>,
    a: Var,
    context: Var,
    params: &GateParams,
    head: usize,
    mode: GateMode,
) -> Result<Var> {
    let (sa, sc) = (g.shape(a).to_vec(), g.shape(context).to_vec());
    if sa.last() != sc.last() {
        return Err(Error::dim("gate_coefficients", &sa, &sc));
    }
    if head >= params.heads() {
        return Err(Error::Config(format!(
            "gate head {head} of {}",
            params.heads()
        )));
    }
    if mode == GateMode::Saturated {
        return Ok(g.constant(Tensor::ones(&sa)));
    }
    let (u_a, u_b, u_ab) = (
        g.param(params.u_a[head]),
        g.param(params.u_b[head]),
        g.param(params.u_ab[head]),
    );
    let pa = g.matmul(a, u_a)?;
    let pc = g.matmul(context, u_b)?;
    let hidden = g.add(pa, pc)?;
    let hidden = g.relu(hidden);
    let pre = g.matmul(hidden, u_ab)?;
    let soft = g.sigmoid(pre);
    match mode {
        GateMode::Hard(t) => {
            let binary = g.value(soft).map(|w| if w > t { 1.0 } else { 0.0 });
            Ok(g.constant(binary))
        }
        _ => Ok(soft),
    }
}

/// `omega_i` for rows of `a`, coordinated by the masked mean of `b`.
pub fn gate_coefficients(
    g: &mut Graph<'_>,
    a: Var,
    b: Var,
    b_mask: Option<&SeqMask>,
    params: &GateParams,
    head: usize,
    mode: GateMode,
) -> Result<Var> {
    if g.shape(a).last() != g.shape(b).last() {
        return Err(Error::dim("gate_coefficients", g.shape(a), g.shape(b)));
    }
    let ctx = pool_context(g, b, b_mask)?;
    gate_from_context(g, a, ctx, params, head, mode)
}

/// `[omega_1 * A ; ... ; omega_h * A]`, one gated copy routed to each head.
pub fn segregate(g: &mut Graph<'_>, a: Var, omegas: &[Var], heads: usize) -> Result<Vec<Var>> {
    if omegas.len() != heads {
        return Err(Error::Config(format!(
            "{} gates for {heads} heads",
            omegas.len()
        )));
    }
    omegas.iter().map(|&w| g.mul(a, w)).collect()
}

/// Attention whose query side is segregated by gates computed from `a` and
/// a precomputed `context`; keys/values come from `b`/`c`.
#[allow(clippy::too_many_arguments)]
pub fn segregated_attention(
    g: &mut Graph<'_>,
    a: Var,
    b: Var,
    c: Var,
    context: Var,
    attn: &AttentionParams,
    gate: &GateParams,
    cfg: &LayerConfig,
    a_mask: Option<&SeqMask>,
    key_mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<AttentionOutput> {
    if gate.heads() != attn.heads() {
        return Err(Error::Config(format!(
            "{} gate triples for {} attention heads",
            gate.heads(),
            attn.heads()
        )));
    }
    let omegas = (0..gate.heads())
        .map(|h| gate_from_context(g, a, context, gate, h, mode))
        .collect::<Result<Vec<_>>>()?;
    telemetry.gate_applications += 1;
    for &w in &omegas {
        telemetry.record(g.value(w), a_mask.map(|m| &m.rows));
    }
    let inputs = segregate(g, a, &omegas, attn.heads())?;
    multi_head_routed(g, &inputs, a, b, c, attn, cfg, key_mask.map(|m| &m.keys))
}

/// Coordinated-segregation layer: head `i` computes
/// `attention((omega_i * A) W_Ai, B W_Bi, C W_Ci)` with `omega_i` drawn from
/// `A` and the coordinating tensor `B`.
#[allow(clippy::too_many_arguments)]
pub fn cst_layer(
    g: &mut Graph<'_>,
    a: Var,
    b: Var,
    c: Var,
    attn: &AttentionParams,
    gate: &GateParams,
    cfg: &LayerConfig,
    a_mask: Option<&SeqMask>,
    b_mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<AttentionOutput> {
    let ctx = pool_context(g, b, b_mask)?;
    segregated_attention(
        g, a, b, c, ctx, attn, gate, cfg, a_mask, b_mask, mode, telemetry,
    )
}

/// Self-segregating layer: [`cst_layer`] with `B = C = A`.
#[allow(clippy::too_many_arguments)]
pub fn sst_layer(
    g: &mut Graph<'_>,
    a: Var,
    attn: &AttentionParams,
    gate: &GateParams,
    cfg: &LayerConfig,
    mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<AttentionOutput> {
    cst_layer(g, a, a, a, attn, gate, cfg, mask, mask, mode, telemetry)
}

/// One layer of a segregation stack.
#[derive(Debug, Clone)]
pub struct StackLayer {
    pub attn: AttentionParams,
    /// Present for CSeT stacks.
    pub gate: Option<GateParams>,
}

/// Parameters of an `m`-layer stack. CSeT stacks carry a gate per layer;
/// ESeT stacks carry a single end gate; vanilla stacks carry none.
#[derive(Debug, Clone)]
pub struct SegregatedStack {
    pub layers: Vec<StackLayer>,
    pub end_gate: Option<GateParams>,
    pub layer_cfg: LayerConfig,
    pub seg_cfg: SegregationConfig,
}

impl SegregatedStack {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        layer_cfg: LayerConfig,
        seg_cfg: SegregationConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        seg_cfg.validate()?;
        let per_layer = seg_cfg.gated() && seg_cfg.stacking == Stacking::Cset;
        let d = layer_cfg.d_model;
        let mut layers = Vec::with_capacity(seg_cfg.depth);
        for l in 0..seg_cfg.depth {
            let attn =
                AttentionParams::init(store, &format!("{prefix}.layer{l}.attn"), &layer_cfg, rng)?;
            let gate = per_layer
                .then(|| {
                    GateParams::init(
                        store,
                        &format!("{prefix}.layer{l}.gate"),
                        d,
                        d,
                        layer_cfg.heads,
                        rng,
                    )
                })
                .transpose()?;
            layers.push(StackLayer { attn, gate });
        }
        let end_gate = (seg_cfg.gated() && seg_cfg.stacking == Stacking::Eset)
            .then(|| GateParams::init(store, &format!("{prefix}.end_gate"), d, d, 1, rng))
            .transpose()?;
        Ok(Self {
            layers,
            end_gate,
            layer_cfg,
            seg_cfg,
        })
    }
}

/// Tensor that coordinates a stack: its rows serve as keys/values and its
/// masked mean feeds the gates.
#[derive(Debug, Clone, Copy)]
pub struct Coordinator<'m> {
    pub tensor: Var,
    pub mask: Option<&'m SeqMask>,
}

fn plain_layer(
    g: &mut Graph<'_>,
    x: Var,
    layer: &StackLayer,
    cfg: &LayerConfig,
    coordinator: Option<Coordinator<'_>>,
    mask: Option<&SeqMask>,
) -> Result<Var> {
    let out = match coordinator {
        Some(c) => multi_head(
            g,
            x,
            c.tensor,
            c.tensor,
            &layer.attn,
            cfg,
            c.mask.map(|m| &m.keys),
        )?,
        None => multi_head(g, x, x, x, &layer.attn, cfg, mask.map(|m| &m.keys))?,
    };
    Ok(out.out)
}

/// Constant segregation: every layer recomputes its gate from its own input
/// (and the coordinator, for CST) before attending.
pub fn stack_cset(
    g: &mut Graph<'_>,
    x0: Var,
    stack: &SegregatedStack,
    coordinator: Option<Coordinator<'_>>,
    mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<Var> {
    let cfg = &stack.layer_cfg;
    let mut x = x0;
    for (l, layer) in stack.layers.iter().enumerate() {
        let gate = layer.gate.as_ref().ok_or_else(|| {
            Error::Config(format!("layer {l} has no gate for constant segregation"))
        })?;
        x = match coordinator {
            Some(c) => cst_layer(
                g,
                x,
                c.tensor,
                c.tensor,
                &layer.attn,
                gate,
                cfg,
                mask,
                c.mask,
                mode,
                telemetry,
            )?,
            None => sst_layer(g, x, &layer.attn, gate, cfg, mask, mode, telemetry)?,
        }
        .out;
    }
    Ok(x)
}

/// End segregation: plain layers, then one gate over the final representation.
pub fn stack_eset(
    g: &mut Graph<'_>,
    x0: Var,
    stack: &SegregatedStack,
    coordinator: Option<Coordinator<'_>>,
    mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<Var> {
    let end_gate = stack
        .end_gate
        .as_ref()
        .ok_or_else(|| Error::Config("end segregation needs an end gate".into()))?;
    let x = stack_vanilla(g, x0, stack, coordinator, mask)?;
    let ctx = match coordinator {
        Some(c) => pool_context(g, c.tensor, c.mask)?,
        None => pool_context(g, x, mask)?,
    };
    end_segregate(g, x, ctx, end_gate, mask, mode, telemetry)
}

/// `omega * x` with a single gate from `x` and `context`.
pub fn end_segregate(
    g: &mut Graph<'_>,
    x: Var,
    context: Var,
    gate: &GateParams,
    mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<Var> {
    let omega = gate_from_context(g, x, context, gate, 0, mode)?;
    telemetry.gate_applications += 1;
    telemetry.record(g.value(omega), mask.map(|m| &m.rows));
    g.mul(x, omega)
}

/// The same layers with no gating at all.
pub fn stack_vanilla(
    g: &mut Graph<'_>,
    x0: Var,
    stack: &SegregatedStack,
    coordinator: Option<Coordinator<'_>>,
    mask: Option<&SeqMask>,
) -> Result<Var> {
    let mut x = x0;
    for layer in &stack.layers {
        x = plain_layer(g, x, layer, &stack.layer_cfg, coordinator, mask)?;
    }
    Ok(x)
}

/// Dispatches on the stack's variant and stacking regime.
pub fn run_stack(
    g: &mut Graph<'_>,
    x0: Var,
    stack: &SegregatedStack,
    coordinator: Option<Coordinator<'_>>,
    mask: Option<&SeqMask>,
    mode: GateMode,
    telemetry: &mut GateTelemetry,
) -> Result<Var> {
    match (stack.seg_cfg.gated(), stack.seg_cfg.stacking) {
        (false, _) => stack_vanilla(g, x0, stack, coordinator, mask),
        (true, Stacking::Cset) => stack_cset(g, x0, stack, coordinator, mask, mode, telemetry),
        (true, Stacking::Eset) => stack_eset(g, x0, stack, coordinator, mask, mode, telemetry),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::tensor::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn one_head_gate(store: &mut ParameterStore, u_a: f64, u_b: f64, u_ab: f64) -> GateParams {
        let gate =
            GateParams::init(store, "g", 1, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *store.value_mut(gate.u_a[0]) = Tensor::from_rows(&[&[u_a]]);
        *store.value_mut(gate.u_b[0]) = Tensor::from_rows(&[&[u_b]]);
        *store.value_mut(gate.u_ab[0]) = Tensor::from_rows(&[&[u_ab]]);
        gate
    }

    #[test]
    fn scalar_gate_hand_case() {
        let mut store = ParameterStore::new();
        let gate = one_head_gate(&mut store, 1.0, 1.0, 2.0);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_rows(&[&[1.0]]));
        let b = g.constant(Tensor::from_rows(&[&[1.0]]));
        let w = gate_coefficients(&mut g, a, b, None, &gate, 0, GateMode::Soft).unwrap();
        let expect = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((g.value(w).item() - expect).abs() < 1e-15);
        assert!((g.value(w).item() - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn zero_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let gate = GateParams::init(&mut store, "g", 4, 4, 2, &mut rng).unwrap();
        for &id in &gate.u_ab {
            *store.value_mut(id) = Tensor::zeros(&[4, 4]);
        }
        let a_val = rand_tensor(&[3, 4], &mut rng);
        let mut g = Graph::new(&store);
        let a = g.constant(a_val);
        let w = gate_coefficients(&mut g, a, a, None, &gate, 1, GateMode::Soft).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.5));
        drop(g);

        let mut store2 = ParameterStore::new();
        let gate2 = GateParams::init(&mut store2, "g", 4, 4, 1, &mut rng).unwrap();
        *store2.value_mut(gate2.u_a[0]) = Tensor::zeros(&[4, 4]);
        *store2.value_mut(gate2.u_b[0]) = Tensor::zeros(&[4, 4]);
        let mut g = Graph::new(&store2);
        let a = g.constant(Tensor::ones(&[2, 4]));
        let w = gate_coefficients(&mut g, a, a, None, &gate2, 0, GateMode::Soft).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_dimension_mismatch() {
        let mut store = ParameterStore::new();
        let gate =
            GateParams::init(&mut store, "g", 4, 4, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::ones(&[2, 4]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(
            gate_coefficients(&mut g, a, b, None, &gate, 0, GateMode::Soft),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn segregate_examples() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let a_val = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let a = g.constant(a_val.clone());
        let ones = g.constant(Tensor::ones(&[2, 4]));
        let routed = segregate(&mut g, a, &[ones, ones], 2).unwrap();
        assert!(routed.iter().all(|&r| g.value(r) == &a_val));

        let zeros = g.constant(Tensor::zeros(&[2, 4]));
        let routed = segregate(&mut g, a, &[zeros], 1).unwrap();
        assert!(g.value(routed[0]).data().iter().all(|&v| v == 0.0));

        let half = g.constant(Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let routed = segregate(&mut g, a, &[half], 1).unwrap();
        assert_eq!(
            g.value(routed[0]),
            &Tensor::from_rows(&[&[1.0, 2.0, 0.0, 0.0], &[5.0, 6.0, 0.0, 0.0]])
        );

        assert!(matches!(
            segregate(&mut g, a, &[half], 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_gates_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        let cfg = LayerConfig::bare(4, 2);
        let attn = AttentionParams::init(&mut store, "l", &cfg, &mut rng).unwrap();
        let x = rand_tensor(&[1, 3, 4], &mut rng);
        let mask = SeqMask::new(&Mask::from_lengths(&[2], 3).unwrap());
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let zeros = g.constant(Tensor::zeros(&[1, 3, 4]));
        let inputs = segregate(&mut g, xv, &[zeros, zeros], 2).unwrap();
        let out =
            multi_head_routed(&mut g, &inputs, xv, xv, xv, &attn, &cfg, Some(&mask.keys)).unwrap();
        for &w in &out.weights {
            for row in g.value(w).data().chunks(3) {
                assert_eq!(row, &[0.5, 0.5, 0.0]);
            }
        }
    }

    #[test]
    fn hard_threshold_is_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let gate = GateParams::init(&mut store, "g", 4, 4, 1, &mut rng).unwrap();
        let a_val = rand_tensor(&[5, 4], &mut rng);
        let mut g = Graph::new(&store);
        let a = g.constant(a_val);
        let w = gate_coefficients(&mut g, a, a, None, &gate, 0, GateMode::Hard(0.5)).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn invalid_config() {
        let cfg = SegregationConfig {
            variant: Variant::Sst,
            stacking: Stacking::Cset,
            depth: 0,
            hard_threshold: None,
        };
        assert!(cfg.validate().is_err());
        let cfg = SegregationConfig {
            depth: 2,
            hard_threshold: Some(1.5),
            ..cfg
        };
        assert!(cfg.validate().is_err());
        assert!("sst".parse::<Variant>().is_ok());
        assert!("bogus".parse::<Stacking>().is_err());
    }

    fn rows_of(g: &Graph<'_>, v: Var) -> reference::Rows {
        reference::rows(g.value(v))
    }

    fn store_rows(store: &ParameterStore, id: ParamId) -> reference::Rows {
        reference::rows(&store.get(id).value)
    }

    #[test]
    fn saturated_cst_matches_plain_attention_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParameterStore::new();
        let cfg = LayerConfig::new(8, 2);
        let attn = AttentionParams::init(&mut store, "l", &cfg, &mut rng).unwrap();
        let gate = GateParams::init(&mut store, "g", 8, 8, 2, &mut rng).unwrap();
        let (a_val, b_val) = (
            rand_tensor(&[2, 3, 8], &mut rng),
            rand_tensor(&[2, 5, 8], &mut rng),
        );
        let b_mask = SeqMask::new(&Mask::from_lengths(&[5, 2], 5).unwrap());
        let mut g = Graph::new(&store);
        let (a, b) = (g.constant(a_val), g.constant(b_val));
        let mut tel = GateTelemetry::default();
        let seg = cst_layer(
            &mut g,
            a,
            b,
            b,
            &attn,
            &gate,
            &cfg,
            None,
            Some(&b_mask),
            GateMode::Saturated,
            &mut tel,
        )
        .unwrap();
        let plain = multi_head(&mut g, a, b, b, &attn, &cfg, Some(&b_mask.keys)).unwrap();
        assert_eq!(g.value(seg.out), g.value(plain.out));
        assert_eq!(tel.gate_applications, 1);
        assert_eq!(tel.mean(), 1.0);
    }

    #[test]
    fn sst_is_cst_with_self_coordination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let cfg = LayerConfig::new(4, 2);
        let attn = AttentionParams::init(&mut store, "l", &cfg, &mut rng).unwrap();
        let gate = GateParams::init(&mut store, "g", 4, 4, 2, &mut rng).unwrap();
        let mask = SeqMask::new(&Mask::from_lengths(&[3], 4).unwrap());
        let mut g = Graph::new(&store);
        let a = g.constant(rand_tensor(&[1, 4, 4], &mut rng));
        let mut tel = GateTelemetry::default();
        let s = sst_layer(
            &mut g,
            a,
            &attn,
            &gate,
            &cfg,
            Some(&mask),
            GateMode::Soft,
            &mut tel,
        )
        .unwrap();
        let c = cst_layer(
            &mut g,
            a,
            a,
            a,
            &attn,
            &gate,
            &cfg,
            Some(&mask),
            Some(&mask),
            GateMode::Soft,
            &mut tel,
        )
        .unwrap();
        assert_eq!(g.value(s.out), g.value(c.out));
        // valid rows only: 3 rows x 4 features x 2 heads x 2 calls
        assert_eq!(tel.entries, 48);
    }

    #[test]
    fn cst_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParameterStore::new();
        let cfg = LayerConfig::bare(4, 2);
        let attn = AttentionParams::init(&mut store, "l", &cfg, &mut rng).unwrap();
        let gate = GateParams::init(&mut store, "g", 4, 4, 2, &mut rng).unwrap();
        let (a_val, b_val) = (
            rand_tensor(&[3, 4], &mut rng),
            rand_tensor(&[3, 4], &mut rng),
        );
        let valid = [true, true, false];
        let b_mask = SeqMask::new(&Mask::new(vec![3], valid.to_vec()).unwrap());

        let mut g = Graph::new(&store);
        let (a, b) = (g.constant(a_val.clone()), g.constant(b_val.clone()));
        let mut tel = GateTelemetry::default();
        let out = cst_layer(
            &mut g,
            a,
            b,
            b,
            &attn,
            &gate,
            &cfg,
            None,
            Some(&b_mask),
            GateMode::Soft,
            &mut tel,
        )
        .unwrap();

        let heads: Vec<_> = (0..2)
            .map(|h| reference::HeadWeights {
                w_a: store_rows(&store, attn.w_a[h]),
                w_b: store_rows(&store, attn.w_b[h]),
                w_c: store_rows(&store, attn.w_c[h]),
            })
            .collect();
        let gates: Vec<_> = (0..2)
            .map(|h| reference::GateWeights {
                u_a: store_rows(&store, gate.u_a[h]),
                u_b: store_rows(&store, gate.u_b[h]),
                u_ab: store_rows(&store, gate.u_ab[h]),
            })
            .collect();
        let (ar, br) = (reference::rows(&a_val), reference::rows(&b_val));
        let expect = reference::cst_layer(
            &ar,
            &br,
            &br,
            &heads,
            &gates,
            &store_rows(&store, attn.w_out),
            Some(&valid),
        );
        let diff = reference::max_diff(&rows_of(&g, out.out), &expect);
        assert!(diff < 1e-12, "diff {diff}");

        let omega =
            gate_coefficients(&mut g, a, b, Some(&b_mask), &gate, 0, GateMode::Soft).unwrap();
        let expect = reference::gate(&ar, &br, Some(&valid), &gates[0]);
        assert!(reference::max_diff(&rows_of(&g, omega), &expect) < 1e-12);
        assert!(g.value(omega).data().iter().all(|&w| w > 0.0 && w < 1.0));
    }

    fn small_stack(
        variant: Variant,
        stacking: Stacking,
        depth: usize,
        store: &mut ParameterStore,
    ) -> SegregatedStack {
        let seg = SegregationConfig {
            variant,
            stacking,
            depth,
            hard_threshold: None,
        };
        SegregatedStack::init(
            store,
            "s",
            LayerConfig::new(4, 2),
            seg,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
    }

    #[test]
    fn gate_counters_per_regime() {
        let x_val = rand_tensor(&[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(8));
        for (stacking, expect) in [(Stacking::Cset, 3), (Stacking::Eset, 1)] {
            let mut store = ParameterStore::new();
            let stack = small_stack(Variant::Sst, stacking, 3, &mut store);
            let mut g = Graph::new(&store);
            let x = g.constant(x_val.clone());
            let mut tel = GateTelemetry::default();
            let y = run_stack(&mut g, x, &stack, None, None, GateMode::Soft, &mut tel).unwrap();
            assert_eq!(tel.gate_applications, expect);
            assert_eq!(g.shape(y), &[2, 3, 4]);
        }
        let mut store = ParameterStore::new();
        let stack = small_stack(Variant::Vanilla, Stacking::Cset, 2, &mut store);
        let mut g = Graph::new(&store);
        let x = g.constant(x_val);
        let mut tel = GateTelemetry::default();
        run_stack(&mut g, x, &stack, None, None, GateMode::Soft, &mut tel).unwrap();
        assert_eq!(tel.gate_applications, 0);
    }

    #[test]
    fn saturated_cset_equals_vanilla_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParameterStore::new();
        let stack = small_stack(Variant::Cst, Stacking::Cset, 2, &mut store);
        let (x_val, y_val) = (
            rand_tensor(&[2, 3, 4], &mut rng),
            rand_tensor(&[2, 4, 4], &mut rng),
        );
        let y_mask = SeqMask::new(&Mask::from_lengths(&[4, 1], 4).unwrap());
        let mut g = Graph::new(&store);
        let (x, y) = (g.constant(x_val), g.constant(y_val));
        let coord = Coordinator {
            tensor: y,
            mask: Some(&y_mask),
        };
        let mut tel = GateTelemetry::default();
        let seg = stack_cset(
            &mut g,
            x,
            &stack,
            Some(coord),
            None,
            GateMode::Saturated,
            &mut tel,
        )
        .unwrap();
        let plain = stack_vanilla(&mut g, x, &stack, Some(coord), None).unwrap();
        assert_eq!(g.value(seg), g.value(plain));
    }

    #[test]
    fn gates_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for stacking in [Stacking::Cset, Stacking::Eset] {
            let mut store = ParameterStore::new();
            let stack = small_stack(Variant::Cst, stacking, 2, &mut store);
            let (x_val, y_val) = (
                rand_tensor(&[2, 3, 4], &mut rng),
                rand_tensor(&[2, 2, 4], &mut rng),
            );
            let y_mask = SeqMask::new(&Mask::from_lengths(&[2, 1], 2).unwrap());
            let probe = rand_tensor(&[2, 3, 4], &mut rng);
            let loss = |g: &mut Graph<'_>| {
                let (x, y) = (g.constant(x_val.clone()), g.constant(y_val.clone()));
                let coord = Coordinator {
                    tensor: y,
                    mask: Some(&y_mask),
                };
                let out = run_stack(
                    g,
                    x,
                    &stack,
                    Some(coord),
                    None,
                    GateMode::Soft,
                    &mut GateTelemetry::default(),
                )?;
                let r = g.constant(probe.clone());
                let weighted = g.mul(out, r)?;
                Ok(g.sum_all(weighted))
            };
            let cfg = crate::autodiff::GradCheckConfig {
                probes: 2 * store.len(),
                ..Default::default()
            };
            let report = crate::autodiff::grad_check(loss, &mut store, &cfg).unwrap();
            assert!(report.passed, "{stacking:?}: {}", report.max_rel_error);
        }
    }
}
