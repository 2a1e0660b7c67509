use std::collections::BTreeMap;
use std::fmt::Write;
use std::str::FromStr;
use std::time::Instant;

use anyhow::Result;

use segformer::autodiff::{Graph, ParameterStore};
use segformer::segregation::{GateMode, Variant};
use segformer::vqa::{self, ModelConfig, SyntheticTaskSpec};

use crate::config::{usage, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Size {
    pub d_model: usize,
    pub regions: usize,
}

impl FromStr for Size {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (d, n) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("size {s:?} is not of the form DxN"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("size {s:?} is not of the form DxN"))
        };
        let size = Size {
            d_model: parse(d)?,
            regions: parse(n)?,
        };
        if size.d_model == 0 || size.regions == 0 {
            return Err(format!("size {s:?} must be positive"));
        }
        Ok(size)
    }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub variant: Variant,
    pub size: Size,
    pub reps: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub ratio_vs_vanilla: f64,
}

fn name(v: Variant) -> &'static str {
    match v {
        Variant::Vanilla => "vanilla",
        Variant::Sst => "sst",
        Variant::Cst => "cst",
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn model_config(base: &RunConfig, variant: Variant, size: Size) -> Result<ModelConfig> {
    let heads = base.heads;
    if !size.d_model.is_multiple_of(heads) {
        return Err(usage(format!(
            "d_model {} is not divisible by {heads} heads",
            size.d_model
        )));
    }
    Ok(ModelConfig {
        d_model: size.d_model,
        d_ff: 2 * size.d_model,
        d_gate: size.d_model / heads,
        d_z: 2 * size.d_model,
        max_regions: size.regions,
        variant,
        ..base.model_config()
    })
}

fn time_forward(cfg: &ModelConfig, batch: &vqa::VqaBatch, reps: usize) -> Result<(f64, f64)> {
    let mut store = ParameterStore::new();
    let model = vqa::build_model(cfg, &mut store)?;
    let mut samples = Vec::with_capacity(reps);
    // one untimed pass warms caches and the allocator
    for i in 0..=reps {
        let started = Instant::now();
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, batch, GateMode::Soft)?;
        std::hint::black_box(g.value(out.logits));
        if i > 0 {
            samples.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    samples.sort_by(f64::total_cmp);
    Ok((percentile(&samples, 0.5), percentile(&samples, 0.95)))
}

/// One row per (variant, size) in the order given. The vanilla baseline is
/// timed for every size even when it is not requested.
pub fn run(
    base: &RunConfig,
    variants: &[Variant],
    sizes: &[Size],
    reps: usize,
    batch: usize,
) -> Result<Vec<Row>> {
    let mut rows = Vec::with_capacity(variants.len() * sizes.len());
    for &size in sizes {
        let spec = SyntheticTaskSpec {
            min_regions: size.regions,
            max_regions: size.regions,
            ..base.task_spec()
        };
        let files = vqa::generate_dataset(&spec, batch, 1)?;
        let indices: Vec<usize> = (0..batch).collect();
        let b = files.data.batch(&indices)?;
        let mut timings = BTreeMap::new();
        for &v in std::iter::once(&Variant::Vanilla).chain(variants) {
            if !timings.contains_key(name(v)) {
                timings.insert(
                    name(v),
                    time_forward(&model_config(base, v, size)?, &b, reps)?,
                );
            }
        }
        let vanilla = timings[name(Variant::Vanilla)].0;
        for &v in variants {
            let (median_ms, p95_ms) = timings[name(v)];
            rows.push(Row {
                variant: v,
                size,
                reps,
                median_ms,
                p95_ms,
                ratio_vs_vanilla: median_ms / vanilla,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = String::from("variant,d_model,regions,reps,median_ms,p95_ms,ratio_vs_vanilla\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.4}",
            name(r.variant),
            r.size.d_model,
            r.size.regions,
            r.reps,
            r.median_ms,
            r.p95_ms,
            r.ratio_vs_vanilla
        )
        .expect("writing to a String");
    }
    s
}
