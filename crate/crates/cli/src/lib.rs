//! The `sst` command-line tool.

mod bench;
pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use segformer::autodiff::ParameterStore;
use segformer::checks::{gradient_suite, oracle_suite, GradientSuiteConfig};
use segformer::fusion::Decoder;
use segformer::segregation::{Stacking, Variant};
use segformer::vqa::{self, GateContext, TrainConfig};

pub use config::{usage, Resolver, RunConfig, UsageError, RESOLVED_CONFIG, SEED_ENV};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "sst",
    version,
    about = "Segregating transformer attention on a synthetic VQA task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model and write metrics.jsonl plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks over every layer and the full model.
    Gradcheck(GradcheckArgs),
    /// Compare the layers with scalar brute-force implementations.
    Oracle(OracleArgs),
    /// Forward-pass latency per variant and size, as CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra overrides as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub stacking: Option<Stacking>,
    #[arg(long)]
    pub decoder: Option<Decoder>,
    #[arg(long)]
    pub gate_context: Option<GateContext>,
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    pub target_val_acc: Option<f64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Training output directory; its resolved config rebuilds the model.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint file name inside the run directory.
    #[arg(long, default_value = "checkpoint_final.ckpt")]
    pub checkpoint: String,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Directory for eval_report.json and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Test hook: doubles every analytic gradient, so the run must fail.
    #[arg(long)]
    pub corrupt: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub max_dim: usize,
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "vanilla,sst,cst")]
    pub variants: Vec<Variant>,
    /// Sizes as d_model x regions, e.g. 64x10.
    #[arg(long, value_delimiter = ',', default_value = "64x10")]
    pub sizes: Vec<bench::Size>,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one subcommand, returning its exit code. Errors are left to
/// [`exit_code`].
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// 3 for numerical aborts, 2 for everything else that stops a command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<segformer::Error>() {
        Some(segformer::Error::Numerical(_)) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn resolver(common: &Common, base: Option<&Path>) -> Result<Resolver> {
    let mut r = Resolver::from_env()?;
    if let Some(b) = base {
        r = r.file(b)?;
    }
    if let Some(c) = &common.config {
        r = r.file(c)?;
    }
    r.set("seed", common.seed)?;
    for pair in &common.set {
        r.assign(pair)?;
    }
    Ok(r)
}

fn seed_only(seed: Option<u64>) -> Result<RunConfig> {
    let mut r = Resolver::from_env()?;
    r.set("seed", seed)?;
    r.resolve()
}

fn cmd_gen(a: GenArgs) -> Result<u8> {
    let mut r = resolver(&a.common, None)?;
    r.set("n_train", a.n_train)?;
    r.set("n_val", a.n_val)?;
    let cfg = r.resolve()?;
    let files = vqa::generate_dataset(&cfg.task_spec(), cfg.n_train, cfg.n_val)?;
    vqa::write_dataset(&a.out, &files)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    cfg.write_to(&a.out)?;
    println!(
        "wrote {} train / {} val examples to {}",
        files.train.len(),
        files.val.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn load_data(dir: &Path) -> Result<vqa::DatasetFiles> {
    vqa::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let mut r = resolver(&a.common, None)?;
    r.set("variant", a.model.variant)?;
    r.set("stacking", a.model.stacking)?;
    r.set("decoder", a.model.decoder)?;
    r.set("gate_context", a.model.gate_context)?;
    r.set("depth", a.model.depth)?;
    r.set("epochs", a.epochs)?;
    r.set("lr", a.lr)?;
    r.set("decay", a.decay)?;
    r.set("batch_size", a.batch_size)?;
    r.set("target_val_acc", a.target_val_acc)?;
    let mut cfg = r.resolve()?;
    let files = load_data(&a.data)?;
    cfg.adopt_task(&files.spec);
    cfg.write_to(&a.out)?;

    let mut store = ParameterStore::new();
    let model = vqa::build_model(&cfg.model_config(), &mut store)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        eval_batch_size: cfg.eval_batch_size,
        adam: cfg.adam(),
        seed: cfg.seed,
        target_val_acc: cfg.target_val_acc,
        out_dir: Some(a.out.clone()),
    };
    let (train, val) = (files.train_set()?, files.val_set()?);
    let quiet = a.quiet;
    let started = Instant::now();
    let summary = vqa::train(&model, &mut store, &train, &val, &tc, |m| {
        if !quiet {
            println!(
                "epoch {:>3}  lr {:.2e}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  gate_mean {:.3}",
                m.epoch, m.lr, m.train_loss, m.val_loss, m.val_acc, m.gate_mean
            );
        }
    })?;
    println!(
        "{} epochs in {:.1}s, best val_acc {:.4}{}",
        summary.records.len(),
        started.elapsed().as_secs_f64(),
        summary.best_val_acc(),
        if summary.stopped_early {
            " (target reached)"
        } else {
            ""
        }
    );
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let base = a.run.join(RESOLVED_CONFIG);
    let cfg = resolver(&a.common, Some(&base))?.resolve()?;
    let files = load_data(&a.data)?;
    let mc = cfg.model_config();
    let spec = &files.spec;
    let dims = [
        ("answers", mc.answers, spec.answers),
        ("vocab", mc.vocab, spec.vocab),
        ("d_img", mc.d_img, spec.d_img),
        ("max_regions", mc.max_regions, spec.max_regions),
        ("max_tokens", mc.max_tokens, spec.max_tokens),
    ];
    for (name, model, data) in dims {
        if model != data {
            return Err(segformer::Error::Load(format!(
                "model {name} = {model} but dataset has {data}"
            ))
            .into());
        }
    }
    let mut store = ParameterStore::new();
    let model = vqa::build_model(&mc, &mut store)?;
    let ckpt = a.run.join(&a.checkpoint);
    store
        .load_checkpoint(&ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    let data = match a.split {
        Split::Train => files.train_set()?,
        Split::Val => files.val_set()?,
    };
    let (report, _) = vqa::evaluate(&model, &store, &data, cfg.eval_batch_size, mc.eval_mode())?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        cfg.write_to(out)?;
        std::fs::write(out.join("eval_report.json"), format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(EXIT_OK)
}

fn write_report(
    out: Option<&Path>,
    name: &str,
    cfg: &RunConfig,
    value: &impl serde::Serialize,
) -> Result<()> {
    if let Some(out) = out {
        cfg.write_to(out)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(out.join(name), text)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let cfg = seed_only(a.seed)?;
    if !(1e-7..=1e-3).contains(&a.step) {
        return Err(usage(format!(
            "--step must lie in [1e-7, 1e-3], got {}",
            a.step
        )));
    }
    let started = Instant::now();
    let cases = gradient_suite(&GradientSuiteConfig {
        tol: a.tol,
        step: a.step,
        seed: cfg.seed,
        corrupt: a.corrupt,
        ..Default::default()
    })?;
    let mut stdout = std::io::stdout().lock();
    let mut all = true;
    let mut worst: f64 = 0.0;
    for c in &cases {
        let r = &c.report;
        all &= r.passed;
        worst = worst.max(r.max_rel_error);
        writeln!(
            stdout,
            "{:<4} {:<32} probes {:>4}  skipped {:>3}  kinks {:>2}  max_rel_error {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            c.name,
            r.probes.len(),
            r.skipped,
            r.kinks,
            r.max_rel_error
        )?;
    }
    writeln!(
        stdout,
        "gradcheck {}: {} cases, max relative error {:.3e} (tol {:e}) in {:.1}s",
        if all { "passed" } else { "FAILED" },
        cases.len(),
        worst,
        a.tol,
        started.elapsed().as_secs_f64()
    )?;
    write_report(a.out.as_deref(), "gradcheck.json", &cfg, &cases)?;
    Ok(if all { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_oracle(a: OracleArgs) -> Result<u8> {
    let cfg = seed_only(a.seed)?;
    if a.max_dim == 0 {
        return Err(usage("--max-dim must be positive".into()));
    }
    let started = Instant::now();
    let report = oracle_suite(a.cases, a.max_dim, cfg.seed)?;
    println!(
        "oracle {}: {} cases (d <= {}), max diff attention {:.3e}, multi_head {:.3e}, cst_layer {:.3e}, identity bitwise {} in {:.2}s",
        if report.passed { "passed" } else { "FAILED" },
        report.cases.len(),
        a.max_dim,
        report.max_attention_diff,
        report.max_multi_head_diff,
        report.max_cst_diff,
        report.identity_bitwise,
        started.elapsed().as_secs_f64()
    );
    write_report(a.out.as_deref(), "oracle.json", &cfg, &report)?;
    Ok(if report.passed {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_bench(a: BenchArgs) -> Result<u8> {
    let cfg = seed_only(a.seed)?;
    if a.reps == 0 || a.batch == 0 {
        return Err(usage("--reps and --batch must be positive".into()));
    }
    let rows = bench::run(&cfg, &a.variants, &a.sizes, a.reps, a.batch)?;
    let csv = bench::to_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        cfg.write_to(out)?;
        std::fs::write(out.join("bench.csv"), &csv)?;
    }
    Ok(EXIT_OK)
}
