use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::data::{epoch_batches, Dataset};
use super::model::VqaModel;
use crate::autodiff::{adam_step, AdamConfig, Graph, ParameterStore};
use crate::error::{Error, Result};
use crate::segregation::{GateMode, GateTelemetry};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub gate_mean: f64,
    pub gate_frac_lo: f64,
    pub gate_frac_hi: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    /// Shuffling seed.
    pub seed: u64,
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub target_val_acc: Option<f64>,
    /// Receives `metrics.jsonl` and `checkpoint_epoch_{k}.ckpt` files.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            eval_batch_size: 250,
            adam: AdamConfig::default(),
            seed: 0,
            target_val_acc: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub stopped_early: bool,
}

impl TrainSummary {
    pub fn best_val_acc(&self) -> f64 {
        self.records.iter().map(|r| r.val_acc).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub support: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub loss: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[label][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn report_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    answers: usize,
    loss: Option<f64>,
) -> EvalReport {
    let mut confusion = vec![vec![0usize; answers]; answers];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let per_class = (0..answers)
        .map(|class| {
            let support: usize = confusion[class].iter().sum();
            let correct = confusion[class][class];
            ClassAccuracy {
                class,
                support,
                correct,
                accuracy: (support > 0).then(|| correct as f64 / support as f64),
            }
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    EvalReport {
        examples: labels.len(),
        accuracy: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        },
        loss,
        per_class,
        confusion,
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, mean loss and per-class breakdown over `data`, in order.
pub fn evaluate(
    model: &VqaModel,
    store: &ParameterStore,
    data: &Dataset,
    batch_size: usize,
    mode: GateMode,
) -> Result<(EvalReport, GateTelemetry)> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let mut tel = GateTelemetry::default();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut g = Graph::new(store);
        let (loss, out) = model.loss(&mut g, &batch, mode)?;
        loss_sum += g.value(loss).item() * chunk.len() as f64;
        let n = model.cfg.answers;
        predictions.extend(g.value(out.logits).data().chunks(n).map(argmax));
        tel.merge(&out.telemetry);
    }
    let loss = loss_sum / data.len().max(1) as f64;
    Ok((
        report_from_predictions(&predictions, &data.labels, model.cfg.answers, Some(loss)),
        tel,
    ))
}

fn checkpoint_path(dir: &std::path::Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch_{epoch}.ckpt"))
}

/// Minibatch Adam over `train`, evaluating on `val` after every epoch. The
/// learning rate for epoch `k` (1-based) is `lr * decay^(k-1)`.
///
/// With an output directory, the initial weights are saved as epoch 0,
/// each finished epoch adds a checkpoint and a metrics line, and
/// `checkpoint_final.ckpt` is written at the end. A non-finite loss or
/// gradient aborts with [`Error::Numerical`], leaving the last good
/// checkpoint on disk.
pub fn train(
    model: &VqaModel,
    store: &mut ParameterStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainSummary> {
    cfg.adam.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut metrics = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            store.save_checkpoint(checkpoint_path(dir, 0))?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let eval_mode = model.cfg.eval_mode();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let adam = cfg.adam.for_epoch(epoch);
        let mut loss_sum = 0.0;
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let batch = train.batch(idx)?;
            let grads = {
                let mut g = Graph::new(store);
                let (loss, _) = model.loss(&mut g, &batch, GateMode::Soft)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss is {value} at epoch {epoch}, step {step}"
                    )));
                }
                loss_sum += value * idx.len() as f64;
                g.backward(loss)?
            };
            store.accumulate(&grads)?;
            adam_step(store, &adam)?;
        }
        let (report, tel) = evaluate(model, store, val, cfg.eval_batch_size, eval_mode)?;
        let record = MetricsRecord {
            epoch,
            lr: adam.lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: report.loss.unwrap_or(f64::NAN),
            val_acc: report.accuracy,
            gate_mean: tel.mean(),
            gate_frac_lo: tel.frac_lo(),
            gate_frac_hi: tel.frac_hi(),
        };
        if let (Some(w), Some(dir)) = (metrics.as_mut(), &cfg.out_dir) {
            store.save_checkpoint(checkpoint_path(dir, epoch))?;
            serde_json::to_writer(&mut *w, &record).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        on_epoch(&record);
        let reached = cfg.target_val_acc.is_some_and(|t| record.val_acc >= t);
        records.push(record);
        if reached {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    if let Some(dir) = &cfg.out_dir {
        store.save_checkpoint(dir.join("checkpoint_final.ckpt"))?;
    }
    Ok(TrainSummary {
        records,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqa::data::{generate_dataset, SyntheticTaskSpec};
    use crate::vqa::model::{build_model, ModelConfig};

    fn small_setup() -> (ModelConfig, Dataset, Dataset) {
        let files = generate_dataset(&SyntheticTaskSpec::default(), 64, 32).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            heads: 2,
            depth: 1,
            d_ff: 16,
            d_gate: 8,
            d_z: 16,
            ..ModelConfig::toy()
        };
        (cfg, files.train_set().unwrap(), files.val_set().unwrap())
    }

    #[test]
    fn zero_lr_freezes_the_loss() {
        let (cfg, tr, va) = small_setup();
        let mut store = ParameterStore::new();
        let model = build_model(&cfg, &mut store).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let s = train(&model, &mut store, &tr, &va, &tc, |_| {}).unwrap();
        let first = &s.records[0];
        for r in &s.records[1..] {
            assert!((r.train_loss - first.train_loss).abs() < 1e-12);
            assert_eq!(r.val_loss, first.val_loss);
        }
    }

    #[test]
    fn lr_decays_per_epoch_and_files_are_written() {
        let (cfg, tr, va) = small_setup();
        let mut store = ParameterStore::new();
        let model = build_model(&cfg, &mut store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig {
            epochs: 2,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let s = train(&model, &mut store, &tr, &va, &tc, |_| {}).unwrap();
        assert_eq!(s.records[0].lr, 1e-4);
        assert_eq!(s.records[1].lr, 5e-5);
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
        for name in [
            "checkpoint_epoch_0.ckpt",
            "checkpoint_epoch_2.ckpt",
            "checkpoint_final.ckpt",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let mut reloaded = ParameterStore::new();
        build_model(&cfg, &mut reloaded).unwrap();
        reloaded
            .load_checkpoint(dir.path().join("checkpoint_final.ckpt"))
            .unwrap();
        let (a, _) = evaluate(&model, &store, &va, 16, GateMode::Soft).unwrap();
        let (b, _) = evaluate(&model, &reloaded, &va, 16, GateMode::Soft).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn zero_epochs_writes_initial_state_only() {
        let (cfg, tr, va) = small_setup();
        let mut store = ParameterStore::new();
        let model = build_model(&cfg, &mut store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig {
            epochs: 0,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let s = train(&model, &mut store, &tr, &va, &tc, |_| {}).unwrap();
        assert!(s.records.is_empty());
        assert_eq!(
            fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(),
            ""
        );
        assert!(dir.path().join("checkpoint_final.ckpt").exists());
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let files = generate_dataset(&SyntheticTaskSpec::default(), 8, 1000).unwrap();
        let val = files.val_set().unwrap();
        let mut store = ParameterStore::new();
        let model = build_model(&ModelConfig::toy(), &mut store).unwrap();
        let (report, _) = evaluate(&model, &store, &val, 250, GateMode::Soft).unwrap();
        assert!(
            (0.05..=0.25).contains(&report.accuracy),
            "{}",
            report.accuracy
        );
        assert_eq!(
            report.per_class.iter().map(|c| c.support).sum::<usize>(),
            1000
        );
    }

    #[test]
    fn report_counts() {
        let r = report_from_predictions(&[0, 1, 1, 2], &[0, 1, 2, 2], 3, None);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion[2], vec![0, 1, 1]);
        assert_eq!(r.per_class[2].accuracy, Some(0.5));
    }
}
