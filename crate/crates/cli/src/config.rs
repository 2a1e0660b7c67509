use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use segformer::autodiff::AdamConfig;
use segformer::fusion::Decoder;
use segformer::segregation::{Stacking, Variant};
use segformer::vqa::{GateContext, ModelConfig, SyntheticTaskSpec, TrainConfig};

pub const SEED_ENV: &str = "SEG_SEED";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Every knob of every subcommand in one flat object. Field names are the
/// keys accepted in config files and by `--set`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_train: usize,
    pub n_val: usize,
    pub n_prototypes: usize,
    pub vocab: usize,
    pub answers: usize,
    pub noise_std: f64,
    pub d_img: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,

    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    pub d_gate: usize,
    pub d_emb: usize,
    pub d_z: usize,
    pub d_mlp: usize,
    pub variant: Variant,
    pub stacking: Stacking,
    pub decoder: Decoder,
    pub gate_context: GateContext,
    pub coordinate_both: bool,
    pub hard_threshold: Option<f64>,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub target_val_acc: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTaskSpec::default();
        let model = ModelConfig::toy();
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 500,
            n_prototypes: task.n_prototypes,
            vocab: task.vocab,
            answers: task.answers,
            noise_std: task.noise_std,
            d_img: task.d_img,
            min_regions: task.min_regions,
            max_regions: task.max_regions,
            min_tokens: task.min_tokens,
            max_tokens: task.max_tokens,
            d_model: model.d_model,
            heads: model.heads,
            depth: model.depth,
            d_ff: model.d_ff,
            d_gate: model.d_gate,
            d_emb: model.d_emb,
            d_z: model.d_z,
            d_mlp: model.d_mlp,
            variant: model.variant,
            stacking: model.stacking,
            decoder: model.decoder,
            gate_context: model.gate_context,
            coordinate_both: model.coordinate_both,
            hard_threshold: model.hard_threshold,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            decay: adam.decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            eval_batch_size: train.eval_batch_size,
            target_val_acc: train.target_val_acc,
        }
    }
}

impl RunConfig {
    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_prototypes: self.n_prototypes,
            vocab: self.vocab,
            answers: self.answers,
            noise_std: self.noise_std,
            seed: self.seed,
            d_img: self.d_img,
            min_regions: self.min_regions,
            max_regions: self.max_regions,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            depth: self.depth,
            d_ff: self.d_ff,
            d_gate: self.d_gate,
            d_img: self.d_img,
            d_emb: self.d_emb,
            vocab: self.vocab,
            answers: self.answers,
            max_regions: self.max_regions,
            max_tokens: self.max_tokens,
            d_z: self.d_z,
            d_mlp: self.d_mlp,
            variant: self.variant,
            stacking: self.stacking,
            decoder: self.decoder,
            gate_context: self.gate_context,
            coordinate_both: self.coordinate_both,
            hard_threshold: self.hard_threshold,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            decay: self.decay,
        }
    }

    /// Copies the dataset-determined fields from a manifest.
    pub fn adopt_task(&mut self, spec: &SyntheticTaskSpec) {
        self.n_prototypes = spec.n_prototypes;
        self.vocab = spec.vocab;
        self.answers = spec.answers;
        self.noise_std = spec.noise_std;
        self.d_img = spec.d_img;
        self.min_regions = spec.min_regions;
        self.max_regions = spec.max_regions;
        self.min_tokens = spec.min_tokens;
        self.max_tokens = spec.max_tokens;
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Layers, lowest precedence first: built-in defaults, `SEG_SEED`, the
/// base file (a previous run's resolved config), the `--config` file,
/// then `key=value` overrides.
pub struct Resolver {
    map: Map<String, Value>,
}

impl Resolver {
    pub fn new(seed_env: Option<&str>) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("RunConfig serializes to an object")
        };
        if let Some(s) = seed_env {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            map.insert("seed".into(), seed.into());
        }
        Ok(Self { map })
    }

    pub fn from_env() -> Result<Self> {
        Self::new(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(obj) = value else {
            return Err(usage(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        };
        for (k, v) in obj {
            self.set_value(k, v)?;
        }
        Ok(self)
    }

    pub fn set_value(&mut self, key: String, value: Value) -> Result<()> {
        if !self.map.contains_key(&key) {
            return Err(usage(format!("unknown config key {key:?}")));
        }
        self.map.insert(key, value);
        Ok(())
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        if let Some(v) = value {
            self.set_value(key.to_string(), serde_json::to_value(v)?)?;
        }
        Ok(())
    }

    /// `key=value`; the value is read as JSON, falling back to a string.
    pub fn assign(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            bail!(usage(format!("--set expects key=value, got {pair:?}")));
        };
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set_value(k.trim().to_string(), value)
    }

    pub fn resolve(self) -> Result<RunConfig> {
        serde_json::from_value(Value::Object(self.map))
            .map_err(|e| usage(format!("invalid config: {e}")))
    }
}

/// Marks an error as a usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: String) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_defaults_env_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 7, "variant": "cst"}"#).unwrap();

        let cfg = Resolver::new(Some("11")).unwrap().resolve().unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.epochs, 20);

        let mut r = Resolver::new(Some("11")).unwrap().file(&path).unwrap();
        r.set("epochs", Some(9)).unwrap();
        r.assign("stacking=eset").unwrap();
        r.assign("hard_threshold=0.5").unwrap();
        let cfg = r.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.epochs, cfg.variant), (11, 9, Variant::Cst));
        assert_eq!(cfg.stacking, Stacking::Eset);
        assert_eq!(cfg.hard_threshold, Some(0.5));

        std::fs::write(&path, r#"{"seed": 3}"#).unwrap();
        let cfg = Resolver::new(Some("11"))
            .unwrap()
            .file(&path)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut r = Resolver::new(None).unwrap();
        assert!(r
            .assign("no_such_key=1")
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
        assert!(r.assign("missing-equals").is_err());
        r.assign("variant=transformer").unwrap();
        assert!(r.resolve().is_err());
        assert!(Resolver::new(Some("abc")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 5,
            decoder: Decoder::Weighted,
            ..RunConfig::default()
        };
        cfg.write_to(dir.path()).unwrap();
        let back = Resolver::new(None)
            .unwrap()
            .file(&dir.path().join(RESOLVED_CONFIG))
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn default_matches_toy_scale() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.n_train, cfg.n_val), (2000, 500));
        assert_eq!(cfg.model_config(), ModelConfig::toy());
        assert_eq!(cfg.task_spec(), SyntheticTaskSpec::default());
    }
}
