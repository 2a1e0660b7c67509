//! Planted-rule synthetic VQA task: generation, on-disk layout and batching.
//!
//! Each example holds a bag of region vectors drawn around latent
//! prototypes and a short question containing exactly one query token.
//! Query token `k + 1` asks about prototype `k`; the answer is `k` when
//! that prototype is among the regions and the "none" answer
//! (`n_prototypes`) otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

pub const PAD_TOKEN: usize = 0;
const MANIFEST_FORMAT: &str = "segformer-vqa-1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_prototypes: usize,
    pub vocab: usize,
    pub answers: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub d_img: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_prototypes: 7,
            vocab: 20,
            answers: 8,
            noise_std: 0.05,
            seed: 0,
            d_img: 32,
            min_regions: 3,
            max_regions: 10,
            min_tokens: 1,
            max_tokens: 8,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_prototypes < 2 {
            // "none" examples need a prototype other than the queried one
            return fail("n_prototypes must be at least 2".into());
        }
        if self.n_prototypes > self.answers.saturating_sub(1) {
            return fail(format!(
                "n_prototypes ({}) must be <= N - 1 ({}) to leave room for the none answer",
                self.n_prototypes,
                self.answers.saturating_sub(1)
            ));
        }
        if self.vocab < self.first_filler() + 1 {
            return fail(format!(
                "vocab ({}) must be >= n_prototypes + 2 (pad, query tokens, at least one filler)",
                self.vocab
            ));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return fail(format!(
                "region bounds [{}, {}] are invalid",
                self.min_regions, self.max_regions
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail(format!(
                "token bounds [{}, {}] are invalid",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.d_img == 0 {
            return fail("d_img must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn none_answer(&self) -> usize {
        self.n_prototypes
    }

    pub fn classes(&self) -> usize {
        self.n_prototypes + 1
    }

    fn first_filler(&self) -> usize {
        self.n_prototypes + 1
    }

    /// Query token id for prototype `k`, and its inverse.
    pub fn query_token(&self, k: usize) -> usize {
        k + 1
    }

    pub fn query_of(&self, token: usize) -> Option<usize> {
        (token >= 1 && token <= self.n_prototypes).then(|| token - 1)
    }

    /// Latent prototype vectors, `[n_prototypes, d_img]`, standard normal.
    pub fn prototypes(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5e_ed0f_9a7e);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let data = (0..self.n_prototypes * self.d_img)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Tensor::new(vec![self.n_prototypes, self.d_img], data).expect("positive extents")
    }
}

/// A collection of padded examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[E, max_regions, d_img]`, zero at padded rows.
    pub regions: Tensor,
    pub region_mask: Mask,
    /// `E * max_tokens` ids, `PAD_TOKEN` at padded positions.
    pub tokens: Vec<usize>,
    pub token_mask: Mask,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_regions(&self) -> usize {
        self.regions.shape()[1]
    }

    pub fn max_tokens(&self) -> usize {
        self.token_mask.seq_len()
    }

    pub fn d_img(&self) -> usize {
        self.regions.shape()[2]
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("example {bad} of {}", self.len())));
        }
        let row = self.max_regions() * self.d_img();
        let mut regions = Vec::with_capacity(indices.len() * row);
        let t = self.max_tokens();
        let mut tokens = Vec::with_capacity(indices.len() * t);
        for &i in indices {
            regions.extend_from_slice(&self.regions.data()[i * row..(i + 1) * row]);
            tokens.extend_from_slice(&self.tokens[i * t..(i + 1) * t]);
        }
        Ok(Self {
            regions: Tensor::new(
                vec![indices.len(), self.max_regions(), self.d_img()],
                regions,
            )?,
            region_mask: self.region_mask.select(indices)?,
            tokens,
            token_mask: self.token_mask.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<VqaBatch> {
        let d = self.subset(indices)?;
        Ok(VqaBatch {
            regions: d.regions,
            region_mask: d.region_mask,
            tokens: d.tokens,
            token_mask: d.token_mask,
            answers: d.labels,
        })
    }
}

/// One minibatch, laid out exactly like [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct VqaBatch {
    pub regions: Tensor,
    pub region_mask: Mask,
    pub tokens: Vec<usize>,
    pub token_mask: Mask,
    pub answers: Vec<usize>,
}

impl VqaBatch {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Generated examples plus the index lists of the two splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub spec: SyntheticTaskSpec,
    pub data: Dataset,
    pub prototypes: Tensor,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl DatasetFiles {
    pub fn train_set(&self) -> Result<Dataset> {
        self.data.subset(&self.train)
    }

    pub fn val_set(&self) -> Result<Dataset> {
        self.data.subset(&self.val)
    }
}

struct Example {
    regions: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    label: usize,
}

/// Example `index` depends only on the spec and the index. Answers cycle
/// through the classes so every split is stratified.
fn generate_example(spec: &SyntheticTaskSpec, prototypes: &Tensor, index: usize) -> Example {
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let label = index % spec.classes();
    let none = label == spec.none_answer();
    let query = if none {
        rng.random_range(0..spec.n_prototypes)
    } else {
        label
    };

    let n_r = rng.random_range(spec.min_regions..=spec.max_regions);
    let others: Vec<usize> = (0..spec.n_prototypes).filter(|&k| k != query).collect();
    let mut kinds: Vec<usize> = (0..n_r)
        .map(|_| others[rng.random_range(0..others.len())])
        .collect();
    if !none {
        let slot = rng.random_range(0..n_r);
        kinds[slot] = query;
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let d = spec.d_img;
    let regions = kinds
        .iter()
        .map(|&k| {
            let proto = &prototypes.data()[k * d..(k + 1) * d];
            proto
                .iter()
                .map(|&p| {
                    if spec.noise_std == 0.0 {
                        p
                    } else {
                        p + noise.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect();

    let m = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let mut tokens: Vec<usize> = (0..m)
        .map(|_| rng.random_range(spec.first_filler()..spec.vocab))
        .collect();
    let slot = rng.random_range(0..m);
    tokens[slot] = spec.query_token(query);
    Example {
        regions,
        tokens,
        label,
    }
}

/// Examples `0..n_train` form the training split and the next `n_val` the
/// validation split.
pub fn generate_dataset(
    spec: &SyntheticTaskSpec,
    n_train: usize,
    n_val: usize,
) -> Result<DatasetFiles> {
    spec.validate()?;
    let total = n_train + n_val;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config("n_train and n_val must be positive".into()));
    }
    let prototypes = spec.prototypes();
    let (max_r, max_t, d) = (spec.max_regions, spec.max_tokens, spec.d_img);
    let mut regions = vec![0.0; total * max_r * d];
    let mut region_flags = vec![false; total * max_r];
    let mut tokens = vec![PAD_TOKEN; total * max_t];
    let mut token_flags = vec![false; total * max_t];
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let ex = generate_example(spec, &prototypes, i);
        for (r, row) in ex.regions.iter().enumerate() {
            let start = (i * max_r + r) * d;
            regions[start..start + d].copy_from_slice(row);
            region_flags[i * max_r + r] = true;
        }
        for (t, &tok) in ex.tokens.iter().enumerate() {
            tokens[i * max_t + t] = tok;
            token_flags[i * max_t + t] = true;
        }
        labels.push(ex.label);
    }
    Ok(DatasetFiles {
        spec: *spec,
        data: Dataset {
            regions: Tensor::new(vec![total, max_r, d], regions)?,
            region_mask: Mask::new(vec![total, max_r], region_flags)?,
            tokens,
            token_mask: Mask::new(vec![total, max_t], token_flags)?,
            labels,
        },
        prototypes,
        train: (0..n_train).collect(),
        val: (n_train..total).collect(),
    })
}

/// Applies the planted rule to raw contents: finds the query token, matches
/// every valid region to its nearest prototype, and answers accordingly.
#[derive(Debug, Clone)]
pub struct RuleOracle {
    spec: SyntheticTaskSpec,
    prototypes: Tensor,
}

impl RuleOracle {
    pub fn new(spec: SyntheticTaskSpec, prototypes: Tensor) -> Self {
        Self { spec, prototypes }
    }

    fn nearest(&self, v: &[f64]) -> usize {
        let d = self.spec.d_img;
        let mut best = (f64::INFINITY, 0);
        for (k, p) in self.prototypes.data().chunks(d).enumerate() {
            let dist: f64 = p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        best.1
    }

    pub fn predict(&self, data: &Dataset) -> Vec<usize> {
        let (max_r, max_t, d) = (data.max_regions(), data.max_tokens(), data.d_img());
        (0..data.len())
            .map(|i| {
                let query = (0..max_t)
                    .filter(|&t| data.token_mask.flags()[i * max_t + t])
                    .find_map(|t| self.spec.query_of(data.tokens[i * max_t + t]));
                let Some(q) = query else {
                    return self.spec.none_answer();
                };
                let present = (0..max_r)
                    .filter(|&r| data.region_mask.flags()[i * max_r + r])
                    .any(|r| {
                        let start = (i * max_r + r) * d;
                        self.nearest(&data.regions.data()[start..start + d]) == q
                    });
                if present {
                    q
                } else {
                    self.spec.none_answer()
                }
            })
            .collect()
    }
}

/// Per-epoch shuffled minibatch index lists.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

fn ids_tensor(ids: &[usize], shape: Vec<usize>) -> Result<Tensor> {
    Tensor::new(shape, ids.iter().map(|&i| i as f64).collect())
}

fn tensor_ids(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                Ok(v as usize)
            } else {
                Err(Error::Load(format!("{what} holds non-integer value {v}")))
            }
        })
        .collect()
}

fn write_split(path: &Path, indices: &[usize]) -> Result<()> {
    let mut s = String::new();
    for i in indices {
        writeln!(s, "{i}").expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::Load(format!("{}: bad index {l:?}", path.display())))
        })
        .collect()
}

fn manifest(files: &DatasetFiles) -> String {
    let s = &files.spec;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").expect("write to string");
    kv("format", MANIFEST_FORMAT.into());
    kv("examples", files.data.len().to_string());
    kv("n_train", files.train.len().to_string());
    kv("n_val", files.val.len().to_string());
    kv("n_prototypes", s.n_prototypes.to_string());
    kv("vocab", s.vocab.to_string());
    kv("answers", s.answers.to_string());
    kv("noise_std", s.noise_std.to_string());
    kv("seed", s.seed.to_string());
    kv("d_img", s.d_img.to_string());
    kv("min_regions", s.min_regions.to_string());
    kv("max_regions", s.max_regions.to_string());
    kv("min_tokens", s.min_tokens.to_string());
    kv("max_tokens", s.max_tokens.to_string());
    out
}

fn parse_manifest(text: &str) -> Result<SyntheticTaskSpec> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Load(format!("manifest line {line:?} is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if map.get("format").map(String::as_str) != Some(MANIFEST_FORMAT) {
        return Err(Error::Load(format!(
            "manifest format is not {MANIFEST_FORMAT}"
        )));
    }
    fn get<T: std::str::FromStr>(
        map: &std::collections::BTreeMap<String, String>,
        k: &str,
    ) -> Result<T> {
        map.get(k)
            .ok_or_else(|| Error::Load(format!("manifest is missing {k}")))?
            .parse()
            .map_err(|_| Error::Load(format!("manifest value for {k} does not parse")))
    }
    Ok(SyntheticTaskSpec {
        n_prototypes: get(&map, "n_prototypes")?,
        vocab: get(&map, "vocab")?,
        answers: get(&map, "answers")?,
        noise_std: get(&map, "noise_std")?,
        seed: get(&map, "seed")?,
        d_img: get(&map, "d_img")?,
        min_regions: get(&map, "min_regions")?,
        max_regions: get(&map, "max_regions")?,
        min_tokens: get(&map, "min_tokens")?,
        max_tokens: get(&map, "max_tokens")?,
    })
}

/// Writes `manifest.txt`, `regions.sgt1`, `tokens.sgt1`, `masks.sgt1`
/// (`[E, max_regions + max_tokens]`, region flags first), `labels.sgt1`,
/// `prototypes.sgt1`, `train.split` and `val.split`.
pub fn write_dataset(dir: impl AsRef<Path>, files: &DatasetFiles) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let d = &files.data;
    let e = d.len();
    let (max_r, max_t) = (d.max_regions(), d.max_tokens());
    fs::write(dir.join("manifest.txt"), manifest(files))?;
    d.regions.save(dir.join("regions.sgt1"))?;
    ids_tensor(&d.tokens, vec![e, max_t])?.save(dir.join("tokens.sgt1"))?;
    let mut masks = Vec::with_capacity(e * (max_r + max_t));
    for i in 0..e {
        let r = &d.region_mask.flags()[i * max_r..(i + 1) * max_r];
        let t = &d.token_mask.flags()[i * max_t..(i + 1) * max_t];
        masks.extend(r.iter().chain(t).map(|&f| if f { 1.0 } else { 0.0 }));
    }
    Tensor::new(vec![e, max_r + max_t], masks)?.save(dir.join("masks.sgt1"))?;
    ids_tensor(&d.labels, vec![e])?.save(dir.join("labels.sgt1"))?;
    files.prototypes.save(dir.join("prototypes.sgt1"))?;
    write_split(&dir.join("train.split"), &files.train)?;
    write_split(&dir.join("val.split"), &files.val)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`], checking every file
/// against the manifest. The region tensor may come from any producer.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetFiles> {
    let dir = dir.as_ref();
    let spec = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let regions = Tensor::load(dir.join("regions.sgt1"))?;
    if regions.rank() != 3 {
        return Err(Error::Load(format!(
            "regions must be rank 3, got {:?}",
            regions.shape()
        )));
    }
    let (e, max_r, d) = (regions.shape()[0], regions.shape()[1], regions.shape()[2]);
    if d != spec.d_img || max_r != spec.max_regions {
        return Err(Error::Load(format!(
            "regions {:?} disagree with manifest (max_regions {}, d_img {})",
            regions.shape(),
            spec.max_regions,
            spec.d_img
        )));
    }
    let max_t = spec.max_tokens;
    let tokens_t = Tensor::load(dir.join("tokens.sgt1"))?;
    let masks = Tensor::load(dir.join("masks.sgt1"))?;
    let labels_t = Tensor::load(dir.join("labels.sgt1"))?;
    if tokens_t.shape() != [e, max_t]
        || masks.shape() != [e, max_r + max_t]
        || labels_t.shape() != [e]
    {
        return Err(Error::Load(format!(
            "tokens {:?}, masks {:?}, labels {:?} disagree with {e} examples",
            tokens_t.shape(),
            masks.shape(),
            labels_t.shape()
        )));
    }
    let mut region_flags = Vec::with_capacity(e * max_r);
    let mut token_flags = Vec::with_capacity(e * max_t);
    for row in masks.data().chunks(max_r + max_t) {
        region_flags.extend(row[..max_r].iter().map(|&v| v != 0.0));
        token_flags.extend(row[max_r..].iter().map(|&v| v != 0.0));
    }
    let tokens = tensor_ids(&tokens_t, "tokens")?;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= spec.vocab) {
        return Err(Error::Load(format!(
            "token id {bad} outside vocab {}",
            spec.vocab
        )));
    }
    let labels = tensor_ids(&labels_t, "labels")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.answers) {
        return Err(Error::Load(format!(
            "label {bad} outside {} answers",
            spec.answers
        )));
    }
    let train = read_split(&dir.join("train.split"))?;
    let val = read_split(&dir.join("val.split"))?;
    if let Some(&bad) = train.iter().chain(&val).find(|&&i| i >= e) {
        return Err(Error::Load(format!(
            "split index {bad} outside {e} examples"
        )));
    }
    let prototypes_path = dir.join("prototypes.sgt1");
    let prototypes = if prototypes_path.exists() {
        Tensor::load(prototypes_path)?
    } else {
        spec.prototypes()
    };
    Ok(DatasetFiles {
        spec,
        data: Dataset {
            regions,
            region_mask: Mask::new(vec![e, max_r], region_flags)?,
            tokens,
            token_mask: Mask::new(vec![e, max_t], token_flags)?,
            labels,
        },
        prototypes,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_labels_follow_the_rule() {
        let spec = SyntheticTaskSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let files = generate_dataset(&spec, 300, 100).unwrap();
        let oracle = RuleOracle::new(spec, files.prototypes.clone());
        assert_eq!(oracle.predict(&files.data), files.data.labels);
    }

    #[test]
    fn noisy_labels_still_recoverable() {
        let files = generate_dataset(&SyntheticTaskSpec::default(), 300, 100).unwrap();
        let oracle = RuleOracle::new(files.spec, files.prototypes.clone());
        assert_eq!(oracle.predict(&files.data), files.data.labels);
    }

    #[test]
    fn padding_is_zero_and_bounds_hold() {
        let spec = SyntheticTaskSpec::default();
        let files = generate_dataset(&spec, 200, 50).unwrap();
        let d = &files.data;
        for i in 0..d.len() {
            let nr = d.region_mask.valid_count(i);
            let nt = d.token_mask.valid_count(i);
            assert!((spec.min_regions..=spec.max_regions).contains(&nr));
            assert!((spec.min_tokens..=spec.max_tokens).contains(&nt));
            for r in 0..d.max_regions() {
                let row = &d.regions.data()[(i * d.max_regions() + r) * d.d_img()..][..d.d_img()];
                if !d.region_mask.flags()[i * d.max_regions() + r] {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
            for t in 0..d.max_tokens() {
                let valid = d.token_mask.flags()[i * d.max_tokens() + t];
                assert_eq!(valid, d.tokens[i * d.max_tokens() + t] != PAD_TOKEN);
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        let spec = SyntheticTaskSpec::default();
        let files = generate_dataset(&spec, 1000, 200).unwrap();
        let mut counts = vec![0usize; spec.answers];
        for &l in &files.data.labels[..1000] {
            counts[l] += 1;
        }
        let uniform = 1000.0 / spec.classes() as f64;
        for c in counts {
            assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "{c}");
        }
    }

    #[test]
    fn unsatisfiable_specs_rejected() {
        let spec = SyntheticTaskSpec {
            n_prototypes: 8,
            ..Default::default()
        };
        let err = generate_dataset(&spec, 10, 10).unwrap_err();
        assert!(err.to_string().contains("N - 1"));
        let spec = SyntheticTaskSpec {
            vocab: 8,
            ..Default::default()
        };
        assert!(generate_dataset(&spec, 10, 10).is_err());
    }

    #[test]
    fn disk_round_trip_is_byte_stable() {
        let files = generate_dataset(&SyntheticTaskSpec::default(), 40, 10).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &files).unwrap();
        let again = generate_dataset(&SyntheticTaskSpec::default(), 40, 10).unwrap();
        write_dataset(b.path(), &again).unwrap();
        for name in [
            "manifest.txt",
            "regions.sgt1",
            "tokens.sgt1",
            "masks.sgt1",
            "labels.sgt1",
            "train.split",
        ] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        assert_eq!(read_dataset(a.path()).unwrap(), files);
    }

    #[test]
    fn batches_cover_every_example_once() {
        let batches = epoch_batches(70, 32, 3, 1);
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![32, 32, 6]
        );
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
        assert_ne!(epoch_batches(70, 32, 3, 1), epoch_batches(70, 32, 3, 2));
    }
}
