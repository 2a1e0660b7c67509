use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_sgt1, write_sgt1, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub(crate) fn insert(&mut self, id: ParamId, g: Tensor) {
        match self.by_param.get_mut(&id) {
            Some(existing) => existing.add_assign(&g).expect("gradient shapes agree"),
            None => {
                self.by_param.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }
}

/// Named trainable parameters in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a backward pass's gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    /// Replaces every value from a checkpoint. Names, order and shapes must
    /// match this store exactly.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = read_checkpoint(&mut f)?;
        if records.len() != self.params.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for ((name, value), p) in records.iter().zip(&self.params) {
            if *name != p.name || value.shape() != p.value.shape() {
                return Err(Error::Load(format!(
                    "checkpoint entry {name} {:?} does not match parameter {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for ((_, value), p) in records.into_iter().zip(&mut self.params) {
            p.value = value;
        }
        Ok(())
    }
}

/// Writes `(u64 LE name length, name bytes, SGT1 tensor)` per parameter value.
pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParameterStore) -> Result<()> {
    for p in store.iter() {
        w.write_all(&(p.name.len() as u64).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        write_sgt1(w, &p.value)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 8];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let n = u64::from_le_bytes(len) as usize;
        if n > 4096 {
            return Err(Error::Format(format!("implausible name length {n}")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, read_sgt1(r)?));
    }
    Ok(out)
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}
