use super::Tensor;
use crate::error::{Error, Result};

/// Validity flags over batch and sequence positions (`true` = valid).
///
/// The last axis is the sequence axis; every sequence must contain at least
/// one valid position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    flags: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, flags: Vec<bool>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != flags.len() {
            return Err(Error::InvalidMask(format!(
                "shape {shape:?} does not fit {} flags",
                flags.len()
            )));
        }
        let seq = *shape.last().unwrap();
        if let Some(i) = flags.chunks(seq).position(|s| !s.iter().any(|&f| f)) {
            return Err(Error::InvalidMask(format!("sequence {i} is fully masked")));
        }
        Ok(Self { shape, flags })
    }

    /// Mask of `batch` sequences of length `max_len` whose first
    /// `lengths[b]` positions are valid.
    pub fn from_lengths(lengths: &[usize], max_len: usize) -> Result<Self> {
        let flags = lengths
            .iter()
            .flat_map(|&n| (0..max_len).map(move |i| i < n))
            .collect();
        Self::new(vec![lengths.len(), max_len], flags)
    }

    pub fn all_valid(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            flags: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn seq_len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn valid_count(&self, sequence: usize) -> usize {
        let n = self.seq_len();
        self.flags[sequence * n..(sequence + 1) * n]
            .iter()
            .filter(|&&f| f)
            .count()
    }

    /// 1.0/0.0 tensor with the mask's own shape.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .flags
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("mask shape is valid")
    }

    /// 1.0/0.0 tensor reshaped to `shape` (same element count).
    pub fn to_tensor_shaped(&self, shape: &[usize]) -> Result<Tensor> {
        self.to_tensor().reshape(shape)
    }

    /// Selects whole sequences (rows of the leading axes) by index.
    pub fn select(&self, sequences: &[usize]) -> Result<Self> {
        let n = self.seq_len();
        let flags = sequences
            .iter()
            .flat_map(|&s| self.flags[s * n..(s + 1) * n].iter().copied())
            .collect();
        Self::new(vec![sequences.len(), n], flags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_fully_masked_sequence() {
        assert!(Mask::new(vec![2, 2], vec![true, false, false, false]).is_err());
        assert!(Mask::from_lengths(&[1, 0], 3).is_err());
        let m = Mask::from_lengths(&[1, 3], 3).unwrap();
        assert_eq!(m.valid_count(0), 1);
        assert_eq!(m.to_tensor().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
