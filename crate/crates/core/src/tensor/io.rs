//! SGT1 binary tensor files: the magic `SGT1`, a `u8` rank, `rank`
//! little-endian `u64` extents, then the values as little-endian IEEE-754
//! doubles in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const SGT1_MAGIC: [u8; 4] = *b"SGT1";

pub fn write_sgt1<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in u8", t.rank())))?;
    w.write_all(&SGT1_MAGIC)?;
    w.write_all(&[rank])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_sgt1<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != SGT1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut word = [0u8; 8];
    for _ in 0..rank[0] {
        r.read_exact(&mut word)?;
        let extent = usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| Error::Format("extent overflows usize".into()))?;
        shape.push(extent);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("extent product overflows: {shape:?}")))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_sgt1(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        read_sgt1(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_sgt1(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], &[0x53, 0x47, 0x54, 0x31]);
        assert_eq!(buf[4], 2);
        assert_eq!(&buf[5..13], &1u64.to_le_bytes());
        assert_eq!(&buf[13..21], &2u64.to_le_bytes());
        assert_eq!(&buf[21..29], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 5 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_sgt1(&mut &b"SGT2\x00"[..]).is_err());
        let t = Tensor::zeros(&[3]);
        let mut buf = Vec::new();
        write_sgt1(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_sgt1(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| (seed.wrapping_add(i as u64) as f64).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_sgt1(&mut buf, &t).unwrap();
            prop_assert_eq!(read_sgt1(&mut buf.as_slice()).unwrap(), t);
        }
    }
}
