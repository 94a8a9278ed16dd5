//! Named-tensor checkpoints (UCKP) and uniform weight averaging.
//!
//! UCKP layout, little-endian:
//!
//! ```text
//! "UCKP" | version u32 (=1) | tensor count u32
//! per tensor: name (u16 len + UTF-8) | rank u8 | rank * u32 dims | f32 data
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::embedding_store::OffsetReader;
use crate::error::{Error, Result};

pub const UCKP_MAGIC: &[u8; 4] = b"UCKP";
pub const UCKP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    name: String,
    dims: Vec<u32>,
    data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!(
                "tensor name of {} bytes is too long",
                name.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Invalid(format!("tensor {name:?} has rank {}", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("tensor {name:?} has a zero dimension")));
        }
        let expected = element_count(&dims);
        if expected != Some(data.len()) {
            return Err(Error::Shape(format!(
                "length mismatch: tensor {name:?} dims {dims:?} vs {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("tensor {name:?} has a non-finite value at {i}")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

/// Ordered map from tensor name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<TensorEntry>) -> Result<Self> {
        let mut ckpt = Self::new();
        for t in tensors {
            ckpt.insert(t)?;
        }
        Ok(ckpt)
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, tensor: TensorEntry) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::Invalid(format!("duplicate tensor name {:?}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[TensorEntry] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut sink: W) -> Result<u64> {
    let count = u32::try_from(ckpt.len()).map_err(|_| Error::Invalid("too many tensors".into()))?;
    let mut buf = Vec::with_capacity(64 * 1024);
    buf.extend_from_slice(UCKP_MAGIC);
    buf.extend_from_slice(&UCKP_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    let mut written = 0u64;
    for t in &ckpt.tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dims.len() as u8);
        for d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= 64 * 1024 {
                sink.write_all(&buf)?;
                written += buf.len() as u64;
                buf.clear();
            }
        }
    }
    sink.write_all(&buf)?;
    written += buf.len() as u64;
    sink.flush()?;
    Ok(written)
}

pub fn read_checkpoint<R: Read>(source: R) -> Result<Checkpoint> {
    let mut r = OffsetReader::new(source);
    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != UCKP_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != UCKP_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut ckpt = Checkpoint::new();
    for _ in 0..count {
        let start = r.offset;
        let name = r.string("tensor name")?;
        if ckpt.get(&name).is_some() {
            return Err(Error::format(start, format!("duplicate tensor name {name:?}")));
        }
        let rank = r.u8("tensor rank")?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let at = r.offset;
            let d = r.u32("tensor dims")?;
            if d == 0 {
                return Err(Error::format(at, format!("tensor {name:?} has a zero dimension")));
            }
            dims.push(d);
        }
        let len = element_count(&dims)
            .ok_or_else(|| Error::format(start, format!("length mismatch: tensor {name:?} too large")))?;
        let data = r.f32s(len, "tensor data")?;
        ckpt.tensors.push(TensorEntry { name, dims, data });
    }
    r.expect_eof()?;
    Ok(ckpt)
}

pub fn write_checkpoint_file(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<u64> {
    write_checkpoint(ckpt, io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(io::BufReader::new(std::fs::File::open(path)?))
}

/// Element-wise arithmetic mean of checkpoints sharing names and shapes.
///
/// Sums are accumulated in `f64` in list order and rounded once to `f32`.
/// Tensor order follows the first checkpoint.
pub fn soup_uniform(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.len() < 2 {
        return Err(Error::Invalid(format!(
            "soup needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let first = &checkpoints[0];
    let first_names: BTreeSet<&str> = first.names().collect();
    let lookups: Vec<HashMap<&str, &TensorEntry>> = checkpoints
        .iter()
        .map(|c| c.tensors.iter().map(|t| (t.name.as_str(), t)).collect())
        .collect();
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        let names: BTreeSet<&str> = c.names().collect();
        if names != first_names {
            let diff: Vec<&str> = first_names.symmetric_difference(&names).copied().collect();
            return Err(Error::Invalid(format!(
                "checkpoint {i} tensor names differ from checkpoint 0: {}",
                diff.join(", ")
            )));
        }
        for t in &first.tensors {
            let other = lookups[i][t.name.as_str()];
            if other.dims != t.dims {
                return Err(Error::Shape(format!(
                    "tensor {:?}: {:?} in checkpoint 0 vs {:?} in checkpoint {i}",
                    t.name, t.dims, other.dims
                )));
            }
        }
    }

    let inv = 1.0 / checkpoints.len() as f64;
    let tensors = first
        .tensors
        .par_iter()
        .map(|t| {
            let mut acc = vec![0f64; t.data.len()];
            for lookup in &lookups {
                for (a, &v) in acc.iter_mut().zip(&lookup[t.name.as_str()].data) {
                    *a += f64::from(v);
                }
            }
            TensorEntry {
                name: t.name.clone(),
                dims: t.dims.clone(),
                data: acc.into_iter().map(|a| (a * inv) as f32).collect(),
            }
        })
        .collect();
    Ok(Checkpoint { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tensor() -> Checkpoint {
        Checkpoint::from_tensors(vec![
            TensorEntry::new("w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 0.25, -1.0]).unwrap(),
            TensorEntry::new("b", vec![3], vec![0.5, 0.5, -0.5]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        let n = write_checkpoint(&two_tensor(), &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), two_tensor());
    }

    #[test]
    fn duplicate_name_in_file() {
        let mut ckpt = two_tensor();
        assert!(ckpt.insert(TensorEntry::new("w", vec![1], vec![0.0]).unwrap()).is_err());
        // rename "b" to "w" in the serialized bytes
        let mut buf = Vec::new();
        write_checkpoint(&two_tensor(), &mut buf).unwrap();
        let pos = 12 + 2 + 1 + 1 + 8 + 24 + 2;
        assert_eq!(buf[pos], b'b');
        buf[pos] = b'w';
        let err = read_checkpoint(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("duplicate tensor name"), "{err}");
    }

    #[test]
    fn length_mismatch() {
        let err = TensorEntry::new("w", vec![2, 3], vec![0.0; 5]).unwrap_err().to_string();
        assert!(err.contains("length mismatch"), "{err}");
        // file declaring 2x3 but holding only 5 floats
        let mut buf = Vec::new();
        let one = Checkpoint::from_tensors(vec![TensorEntry::new("w", vec![2, 3], vec![0.0; 6]).unwrap()]).unwrap();
        write_checkpoint(&one, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        let err = read_checkpoint(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
    }

    #[test]
    fn bad_magic_and_trailing() {
        let mut buf = Vec::new();
        write_checkpoint(&two_tensor(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert_eq!(
            read_checkpoint(&bad[..]).unwrap_err().to_string(),
            "bad magic at offset 0"
        );
        buf.extend_from_slice(&[0, 0]);
        assert!(read_checkpoint(&buf[..])
            .unwrap_err()
            .to_string()
            .contains("length mismatch"));
    }

    #[test]
    fn soup_errors() {
        assert!(soup_uniform(&[two_tensor()]).is_err());
        let other = Checkpoint::from_tensors(vec![
            TensorEntry::new("w", vec![2, 3], vec![0.0; 6]).unwrap(),
            TensorEntry::new("c", vec![3], vec![0.0; 3]).unwrap(),
        ])
        .unwrap();
        let err = soup_uniform(&[two_tensor(), other]).unwrap_err().to_string();
        assert!(err.contains("b, c"), "{err}");
        let reshaped = Checkpoint::from_tensors(vec![
            TensorEntry::new("w", vec![3, 2], vec![0.0; 6]).unwrap(),
            TensorEntry::new("b", vec![3], vec![0.0; 3]).unwrap(),
        ])
        .unwrap();
        let err = soup_uniform(&[two_tensor(), reshaped]).unwrap_err().to_string();
        assert!(err.contains("\"w\""), "{err}");
    }

    #[test]
    fn soup_of_copies_and_negation() {
        let w = two_tensor();
        let out = soup_uniform(&[w.clone(), w.clone(), w.clone()]).unwrap();
        assert_eq!(out, w);
        let neg = Checkpoint::from_tensors(
            w.tensors()
                .iter()
                .map(|t| TensorEntry::new(t.name(), t.dims().to_vec(), t.data().iter().map(|v| -v).collect()).unwrap())
                .collect(),
        )
        .unwrap();
        let zero = soup_uniform(&[w, neg]).unwrap();
        assert!(zero.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
