//! Embedding sets and the UEMB binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UEMB" | version u32 (=1) | n u64 | d u32 | flags u32 (bit 0 = normalized)
//! n*d f32 row-major | n * (u16 byte length + UTF-8 id)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const UEMB_MAGIC: &[u8; 4] = b"UEMB";
pub const UEMB_VERSION: u32 = 1;
pub const UEMB_HEADER_LEN: u64 = 24;

const FLAG_NORMALIZED: u32 = 1;

/// Tolerance on `| ‖row‖ - 1 |` for sets flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// `n` ids plus an `n x d` row-major `f32` matrix.
///
/// Sets built through [`EmbeddingSet::new`] always satisfy their invariants;
/// [`EmbeddingSet::from_parts_unchecked`] exists so that [`validate`] can be
/// exercised on data straight from an untrusted producer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    data: Vec<f32>,
    dim: usize,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        let set = Self::from_parts_unchecked(ids, dim, data, normalized)?;
        if let Some(v) = validate(&set).into_iter().next() {
            return Err(Error::Invalid(v.to_string()));
        }
        Ok(set)
    }

    /// Builds a set checking only the structural shape (`d > 0`, `data.len() == n*d`).
    pub fn from_parts_unchecked(ids: Vec<String>, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids x {dim} dims needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        Ok(Self {
            ids,
            data,
            dim,
            normalized,
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim, Vec::new(), false)
    }

    /// Convenience constructor from row vectors.
    pub fn from_rows<S: Into<String>>(rows: impl IntoIterator<Item = (S, Vec<f32>)>, normalized: bool) -> Result<Self> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (id, row) in rows {
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Shape(format!("row of length {} in a {d}-dim set", row.len())))
                }
                _ => {}
            }
            ids.push(id.into());
            data.extend(row);
        }
        let dim = dim.ok_or_else(|| Error::Invalid("from_rows needs at least one row".into()))?;
        Self::new(ids, dim, data, normalized)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Position of `id`, linear scan.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn into_parts(self) -> (Vec<String>, usize, Vec<f32>, bool) {
        (self.ids, self.dim, self.data, self.normalized)
    }

    /// Rows reordered so ids ascend.
    pub fn sorted_by_id(&self) -> EmbeddingSet {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        self.gather_rows(&order)
    }

    pub(crate) fn gather_rows(&self, order: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingSet {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            data,
            dim: self.dim,
            normalized: self.normalized,
        }
    }
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId { row: usize, id: String },
    NonFinite { row: usize, id: String, col: usize },
    NotUnitNorm { row: usize, id: String, norm: f64 },
    IdTooLong { row: usize, len: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { row, id } => write!(f, "duplicate id {id:?} at row {row}"),
            Violation::NonFinite { row, id, col } => {
                write!(f, "non-finite value at row {row} ({id:?}), column {col}")
            }
            Violation::NotUnitNorm { row, id, norm } => {
                write!(f, "row {row} ({id:?}) has norm {norm} in a normalized set")
            }
            Violation::IdTooLong { row, len } => {
                write!(f, "id at row {row} is {len} bytes, limit is {}", u16::MAX)
            }
        }
    }
}

/// Lists every invariant violation; empty when the set is clean.
pub fn validate(set: &EmbeddingSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::with_capacity(set.len());
    for (row, id) in set.ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            out.push(Violation::DuplicateId { row, id: id.clone() });
        }
        if id.len() > u16::MAX as usize {
            out.push(Violation::IdTooLong { row, len: id.len() });
        }
    }
    for (row, values) in set.rows().enumerate() {
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            out.push(Violation::NonFinite {
                row,
                id: set.ids[row].clone(),
                col,
            });
            continue;
        }
        if set.normalized {
            let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                out.push(Violation::NotUnitNorm {
                    row,
                    id: set.ids[row].clone(),
                    norm,
                });
            }
        }
    }
    out
}

/// Serializes `set` as UEMB; returns the number of bytes written.
pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut sink: W) -> Result<u64> {
    if let Some(v) = validate(set).into_iter().next() {
        return Err(Error::Invalid(v.to_string()));
    }
    let dim = u32::try_from(set.dim).map_err(|_| Error::Invalid("dimension exceeds u32".into()))?;
    let mut header = Vec::with_capacity(UEMB_HEADER_LEN as usize);
    header.extend_from_slice(UEMB_MAGIC);
    header.extend_from_slice(&UEMB_VERSION.to_le_bytes());
    header.extend_from_slice(&(set.len() as u64).to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    let flags = if set.normalized { FLAG_NORMALIZED } else { 0 };
    header.extend_from_slice(&flags.to_le_bytes());
    sink.write_all(&header)?;

    let mut written = UEMB_HEADER_LEN;
    let mut buf = Vec::with_capacity(64 * 1024);
    for chunk in set.data.chunks(16 * 1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    buf.clear();
    for id in &set.ids {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        if buf.len() >= 64 * 1024 {
            sink.write_all(&buf)?;
            written += buf.len() as u64;
            buf.clear();
        }
    }
    sink.write_all(&buf)?;
    written += buf.len() as u64;
    sink.flush()?;
    Ok(written)
}

/// Reader that tracks its byte position for error messages.
pub(crate) struct OffsetReader<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + done as u64,
                        format!("truncated payload while reading {what}"),
                    ))
                }
                Ok(n) => done += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Reads `count` little-endian f32 values, rejecting non-finite ones.
    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.offset;
        let out = self.f32s_raw(count, what)?;
        match out.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::format(
                start + 4 * i as u64,
                format!("non-finite value in {what}"),
            )),
            None => Ok(out),
        }
    }

    pub(crate) fn f32s_raw(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        // capacity grows with the data actually present, not with the declared count
        let mut out = Vec::with_capacity(count.min(1 << 20));
        let mut buf = vec![0u8; 4 * 16 * 1024];
        let mut remaining = count;
        while remaining > 0 {
            let take = remaining.min(16 * 1024);
            self.fill(&mut buf[..4 * take], what)?;
            out.extend(
                buf[..4 * take]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
            remaining -= take;
        }
        Ok(out)
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let start = self.offset;
        let mut bytes = vec![0u8; len];
        self.fill(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|_| Error::format(start, format!("invalid UTF-8 in {what}")))
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    return Err(Error::format(
                        self.offset,
                        "length mismatch: trailing bytes after declared payload",
                    ))
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Parses a UEMB stream. The whole stream must be consumed exactly.
pub fn read_embeddings<R: Read>(source: R) -> Result<EmbeddingSet> {
    parse_embeddings(source, true)
}

/// Structural parse that tolerates content violations (duplicate ids,
/// non-finite values, non-unit rows) and reports all of them.
pub fn inspect_embeddings<R: Read>(source: R) -> Result<(EmbeddingSet, Vec<Violation>)> {
    let set = parse_embeddings(source, false)?;
    let violations = validate(&set);
    Ok((set, violations))
}

fn parse_embeddings<R: Read>(source: R, strict: bool) -> Result<EmbeddingSet> {
    let mut r = OffsetReader::new(source);
    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != UEMB_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != UEMB_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = r.u64("row count")?;
    let d = r.u32("dimension")?;
    if d == 0 {
        return Err(Error::format(16, "zero dimension"));
    }
    let flags = r.u32("flags")?;
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::format(20, format!("unknown flag bits {flags:#x}")));
    }
    let count = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(d as usize))
        .ok_or_else(|| Error::format(8, "length mismatch: row count overflows"))?;
    let data = if strict {
        r.f32s(count, "embedding matrix")?
    } else {
        r.f32s_raw(count, "embedding matrix")?
    };

    let mut ids = Vec::with_capacity((n as usize).min(1 << 20));
    let mut seen = HashSet::new();
    for _ in 0..n {
        let start = r.offset;
        let id = r.string("id record")?;
        if strict && !seen.insert(id.clone()) {
            return Err(Error::format(start, format!("duplicate id {id:?}")));
        }
        ids.push(id);
    }
    r.expect_eof()?;

    let set = EmbeddingSet::from_parts_unchecked(ids, d as usize, data, flags & FLAG_NORMALIZED != 0)?;
    if strict {
        if let Some(v) = validate(&set).into_iter().next() {
            let offset = match &v {
                Violation::NotUnitNorm { row, .. } => UEMB_HEADER_LEN + 4 * (*row as u64) * u64::from(d),
                _ => UEMB_HEADER_LEN,
            };
            return Err(Error::format(offset, v.to_string()));
        }
    }
    Ok(set)
}

pub fn write_embeddings_file(set: &EmbeddingSet, path: impl AsRef<std::path::Path>) -> Result<u64> {
    let file = std::fs::File::create(path)?;
    write_embeddings(set, io::BufWriter::new(file))
}

pub fn read_embeddings_file(path: impl AsRef<std::path::Path>) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path)?;
    read_embeddings(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_row() -> EmbeddingSet {
        EmbeddingSet::new(vec!["a".into()], 2, vec![1.0, 2.0], false).unwrap()
    }

    #[rustfmt::skip]
    const ONE_ROW_BYTES: [u8; 35] = [
        0x55, 0x45, 0x4D, 0x42,
        0x01, 0x00, 0x00, 0x00,
        0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
        0x02, 0x00, 0x00, 0x00,
        0x00, 0x00, 0x00, 0x00,
        0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40,
        0x01, 0x00, 0x61,
    ];

    #[test]
    fn hand_encoded_single_row() {
        let mut buf = Vec::new();
        let n = write_embeddings(&one_row(), &mut buf).unwrap();
        assert_eq!(n, 35);
        assert_eq!(buf, ONE_ROW_BYTES);
        assert_eq!(read_embeddings(&ONE_ROW_BYTES[..]).unwrap(), one_row());
    }

    #[test]
    fn empty_set_is_header_only() {
        let mut buf = Vec::new();
        let n = write_embeddings(&EmbeddingSet::empty(4).unwrap(), &mut buf).unwrap();
        assert_eq!(n, 24);
        assert_eq!(buf.len(), 24);
        let back = read_embeddings(&buf[..]).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let set = EmbeddingSet::from_parts_unchecked(vec!["x".into(), "x".into()], 1, vec![0.0, 1.0], false).unwrap();
        let err = write_embeddings(&set, Vec::new()).unwrap_err().to_string();
        assert!(err.contains("duplicate id"), "{err}");
        assert!(EmbeddingSet::new(vec!["x".into(), "x".into()], 1, vec![0.0, 1.0], false).is_err());

        // same id twice in the file itself
        let mut bytes = Vec::new();
        let two = EmbeddingSet::new(vec!["x".into(), "y".into()], 1, vec![0.0, 1.0], false).unwrap();
        write_embeddings(&two, &mut bytes).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = b'x';
        let err = read_embeddings(&bytes[..]).unwrap_err().to_string();
        assert!(err.contains("duplicate id"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = ONE_ROW_BYTES;
        bytes[..4].copy_from_slice(b"XXXX");
        let err = read_embeddings(&bytes[..]).unwrap_err().to_string();
        assert_eq!(err, "bad magic at offset 0");
    }

    #[test]
    fn truncated_matrix() {
        let err = read_embeddings(&ONE_ROW_BYTES[..28]).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
        assert!(err.contains("offset 28"), "{err}");
    }

    #[test]
    fn unsupported_version_and_flags() {
        let mut bytes = ONE_ROW_BYTES;
        bytes[4] = 2;
        let err = read_embeddings(&bytes[..]).unwrap_err().to_string();
        assert_eq!(err, "unsupported version 2 at offset 4");
        let mut bytes = ONE_ROW_BYTES;
        bytes[20] = 0b10;
        assert!(read_embeddings(&bytes[..]).is_err());
    }

    #[test]
    fn trailing_bytes_are_length_mismatch() {
        let mut bytes = ONE_ROW_BYTES.to_vec();
        bytes.push(0);
        let err = read_embeddings(&bytes[..]).unwrap_err().to_string();
        assert!(err.contains("length mismatch") && err.ends_with("offset 35"), "{err}");
    }

    #[test]
    fn non_finite_rejected_on_read() {
        let mut bytes = ONE_ROW_BYTES;
        bytes[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = read_embeddings(&bytes[..]).unwrap_err().to_string();
        assert!(err.contains("non-finite value"), "{err}");
        assert!(err.contains("offset 28"), "{err}");
    }

    #[test]
    fn zero_dim_illegal() {
        assert!(EmbeddingSet::empty(0).is_err());
        let mut bytes = ONE_ROW_BYTES;
        bytes[16] = 0;
        assert!(read_embeddings(&bytes[..]).is_err());
    }

    #[test]
    fn validate_reports() {
        let clean = EmbeddingSet::new(vec!["a".into(), "b".into()], 2, vec![0.6, 0.8, 1.0, 0.0], true).unwrap();
        assert!(validate(&clean).is_empty());

        let long = EmbeddingSet::from_parts_unchecked(vec!["a".into(), "b".into()], 2, vec![0.6, 0.8, 2.0, 0.0], true)
            .unwrap();
        let report = validate(&long);
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::NotUnitNorm { row: 1, .. }));

        let nan = EmbeddingSet::from_parts_unchecked(vec!["a".into()], 2, vec![f32::NAN, 0.0], false).unwrap();
        let report = validate(&nan);
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("non-finite value"));
    }

    #[test]
    fn inspect_lists_every_violation() {
        let set = EmbeddingSet::new(vec!["a".into(), "b".into()], 2, vec![1.0, 0.0, 0.0, 1.0], true).unwrap();
        let mut bytes = Vec::new();
        write_embeddings(&set, &mut bytes).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = b'a';
        bytes[24..28].copy_from_slice(&f32::INFINITY.to_le_bytes());
        bytes[32..36].copy_from_slice(&3.0f32.to_le_bytes());

        assert!(read_embeddings(&bytes[..]).is_err());
        let (parsed, report) = inspect_embeddings(&bytes[..]).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(report.len(), 3);
        assert!(matches!(report[0], Violation::DuplicateId { row: 1, .. }));
        assert!(matches!(report[1], Violation::NonFinite { row: 0, col: 0, .. }));
        assert!(matches!(report[2], Violation::NotUnitNorm { row: 1, .. }));

        assert!(inspect_embeddings(&bytes[..30]).is_err());
    }
}
