//! Persistence: one binary container for every artifact, plus the results CSV.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "ASPR" | u16 version | u8 kind | u8 reserved(0)
//! u32 n_meta  { u32 key_len key  u32 val_len val }*
//! u32 n_array { u32 name_len name  u8 dtype  u64 count  data }*
//! ```
//!
//! `kind`: 1 params, 2 mask, 3 scorer, 4 autos_dataset.
//! `dtype`: 0 f32, 1 f64, 2 u8. Nothing may follow the last array.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::mask::{MaskOptions, PruneMask};
use crate::metrics::EvalReport;
use crate::nn::{Architecture, Layout, ParamVector, Real};

pub const MAGIC: &[u8; 4] = b"ASPR";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic {found:?}, expected \"ASPR\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checkpoint holds a {found} payload, expected {expected}")]
    KindMismatch { expected: PayloadKind, found: PayloadKind },
    #[error("unknown payload kind byte {0}")]
    UnknownKind(u8),
    #[error("truncated checkpoint at byte {offset}: needed {expected} bytes, {actual} available")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("array {name:?}: unknown dtype byte {code}")]
    BadDtype { name: String, code: u8 },
    #[error("array {name:?} has dtype {found}, expected {expected}")]
    DtypeMismatch { name: String, expected: &'static str, found: &'static str },
    #[error("checkpoint string is not UTF-8 at byte {offset}")]
    Utf8 { offset: usize },
    #[error("checkpoint lacks {0}")]
    Missing(String),
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
    #[error("{0} unexpected bytes after the last array")]
    TrailingBytes(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    Params = 1,
    Mask = 2,
    Scorer = 3,
    AutosDataset = 4,
}

impl PayloadKind {
    fn from_byte(b: u8) -> std::result::Result<Self, CheckpointError> {
        match b {
            1 => Ok(Self::Params),
            2 => Ok(Self::Mask),
            3 => Ok(Self::Scorer),
            4 => Ok(Self::AutosDataset),
            _ => Err(CheckpointError::UnknownKind(b)),
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Params => "params",
            PayloadKind::Mask => "mask",
            PayloadKind::Scorer => "scorer",
            PayloadKind::AutosDataset => "autos_dataset",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `values` in their native width.
    pub fn from_reals<T: Real>(values: &[T]) -> Self {
        if T::NAME == "f32" {
            ArrayData::F32(values.iter().map(|v| v.as_f64() as f32).collect())
        } else {
            ArrayData::F64(values.iter().map(|v| v.as_f64()).collect())
        }
    }

    /// Widening reads are allowed; narrowing f64 into f32 is refused.
    pub fn to_reals<T: Real>(&self, name: &str) -> std::result::Result<Vec<T>, CheckpointError> {
        match (self, T::NAME) {
            (ArrayData::F32(v), _) => Ok(v.iter().map(|&x| T::from_f64(x as f64)).collect()),
            (ArrayData::F64(v), "f64") => Ok(v.iter().map(|&x| T::from_f64(x)).collect()),
            _ => Err(CheckpointError::DtypeMismatch { name: name.into(), expected: T::NAME, found: self.dtype() }),
        }
    }
}

/// A decoded container: kind, string metadata and named typed arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: PayloadKind,
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<(String, ArrayData)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated { offset: self.pos, expected: n, actual: available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let offset = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Utf8 { offset })
    }

    fn element_count(&mut self, width: usize) -> std::result::Result<usize, CheckpointError> {
        let offset = self.pos;
        let count = self.u64()?;
        let available = self.bytes.len() - self.pos;
        match usize::try_from(count).ok().and_then(|c| c.checked_mul(width)) {
            Some(bytes) if bytes <= available => Ok(count as usize),
            _ => Err(CheckpointError::Truncated {
                offset,
                expected: (count as u128 * width as u128).min(usize::MAX as u128) as usize,
                actual: available,
            }),
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new(kind: PayloadKind) -> Self {
        Self { kind, metadata: BTreeMap::new(), arrays: Vec::new() }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn array(mut self, name: &str, data: ArrayData) -> Self {
        self.arrays.push((name.to_string(), data));
        self
    }

    pub fn get_meta(&self, key: &str) -> std::result::Result<&str, CheckpointError> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| CheckpointError::Missing(format!("metadata key {key:?}")))
    }

    /// Parses a metadata value, reporting bad text as invalid contents.
    pub fn parse_meta<V: std::str::FromStr>(&self, key: &str) -> std::result::Result<V, CheckpointError> {
        let raw = self.get_meta(key)?;
        raw.parse().map_err(|_| CheckpointError::Invalid(format!("metadata {key}={raw:?}")))
    }

    pub fn get_array(&self, name: &str) -> std::result::Result<&ArrayData, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| CheckpointError::Missing(format!("array {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend((self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for (name, data) in &self.arrays {
            put_str(&mut out, name);
            out.push(data.code());
            out.extend((data.len() as u64).to_le_bytes());
            match data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                ArrayData::U8(v) => out.extend(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| CheckpointError::BadMagic { found: bytes[..bytes.len().min(4)].to_vec() })?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let kind = PayloadKind::from_byte(r.u8()?)?;
        r.u8()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut arrays = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let code = r.u8()?;
            let data = match code {
                0 => {
                    let n = r.element_count(4)?;
                    ArrayData::F32(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                1 => {
                    let n = r.element_count(8)?;
                    ArrayData::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                2 => {
                    let n = r.element_count(1)?;
                    ArrayData::U8(r.take(n)?.to_vec())
                }
                _ => return Err(CheckpointError::BadDtype { name, code }),
            };
            arrays.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { kind, metadata, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Reads a container and checks that it holds `expected`.
    pub fn read(path: &Path, expected: PayloadKind) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes)?;
        if ck.kind != expected {
            return Err(CheckpointError::KindMismatch { expected, found: ck.kind }.into());
        }
        Ok(ck)
    }
}

/// Artifacts that round-trip through the container format.
pub trait Persist: Sized {
    const KIND: PayloadKind;

    fn to_checkpoint(&self) -> Checkpoint;

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;

    /// Writes the artifact with extra metadata (seeds, config hash, provenance).
    fn save_with(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut ck = self.to_checkpoint();
        for (k, v) in extra {
            ck.metadata.entry(k.clone()).or_insert_with(|| v.clone());
        }
        ck.write(path)
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path, Self::KIND)?)
    }

    fn load_with_metadata(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = Checkpoint::read(path, Self::KIND)?;
        Ok((Self::from_checkpoint(&ck)?, ck.metadata))
    }
}

impl<T: Real> Persist for ParamVector<T> {
    const KIND: PayloadKind = PayloadKind::Params;

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(PayloadKind::Params)
            .meta("arch", self.architecture())
            .array("values", ArrayData::from_reals(self.values()))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: Architecture = ck.parse_meta("arch")?;
        let values = ck.get_array("values")?.to_reals::<T>("values")?;
        ParamVector::from_values(&arch, values)
    }
}

impl Persist for PruneMask {
    const KIND: PayloadKind = PayloadKind::Mask;

    fn to_checkpoint(&self) -> Checkpoint {
        let opts = self.options();
        Checkpoint::new(PayloadKind::Mask)
            .meta("layout", self.layout())
            .meta("scope", opts.scope)
            .meta("eligibility", opts.eligibility.name())
            .array("bits", ArrayData::U8(self.bits().iter().map(|&b| b as u8).collect()))
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layout: Layout = ck.parse_meta("layout")?;
        let options = MaskOptions { scope: ck.parse_meta("scope")?, eligibility: ck.parse_meta("eligibility")? };
        let ArrayData::U8(raw) = ck.get_array("bits")? else {
            return Err(CheckpointError::Invalid("mask bits must be u8".into()).into());
        };
        if let Some(b) = raw.iter().find(|&&b| b > 1) {
            return Err(CheckpointError::Invalid(format!("mask byte {b} is not 0 or 1")).into());
        }
        PruneMask::from_bits(&layout, raw.iter().map(|&b| b == 1).collect(), options)
    }
}

/// One row of the results CSV. Column order is fixed by field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub criterion: String,
    pub density: f64,
    pub sparsity: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub epochs: usize,
    pub wall_s: f64,
    pub eligible_set: String,
    pub notes: String,
}

pub const RESULTS_HEADER: [&str; 10] =
    ["criterion", "density", "sparsity", "seed", "accuracy", "loss", "epochs", "wall_s", "eligible_set", "notes"];

impl From<&EvalReport> for ResultRow {
    fn from(r: &EvalReport) -> Self {
        let layers: Vec<String> = r.per_layer_kept.iter().map(|k| k.to_string()).collect();
        let mut notes = format!("layers_kept={}", layers.join("/"));
        if !r.notes.is_empty() {
            notes = format!("{}; {notes}", r.notes);
        }
        Self {
            criterion: r.criterion.clone(),
            density: r.density,
            sparsity: 1.0 - r.density,
            seed: r.seed,
            accuracy: r.test_accuracy,
            loss: r.test_loss,
            epochs: r.epochs,
            wall_s: r.wall_s,
            eligible_set: r.eligible_set.clone(),
            notes,
        }
    }
}

/// Writes rows to `path`. With `append`, rows go after any existing content
/// and the header is only written when the file is new or empty.
pub fn write_results(rows: &[EvalReport], path: &Path, append: bool) -> Result<()> {
    let rows: Vec<ResultRow> = rows.iter().map(ResultRow::from).collect();
    write_rows(&rows, path, append)
}

pub fn write_rows(rows: &[ResultRow], path: &Path, append: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let existing = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !existing {
        w.write_record(RESULTS_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Data(format!("{} does not carry the results header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(PayloadKind::Params)
            .meta("arch", "3-2")
            .meta("note", "ünïcode ok")
            .array("values", ArrayData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0, 6.0, 7.0]))
            .array("extra", ArrayData::U8(vec![0, 1, 2]))
    }

    #[test]
    fn encode_decode_is_identity() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"ASPR");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = sample().encode();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&wrong_magic), Err(CheckpointError::BadMagic { .. })));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert_eq!(Checkpoint::decode(&wrong_version), Err(CheckpointError::UnsupportedVersion { found: 9 }));
        let mut wrong_kind = bytes.clone();
        wrong_kind[6] = 77;
        assert_eq!(Checkpoint::decode(&wrong_kind), Err(CheckpointError::UnknownKind(77)));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert_eq!(Checkpoint::decode(&trailing), Err(CheckpointError::TrailingBytes(1)));
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = sample().encode();
        let cut = &bytes[..bytes.len() - 2];
        match Checkpoint::decode(cut) {
            // the trailing u8 array wants 3 bytes, 1 remains
            Err(CheckpointError::Truncated { expected, actual, .. }) => assert_eq!((expected, actual), (3, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn narrowing_read_is_refused() {
        let a = ArrayData::F64(vec![0.1]);
        assert!(a.to_reals::<f32>("x").is_err());
        let b = ArrayData::F32(vec![0.1]);
        assert_eq!(b.to_reals::<f64>("x").unwrap(), vec![0.1f32 as f64]);
    }
}
