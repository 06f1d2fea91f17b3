//! Frozen teacher feature banks and their on-disk format.
//!
//! A bank maps sample ids to teacher-space vectors for one modality. On disk
//! (`.pingfb`) the layout is little-endian:
//!
//! ```text
//! magic "PINGBANK" (8 ASCII bytes)
//! version   u32 = 1
//! modality  u8 (0 = image, 1 = text), then 3 reserved zero bytes
//! count     u64
//! dim       u32
//! dtype     u32 (0 = f32, 1 = f64)
//! count records of: sample_id u64, dim values
//! ```
//!
//! Records are sorted by ascending id. Values are stored as f32 by default
//! and promoted to f64 on load.

use crate::bytes::{ByteReader, ByteWriter};
use crate::data::{PairedDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::FeatureBatch;
use crate::models::TeacherModel;
use std::collections::BTreeMap;
use std::path::Path;

const BANK_MAGIC: &[u8; 8] = b"PINGBANK";
const BANK_VERSION: u32 = 1;

/// Input modality tag carried by banks, teachers and encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(Error::Format(format!("unknown modality code {other}"))),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Parameter(format!("unknown modality '{other}'"))),
        }
    }
}

/// One bank entry: a sample id and its frozen teacher vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeature {
    pub sample_id: u64,
    pub vector: Vec<f64>,
}

/// Value dtype used when a bank is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankDtype {
    F32,
    F64,
}

impl BankDtype {
    fn code(self) -> u32 {
        match self {
            BankDtype::F32 => 0,
            BankDtype::F64 => 1,
        }
    }
}

/// Id-keyed store of frozen features for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    modality: Modality,
    dim: usize,
    entries: BTreeMap<u64, Vec<f64>>,
}

impl FeatureBank {
    pub fn new(modality: Modality, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("bank dimension must be positive".into()));
        }
        Ok(Self {
            modality,
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, sample_id: u64, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for id {sample_id} has length {}, bank dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(idx) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "vector for id {sample_id} has {} at index {idx}",
                vector[idx]
            )));
        }
        if self.entries.contains_key(&sample_id) {
            return Err(Error::Parameter(format!("duplicate sample id {sample_id}")));
        }
        self.entries.insert(sample_id, vector);
        Ok(())
    }

    /// Vector for `sample_id`, or a not-found error.
    pub fn lookup(&self, sample_id: u64) -> Result<FrozenFeature> {
        self.entries
            .get(&sample_id)
            .map(|v| FrozenFeature {
                sample_id,
                vector: v.clone(),
            })
            .ok_or(Error::NotFound(sample_id))
    }

    /// Borrowed lookup for hot paths.
    pub fn get(&self, sample_id: u64) -> Option<&[f64]> {
        self.entries.get(&sample_id).map(|v| v.as_slice())
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.entries.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    /// Sub-bank restricted to the given ids; ids absent from the bank are
    /// skipped.
    pub fn filtered(&self, ids: &[u64]) -> Result<FeatureBank> {
        let mut out = FeatureBank::new(self.modality, self.dim)?;
        for &id in ids {
            if let Some(v) = self.entries.get(&id) {
                out.insert(id, v.clone())?;
            }
        }
        Ok(out)
    }
}

/// Runs the frozen teacher over every sample's unaugmented raw view.
///
/// The bank covers the whole dataset, one entry per sample id.
pub fn extract_features(
    teacher: &TeacherModel,
    dataset: &PairedDataset,
    modality: Modality,
) -> Result<FeatureBank> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot extract features from an empty dataset".into()));
    }
    let raw_dim = match modality {
        Modality::Image => dataset.raw_dim_image(),
        Modality::Text => dataset.raw_dim_text(),
    };
    if teacher.in_dim() != raw_dim {
        return Err(Error::Shape(format!(
            "teacher input width {} does not match {} raw width {raw_dim}",
            teacher.in_dim(),
            modality.as_str()
        )));
    }
    let mut values = Vec::with_capacity(dataset.len() * raw_dim);
    for s in dataset.samples() {
        match modality {
            Modality::Image => values.extend_from_slice(&s.raw_image),
            Modality::Text => values.extend_from_slice(&s.raw_text),
        }
    }
    let raw = FeatureBatch::new(dataset.len(), raw_dim, values)?;
    let feats = teacher.forward(&raw)?;
    let mut bank = FeatureBank::new(modality, teacher.out_dim())?;
    for (i, s) in dataset.samples().iter().enumerate() {
        bank.insert(s.id, feats.row(i).to_vec())?;
    }
    Ok(bank)
}

/// Convenience used by the trainer: bank restricted to one split of a dataset.
pub fn split_ids(dataset: &PairedDataset, split: Split) -> Vec<u64> {
    dataset
        .split_indices(split)
        .into_iter()
        .map(|i| dataset.samples()[i].id)
        .collect()
}

/// Writes a bank with the default f32 storage dtype.
pub fn write_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    write_bank_with_dtype(path, bank, BankDtype::F32)
}

pub fn write_bank_with_dtype(path: &Path, bank: &FeatureBank, dtype: BankDtype) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(BANK_MAGIC);
    w.u32(BANK_VERSION);
    w.u8(bank.modality.code());
    w.bytes(&[0, 0, 0]);
    w.u64(bank.len() as u64);
    w.u32(bank.dim as u32);
    w.u32(dtype.code());
    for (id, vector) in bank.iter() {
        w.u64(id);
        for &v in vector {
            match dtype {
                BankDtype::F32 => w.f32(v as f32),
                BankDtype::F64 => w.f64(v),
            }
        }
    }
    std::fs::write(path, w.into_bytes())?;
    Ok(())
}

/// Reads a `.pingfb` file, promoting stored values to f64.
pub fn read_bank(path: &Path) -> Result<FeatureBank> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(BANK_MAGIC)?;
    let version = r.u32()?;
    if version != BANK_VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let modality = Modality::from_code(r.u8()?)?;
    r.reserved(3)?;
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let dtype = r.u32()?;
    if dim == 0 {
        return Err(Error::Format("bank dimension must be positive".into()));
    }
    let mut bank = FeatureBank::new(modality, dim)?;
    let mut prev: Option<u64> = None;
    for _ in 0..count {
        let id = r.u64()?;
        if let Some(p) = prev {
            if id <= p {
                return Err(Error::Format(format!(
                    "bank ids must be strictly ascending, {id} after {p}"
                )));
            }
        }
        prev = Some(id);
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = match dtype {
                0 => r.f32()? as f64,
                1 => r.f64()?,
                other => return Err(Error::Format(format!("unknown bank dtype {other}"))),
            };
            vector.push(v);
        }
        bank.insert(id, vector)?;
    }
    r.expect_end()?;
    Ok(bank)
}
