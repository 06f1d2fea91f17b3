//! Synthetic paired image-text data from a shared latent class model.
//!
//! Each class owns a latent center; each sample perturbs its center and is
//! projected into two "raw view" spaces by fixed random maps, one per
//! modality. Pairing is by construction: image and text views of a sample
//! come from the same latent point.

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg::FeatureBatch;
use crate::seeding::seeded_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

const DATASET_MAGIC: &[u8; 8] = b"PINGDATA";
const DATASET_VERSION: u32 = 1;

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split code {other}"))),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split '{other}'"))),
        }
    }
}

/// One paired sample. Both raw views descend from the same latent point.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub class_id: usize,
    pub split: Split,
    pub raw_image: Vec<f64>,
    pub raw_text: Vec<f64>,
}

/// Generation parameters. Defaults are the desk-scale profile.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    pub raw_dim_image: usize,
    pub raw_dim_text: usize,
    pub sigma_within: f64,
    pub sigma_view: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            n_train: 5000,
            n_val: 500,
            n_test: 500,
            latent_dim: 16,
            raw_dim_image: 48,
            raw_dim_text: 40,
            sigma_within: 0.3,
            sigma_view: 0.2,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("latent_dim", self.latent_dim),
            ("raw_dim_image", self.raw_dim_image),
            ("raw_dim_text", self.raw_dim_text),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.sigma_within.is_finite() && self.sigma_within >= 0.0) {
            return Err(Error::Config(format!(
                "sigma_within must be non-negative, got {}",
                self.sigma_within
            )));
        }
        if !(self.sigma_view.is_finite() && self.sigma_view >= 0.0) {
            return Err(Error::Config(format!(
                "sigma_view must be non-negative, got {}",
                self.sigma_view
            )));
        }
        Ok(())
    }
}

/// A generated dataset: samples with contiguous ids plus the noiseless class
/// text views used to build zero-shot prototypes.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    samples: Vec<Sample>,
    class_count: usize,
    raw_dim_image: usize,
    raw_dim_text: usize,
    class_text_views: Vec<Vec<f64>>,
}

impl PairedDataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn raw_dim_image(&self) -> usize {
        self.raw_dim_image
    }

    pub fn raw_dim_text(&self) -> usize {
        self.raw_dim_text
    }

    /// Indices into `samples()` for one split, in id order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Noiseless text views of each class center, as a batch of `classes` rows.
    pub fn class_text_views(&self) -> Result<FeatureBatch> {
        FeatureBatch::from_rows(&self.class_text_views)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `P u` for a row-major `out x in` projection.
fn project(p: &[f64], u: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = u.len();
    let mut out = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &p[o * in_dim..(o + 1) * in_dim];
        out[o] = row.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    }
    out
}

/// Draws the full dataset deterministically from `cfg.seed`.
///
/// Draw order is fixed: class centers, image projection, text projection, then
/// per split (train, val, test) per sample its latent noise followed by image
/// and text view noise. Classes rotate round-robin, so per-split histograms
/// are balanced.
pub fn generate_dataset(cfg: &GenConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();

    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.latent_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let proj_image: Vec<f64> = (0..cfg.raw_dim_image * cfg.latent_dim)
        .map(|_| normal(&mut rng) * scale)
        .collect();
    let proj_text: Vec<f64> = (0..cfg.raw_dim_text * cfg.latent_dim)
        .map(|_| normal(&mut rng) * scale)
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
    let mut next_id = 0u64;
    for (split, count) in [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ] {
        for i in 0..count {
            let class_id = i % cfg.classes;
            let mut latent = centers[class_id].clone();
            for v in latent.iter_mut() {
                *v += cfg.sigma_within * normal(&mut rng);
            }
            let mut raw_image = project(&proj_image, &latent, cfg.raw_dim_image);
            for v in raw_image.iter_mut() {
                *v += cfg.sigma_view * normal(&mut rng);
            }
            let mut raw_text = project(&proj_text, &latent, cfg.raw_dim_text);
            for v in raw_text.iter_mut() {
                *v += cfg.sigma_view * normal(&mut rng);
            }
            samples.push(Sample {
                id: next_id,
                class_id,
                split,
                raw_image,
                raw_text,
            });
            next_id += 1;
        }
    }

    let class_text_views = centers
        .iter()
        .map(|c| project(&proj_text, c, cfg.raw_dim_text))
        .collect();

    Ok(PairedDataset {
        samples,
        class_count: cfg.classes,
        raw_dim_image: cfg.raw_dim_image,
        raw_dim_text: cfg.raw_dim_text,
        class_text_views,
    })
}

/// Additive Gaussian noise at scale `strength` plus zero-masking of a
/// `strength`-proportional fraction of coordinates.
///
/// Strength zero is an exact identity and consumes no randomness. Each
/// coordinate always consumes exactly two draws otherwise, so downstream
/// streams stay aligned regardless of mask outcomes.
pub fn augment(view: &[f64], strength: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(Error::Parameter(format!(
            "augmentation strength must be non-negative, got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(view.to_vec());
    }
    let mask_fraction = strength.min(1.0);
    let mut out = Vec::with_capacity(view.len());
    for &x in view {
        let noise: f64 = rng.sample(StandardNormal);
        let gate: f64 = rng.gen_range(0.0..1.0);
        if gate < mask_fraction {
            out.push(0.0);
        } else {
            out.push(x + strength * noise);
        }
    }
    Ok(out)
}

/// Serializes the dataset with raw views stored as f32.
pub fn write_dataset(path: &Path, ds: &PairedDataset) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(ds.class_count as u32);
    w.u64(ds.samples.len() as u64);
    w.u32(ds.raw_dim_image as u32);
    w.u32(ds.raw_dim_text as u32);
    w.u32(0); // dtype: f32
    for row in &ds.class_text_views {
        for &v in row {
            w.f32(v as f32);
        }
    }
    for s in &ds.samples {
        w.u64(s.id);
        w.u32(s.class_id as u32);
        w.u8(s.split.code());
        w.bytes(&[0, 0, 0]);
        for &v in &s.raw_image {
            w.f32(v as f32);
        }
        for &v in &s.raw_text {
            w.f32(v as f32);
        }
    }
    std::fs::write(path, w.into_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], promoting values to f64.
pub fn read_dataset(path: &Path) -> Result<PairedDataset> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let class_count = r.u32()? as usize;
    let count = r.u64()? as usize;
    let raw_dim_image = r.u32()? as usize;
    let raw_dim_text = r.u32()? as usize;
    let dtype = r.u32()?;
    if dtype != 0 {
        return Err(Error::Format(format!("unknown dataset dtype {dtype}")));
    }
    if class_count == 0 || raw_dim_image == 0 || raw_dim_text == 0 {
        return Err(Error::Format("dataset header has zero dimensions".into()));
    }
    let mut class_text_views = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let mut row = Vec::with_capacity(raw_dim_text);
        for _ in 0..raw_dim_text {
            row.push(r.f32()? as f64);
        }
        class_text_views.push(row);
    }
    let mut samples = Vec::with_capacity(count);
    let mut prev_id: Option<u64> = None;
    for _ in 0..count {
        let id = r.u64()?;
        if let Some(p) = prev_id {
            if id <= p {
                return Err(Error::Format(format!(
                    "sample ids must be strictly ascending, {id} after {p}"
                )));
            }
        }
        prev_id = Some(id);
        let class_id = r.u32()? as usize;
        if class_id >= class_count {
            return Err(Error::Format(format!(
                "class id {class_id} out of range for {class_count} classes"
            )));
        }
        let split = Split::from_code(r.u8()?)?;
        r.reserved(3)?;
        let mut raw_image = Vec::with_capacity(raw_dim_image);
        for _ in 0..raw_dim_image {
            raw_image.push(r.f32()? as f64);
        }
        let mut raw_text = Vec::with_capacity(raw_dim_text);
        for _ in 0..raw_dim_text {
            raw_text.push(r.f32()? as f64);
        }
        samples.push(Sample {
            id,
            class_id,
            split,
            raw_image,
            raw_text,
        });
    }
    r.expect_end()?;
    Ok(PairedDataset {
        samples,
        class_count,
        raw_dim_image,
        raw_dim_text,
        class_text_views,
    })
}
