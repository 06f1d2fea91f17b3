//! Flat run configuration file.
//!
//! One JSON object holds the data-generation, teacher, training and probe
//! settings in snake_case. Unknown keys are a hard error so sweep-script
//! typos fail loudly. `seed` is the training seed; the generator uses
//! `data_seed`, and probe keys carry a `probe_` prefix.

use anyhow::{Context, Result};
use clip_ping_core::{
    derive_seed, GenConfig, Method, ModalityMask, ProbeConfig, TeacherModel, TrainConfig,
    UpdateStrategy,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

const TAG_TEACHER_IMAGE: u64 = 0xA1;
const TAG_TEACHER_TEXT: u64 = 0xA2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Data generation.
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    pub raw_dim_image: usize,
    pub raw_dim_text: usize,
    pub sigma_within: f64,
    pub sigma_view: f64,
    pub data_seed: u64,
    // Frozen teacher geometry.
    pub teacher_dim_image: usize,
    pub teacher_dim_text: usize,
    // Training.
    pub method: String,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub lr_adapter: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_distill: f64,
    pub capacity: usize,
    pub top_k: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub temperature_init: f64,
    pub update_strategy: String,
    pub modality_mask: String,
    pub augment_strength: f64,
    pub seed: u64,
    // Linear probe.
    pub probe_epochs: usize,
    pub probe_batch_size: usize,
    pub probe_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let train = TrainConfig::default();
        let probe = ProbeConfig::default();
        Self {
            classes: gen.classes,
            n_train: gen.n_train,
            n_val: gen.n_val,
            n_test: gen.n_test,
            latent_dim: gen.latent_dim,
            raw_dim_image: gen.raw_dim_image,
            raw_dim_text: gen.raw_dim_text,
            sigma_within: gen.sigma_within,
            sigma_view: gen.sigma_view,
            data_seed: gen.seed,
            teacher_dim_image: 48,
            teacher_dim_text: 80,
            method: train.method.as_str().to_string(),
            epochs: train.epochs,
            warmup_epochs: train.warmup_epochs,
            batch_size: train.batch_size,
            lr_image: train.lr_image,
            lr_text: train.lr_text,
            lr_adapter: train.lr_adapter,
            weight_decay: train.weight_decay,
            alpha: train.alpha,
            lambda: train.lambda,
            lambda_distill: train.lambda_distill,
            capacity: train.capacity,
            top_k: train.top_k,
            proj_dim: train.proj_dim,
            hidden_dim: train.hidden_dim,
            temperature_init: train.temperature_init,
            update_strategy: "fifo".to_string(),
            modality_mask: "both".to_string(),
            augment_strength: train.augment_strength,
            seed: train.seed,
            probe_epochs: probe.epochs,
            probe_batch_size: probe.batch_size,
            probe_lr: probe.lr,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<(Self, String)> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        Ok((cfg, raw))
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            classes: self.classes,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            latent_dim: self.latent_dim,
            raw_dim_image: self.raw_dim_image,
            raw_dim_text: self.raw_dim_text,
            sigma_within: self.sigma_within,
            sigma_view: self.sigma_view,
            seed: self.data_seed,
        }
    }

    pub fn train_config(&self, method: Method, seed: u64) -> Result<TrainConfig> {
        let update_strategy: UpdateStrategy = self
            .update_strategy
            .parse()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let modality_mask: ModalityMask = self
            .modality_mask
            .parse()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(TrainConfig {
            method,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            lr_image: self.lr_image,
            lr_text: self.lr_text,
            lr_adapter: self.lr_adapter,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            lambda: self.lambda,
            lambda_distill: self.lambda_distill,
            capacity: self.capacity,
            top_k: self.top_k,
            proj_dim: self.proj_dim,
            hidden_dim: self.hidden_dim,
            temperature_init: self.temperature_init,
            update_strategy,
            modality_mask,
            augment_strength: self.augment_strength,
            seed,
            trace_steps: false,
        })
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            batch_size: self.probe_batch_size,
            lr: self.probe_lr,
            seed: derive_seed(seed, 0xB0),
        }
    }

    /// Teachers are tied to the data seed so every training seed of one
    /// experiment shares identical frozen features.
    pub fn teachers(&self) -> Result<(TeacherModel, TeacherModel)> {
        use clip_ping_core::Modality;
        let image = TeacherModel::new(
            Modality::Image,
            self.raw_dim_image,
            self.teacher_dim_image,
            derive_seed(self.data_seed, TAG_TEACHER_IMAGE),
        )?;
        let text = TeacherModel::new(
            Modality::Text,
            self.raw_dim_text,
            self.teacher_dim_text,
            derive_seed(self.data_seed, TAG_TEACHER_TEXT),
        )?;
        Ok((image, text))
    }
}
