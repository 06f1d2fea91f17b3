//! Training loop: batching, method dispatch, support-set maintenance,
//! optimizer and schedule.
//!
//! Within a step the order is fixed: student forward on augmented views,
//! frozen-feature resolution, neighbour retrieval, loss and gradients,
//! support-set update, optimizer update. Retrieval always precedes the
//! support update, so a pair pushed in a step can never be its own
//! neighbour in that step.
//!
//! Determinism: every random draw comes from a stream derived from the
//! config seed. Shuffling, augmentation and top-k sampling use separate
//! streams; parameter init uses derived seeds. Two runs with equal configs
//! are bit-identical.

use crate::bank::{extract_features, split_ids, FeatureBank, Modality};
use crate::data::{augment, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::FeatureBatch;
use crate::models::{Adapter, AdapterPair, EncoderDims, StudentEncoder, TeacherModel};
use crate::objectives::{
    clip_loss, clip_ping_loss, distill_loss, guided_supervision_loss, ping_loss,
    retrieve_nn_guidance, retrieve_xnn_guidance, LossResult, ModalityMask, TemperatureParam,
};
use crate::optim::{lr_at, AdamW};
use crate::seeding::{derive_seed, stream_rng};
use crate::support::{PairedSupportSet, SupportEntry, UpdateStrategy};
use rand::seq::SliceRandom;
use std::time::Instant;

const TAG_IMAGE_ENCODER: u64 = 0x11;
const TAG_TEXT_ENCODER: u64 = 0x12;
const TAG_ADAPTER_IMAGE: u64 = 0x13;
const TAG_ADAPTER_TEXT: u64 = 0x14;
const TAG_SUPPORT: u64 = 0x15;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_TOPK: u64 = 3;

/// Optimizer slot layout: six tensors per encoder, two per adapter, one
/// temperature scalar.
const SLOT_TEXT_ENCODER: usize = 6;
const SLOT_ADAPTER_IMAGE: usize = 12;
const SLOT_ADAPTER_TEXT: usize = 14;

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Contrastive loss only.
    Clip,
    /// Contrastive plus neighbour supervision from precomputed banks.
    ClipPing,
    /// Neighbour supervision from live teachers on augmented views.
    AClipPing,
    /// Contrastive plus KL distillation from precomputed banks.
    ClipF,
    /// KL distillation from live teachers on augmented views.
    ClipD,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Clip => "clip",
            Method::ClipPing => "clip-ping",
            Method::AClipPing => "a-clip-ping",
            Method::ClipF => "clip-f",
            Method::ClipD => "clip-d",
        }
    }

    fn uses_banks(self) -> bool {
        matches!(self, Method::ClipPing | Method::ClipF)
    }

    fn uses_teachers(self) -> bool {
        matches!(self, Method::AClipPing | Method::ClipD)
    }

    fn is_ping(self) -> bool {
        matches!(self, Method::ClipPing | Method::AClipPing)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Method::Clip),
            "clip-ping" => Ok(Method::ClipPing),
            "a-clip-ping" => Ok(Method::AClipPing),
            "clip-f" => Ok(Method::ClipF),
            "clip-d" => Ok(Method::ClipD),
            other => Err(Error::Parameter(format!("unknown method '{other}'"))),
        }
    }
}

/// Where guidance features come from. Must match the method: banks for
/// clip-ping / clip-f, teachers for a-clip-ping / clip-d, nothing for clip.
#[derive(Debug, Clone)]
pub enum GuidanceSource {
    None,
    Banks {
        image: FeatureBank,
        text: FeatureBank,
    },
    Teachers {
        image: TeacherModel,
        text: TeacherModel,
    },
}

/// Full training configuration; defaults are the full-scale settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
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
    pub update_strategy: UpdateStrategy,
    pub modality_mask: ModalityMask,
    pub augment_strength: f64,
    pub seed: u64,
    /// Record per-step retrieval traces in the run log.
    pub trace_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::ClipPing,
            epochs: 35,
            warmup_epochs: 5,
            batch_size: 1024,
            lr_image: 3e-3,
            lr_text: 1e-3,
            lr_adapter: 1e-3,
            weight_decay: 1e-5,
            alpha: 0.25,
            lambda: 0.6,
            lambda_distill: 0.75,
            capacity: 32768,
            top_k: 1,
            proj_dim: 256,
            hidden_dim: 256,
            temperature_init: 0.07,
            update_strategy: UpdateStrategy::Fifo,
            modality_mask: ModalityMask::Both,
            augment_strength: 0.0,
            seed: 0,
            trace_steps: false,
        }
    }
}

impl TrainConfig {
    /// Scaled-down profile used for end-to-end runs: smaller batch, queue
    /// and projection keep a full sweep in minutes on one core. The narrow
    /// trunk and strong augmentation put training in the regime where
    /// clean-view guidance carries signal the contrastive loss alone cannot
    /// recover.
    pub fn desk_profile(method: Method, seed: u64) -> Self {
        Self {
            method,
            epochs: 30,
            batch_size: 256,
            capacity: 2048,
            proj_dim: 32,
            hidden_dim: 12,
            augment_strength: 0.55,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least one".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup epochs ({}) exceed epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.capacity == 0 || self.top_k == 0 {
            return Err(Error::Config(
                "batch size, capacity and top_k must be positive".into(),
            ));
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        for (name, v) in [
            ("lr_image", self.lr_image),
            ("lr_text", self.lr_text),
            ("lr_adapter", self.lr_adapter),
            ("temperature_init", self.temperature_init),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("lambda_distill", self.lambda_distill),
        ] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.augment_strength.is_finite() && self.augment_strength >= 0.0) {
            return Err(Error::Config(format!(
                "augment_strength must be non-negative, got {}",
                self.augment_strength
            )));
        }
        Ok(())
    }
}

/// Loss and schedule summary of one epoch. Learning rates are the values at
/// the epoch's first step; `inv_tau` is read after the epoch's last step.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub loss_total: f64,
    pub loss_clip: f64,
    pub loss_nn: f64,
    pub loss_xnn: f64,
    pub loss_distill: f64,
    pub inv_tau: f64,
    pub seconds: f64,
}

/// Retrieval bookkeeping for one step, recorded when tracing is enabled.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub global_step: usize,
    pub epoch: usize,
    pub batch_ids: Vec<u64>,
    /// Support-set content at retrieval time, in queue order.
    pub support_ids_before_update: Vec<u64>,
    pub nn_image_ids: Vec<u64>,
    pub nn_text_ids: Vec<u64>,
    pub xnn_image_ids: Vec<u64>,
    pub xnn_text_ids: Vec<u64>,
}

/// Per-epoch records plus optional step traces.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub step_traces: Vec<StepTrace>,
}

impl RunLog {
    pub fn csv_header() -> &'static str {
        "epoch,lr_image,lr_text,loss_total,loss_clip,loss_nn,loss_xnn,inv_tau,seconds"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr_image,
                r.lr_text,
                r.loss_total,
                r.loss_clip,
                r.loss_nn,
                r.loss_xnn,
                r.inv_tau,
                r.seconds
            ));
        }
        out
    }
}

/// Everything `train` produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub image_encoder: StudentEncoder,
    pub text_encoder: StudentEncoder,
    pub adapters: AdapterPair,
    pub temperature: TemperatureParam,
    pub run_log: RunLog,
}

struct StepLosses {
    total: LossResult,
    clip: f64,
    nn: f64,
    xnn: f64,
    distill: f64,
}

/// Runs the full training loop for the configured method.
pub fn train(
    config: &TrainConfig,
    dataset: &PairedDataset,
    guidance: &GuidanceSource,
) -> Result<TrainOutput> {
    config.validate()?;
    let (banks, teachers) = match (config.method, guidance) {
        (Method::Clip, GuidanceSource::None) => (None, None),
        (m, GuidanceSource::Banks { image, text }) if m.uses_banks() => {
            if image.modality() != Modality::Image || text.modality() != Modality::Text {
                return Err(Error::Config("bank modalities are swapped".into()));
            }
            (Some((image.clone(), text.clone())), None)
        }
        (m, GuidanceSource::Teachers { image, text }) if m.uses_teachers() => {
            if image.modality() != Modality::Image || text.modality() != Modality::Text {
                return Err(Error::Config("teacher modalities are swapped".into()));
            }
            if image.in_dim() != dataset.raw_dim_image() || text.in_dim() != dataset.raw_dim_text()
            {
                return Err(Error::Config(format!(
                    "teacher input dims ({}, {}) do not match raw dims ({}, {})",
                    image.in_dim(),
                    text.in_dim(),
                    dataset.raw_dim_image(),
                    dataset.raw_dim_text()
                )));
            }
            // Live-teacher methods derive their reference banks on the fly;
            // at augment strength zero these equal precomputed banks exactly.
            let bi = extract_features(image, dataset, Modality::Image)?;
            let bt = extract_features(text, dataset, Modality::Text)?;
            (Some((bi, bt)), Some((image.clone(), text.clone())))
        }
        (m, _) => {
            return Err(Error::Config(format!(
                "method {} does not match the provided guidance source",
                m.as_str()
            )));
        }
    };

    let train_indices = dataset.split_indices(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::Empty("train split has no samples".into()));
    }
    let dims_image = EncoderDims {
        d_raw: dataset.raw_dim_image(),
        d_hidden: config.hidden_dim,
        d_proj_hidden: config.hidden_dim,
        d_out: config.proj_dim,
    };
    let dims_text = EncoderDims {
        d_raw: dataset.raw_dim_text(),
        ..dims_image
    };
    let mut image_encoder = StudentEncoder::new(
        Modality::Image,
        dims_image,
        derive_seed(config.seed, TAG_IMAGE_ENCODER),
    )?;
    let mut text_encoder = StudentEncoder::new(
        Modality::Text,
        dims_text,
        derive_seed(config.seed, TAG_TEXT_ENCODER),
    )?;
    let mut temperature = TemperatureParam::new(config.temperature_init)?;
    let mut adapters = match &banks {
        Some((bi, bt)) => AdapterPair {
            image: Adapter::new(
                Modality::Image,
                bi.dim(),
                config.proj_dim,
                derive_seed(config.seed, TAG_ADAPTER_IMAGE),
            )?,
            text: Adapter::new(
                Modality::Text,
                bt.dim(),
                config.proj_dim,
                derive_seed(config.seed, TAG_ADAPTER_TEXT),
            )?,
        },
        None => AdapterPair {
            image: Adapter::with_enabled(
                Modality::Image,
                config.proj_dim,
                config.proj_dim,
                derive_seed(config.seed, TAG_ADAPTER_IMAGE),
                false,
            )?,
            text: Adapter::with_enabled(
                Modality::Text,
                config.proj_dim,
                config.proj_dim,
                derive_seed(config.seed, TAG_ADAPTER_TEXT),
                false,
            )?,
        },
    };
    let mut support = if config.method.is_ping() {
        let (bi, bt) = banks.as_ref().expect("ping methods carry banks");
        let train_ids = split_ids(dataset, Split::Train);
        Some(PairedSupportSet::init_from_banks(
            &bi.filtered(&train_ids)?,
            &bt.filtered(&train_ids)?,
            config.capacity,
            config.update_strategy,
            derive_seed(config.seed, TAG_SUPPORT),
        )?)
    } else {
        None
    };

    let mut opt = AdamW::with_hyperparams(0.9, 0.999, 1e-8, config.weight_decay)?;
    // The temperature scalar is excluded from weight decay.
    let mut temp_opt = AdamW::new(0.0)?;
    let steps_per_epoch = train_indices.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;

    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut augment_rng = stream_rng(config.seed, STREAM_AUGMENT);
    let mut topk_rng = stream_rng(config.seed, STREAM_TOPK);

    let mut run_log = RunLog {
        method: config.method,
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
        step_traces: Vec::new(),
    };
    let mut global_step = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order = train_indices.clone();
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 5];
        let mut first_lr = (0.0, 0.0);
        for (step_in_epoch, chunk) in order.chunks(config.batch_size).enumerate() {
            let lr_image = lr_at(
                config.epochs,
                config.warmup_epochs,
                global_step,
                total_steps,
                config.lr_image,
            )?;
            let lr_text = lr_at(
                config.epochs,
                config.warmup_epochs,
                global_step,
                total_steps,
                config.lr_text,
            )?;
            let lr_adapter = lr_at(
                config.epochs,
                config.warmup_epochs,
                global_step,
                total_steps,
                config.lr_adapter,
            )?;
            if step_in_epoch == 0 {
                first_lr = (lr_image, lr_text);
            }

            let batch_ids: Vec<u64> = chunk.iter().map(|&i| dataset.samples()[i].id).collect();
            let mut image_rows = Vec::with_capacity(chunk.len());
            let mut text_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &dataset.samples()[i];
                image_rows.push(augment(&s.raw_image, config.augment_strength, &mut augment_rng)?);
                text_rows.push(augment(&s.raw_text, config.augment_strength, &mut augment_rng)?);
            }
            let aug_images = FeatureBatch::from_rows(&image_rows)?;
            let aug_texts = FeatureBatch::from_rows(&text_rows)?;

            let (z_image, cache_image) = image_encoder.forward(&aug_images)?;
            let (z_text, cache_text) = text_encoder.forward(&aug_texts)?;

            let frozen = match config.method {
                Method::Clip => None,
                Method::ClipPing | Method::ClipF => {
                    let (bi, bt) = banks.as_ref().expect("bank methods carry banks");
                    let mut fi = Vec::with_capacity(batch_ids.len());
                    let mut ft = Vec::with_capacity(batch_ids.len());
                    for &id in &batch_ids {
                        fi.push(bi.lookup(id)?.vector);
                        ft.push(bt.lookup(id)?.vector);
                    }
                    Some((FeatureBatch::from_rows(&fi)?, FeatureBatch::from_rows(&ft)?))
                }
                Method::AClipPing | Method::ClipD => {
                    let (ti, tt) = teachers.as_ref().expect("teacher methods carry teachers");
                    Some((ti.forward(&aug_images)?, tt.forward(&aug_texts)?))
                }
            };

            let losses = compute_losses(
                config,
                &z_image,
                &z_text,
                frozen.as_ref(),
                support.as_ref(),
                &adapters,
                &temperature,
                &mut topk_rng,
                &mut run_log.step_traces,
                global_step,
                epoch,
                &batch_ids,
            )?;
            if !losses.total.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {global_step}: {}",
                    losses.total.value
                )));
            }
            sums[0] += losses.total.value;
            sums[1] += losses.clip;
            sums[2] += losses.nn;
            sums[3] += losses.xnn;
            sums[4] += losses.distill;

            // Queue refresh precedes the optimizer update, mirroring the
            // reference step ordering.
            if let (Some(set), Some((fi, ft))) = (support.as_mut(), frozen.as_ref()) {
                let entries: Vec<SupportEntry> = batch_ids
                    .iter()
                    .enumerate()
                    .map(|(k, &id)| SupportEntry {
                        sample_id: id,
                        image_vector: fi.row(k).to_vec(),
                        text_vector: ft.row(k).to_vec(),
                    })
                    .collect();
                set.update(entries)?;
            }

            let grads_image = image_encoder.backward(&cache_image, &losses.total.grad_student_image)?;
            let grads_text = text_encoder.backward(&cache_text, &losses.total.grad_student_text)?;
            opt.begin_step();
            let mut opt_err: Option<Error> = None;
            image_encoder.visit_tensors_mut(|idx, tensor| {
                if opt_err.is_none() {
                    if let Err(e) = opt.update_slot(idx, lr_image, tensor, &grads_image.tensors[idx])
                    {
                        opt_err = Some(e);
                    }
                }
            });
            text_encoder.visit_tensors_mut(|idx, tensor| {
                if opt_err.is_none() {
                    if let Err(e) = opt.update_slot(
                        SLOT_TEXT_ENCODER + idx,
                        lr_text,
                        tensor,
                        &grads_text.tensors[idx],
                    ) {
                        opt_err = Some(e);
                    }
                }
            });
            if let Some(g) = &losses.total.grad_adapter_image {
                let tensors = [&g.weight, &g.bias];
                adapters.image.visit_tensors_mut(|idx, tensor| {
                    if opt_err.is_none() {
                        if let Err(e) =
                            opt.update_slot(SLOT_ADAPTER_IMAGE + idx, lr_adapter, tensor, tensors[idx])
                        {
                            opt_err = Some(e);
                        }
                    }
                });
            }
            if let Some(g) = &losses.total.grad_adapter_text {
                let tensors = [&g.weight, &g.bias];
                adapters.text.visit_tensors_mut(|idx, tensor| {
                    if opt_err.is_none() {
                        if let Err(e) =
                            opt.update_slot(SLOT_ADAPTER_TEXT + idx, lr_adapter, tensor, tensors[idx])
                        {
                            opt_err = Some(e);
                        }
                    }
                });
            }
            if let Some(e) = opt_err {
                return Err(e);
            }
            temp_opt.begin_step();
            let mut log_inv_tau = [temperature.log_inv_tau()];
            temp_opt.update_slot(0, lr_text, &mut log_inv_tau, &[losses.total.grad_log_inv_tau])?;
            temperature.set_log_inv_tau(log_inv_tau[0]);

            global_step += 1;
        }
        let steps = steps_per_epoch as f64;
        run_log.epochs.push(EpochRecord {
            epoch,
            lr_image: first_lr.0,
            lr_text: first_lr.1,
            loss_total: sums[0] / steps,
            loss_clip: sums[1] / steps,
            loss_nn: sums[2] / steps,
            loss_xnn: sums[3] / steps,
            loss_distill: sums[4] / steps,
            inv_tau: temperature.inv_tau(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutput {
        image_encoder,
        text_encoder,
        adapters,
        temperature,
        run_log,
    })
}

#[allow(clippy::too_many_arguments)]
fn compute_losses(
    config: &TrainConfig,
    z_image: &FeatureBatch,
    z_text: &FeatureBatch,
    frozen: Option<&(FeatureBatch, FeatureBatch)>,
    support: Option<&PairedSupportSet>,
    adapters: &AdapterPair,
    temperature: &TemperatureParam,
    topk_rng: &mut rand_chacha::ChaCha8Rng,
    traces: &mut Vec<StepTrace>,
    global_step: usize,
    epoch: usize,
    batch_ids: &[u64],
) -> Result<StepLosses> {
    let clip = clip_loss(z_image, z_text, temperature)?;
    match config.method {
        Method::Clip => Ok(StepLosses {
            clip: clip.value,
            nn: 0.0,
            xnn: 0.0,
            distill: 0.0,
            total: clip,
        }),
        Method::ClipPing | Method::AClipPing => {
            let (fi, ft) = frozen.expect("ping methods carry frozen features");
            let set = support.expect("ping methods carry a support set");
            if config.lambda == 0.0 {
                // The combination at lambda zero is the contrastive loss
                // exactly; retrieval is skipped entirely.
                return Ok(StepLosses {
                    clip: clip.value,
                    nn: 0.0,
                    xnn: 0.0,
                    distill: 0.0,
                    total: clip,
                });
            }
            let support_before: Vec<u64> = if config.trace_steps {
                set.entries().map(|e| e.sample_id).collect()
            } else {
                Vec::new()
            };
            let (nn_gi, nn_gt) = retrieve_nn_guidance(set, fi, ft, config.top_k, topk_rng)?;
            let (xnn_gi, xnn_gt) = retrieve_xnn_guidance(set, fi, ft, config.top_k, topk_rng)?;
            if config.trace_steps {
                traces.push(StepTrace {
                    global_step,
                    epoch,
                    batch_ids: batch_ids.to_vec(),
                    support_ids_before_update: support_before,
                    nn_image_ids: nn_gi.ids.clone(),
                    nn_text_ids: nn_gt.ids.clone(),
                    xnn_image_ids: xnn_gi.ids.clone(),
                    xnn_text_ids: xnn_gt.ids.clone(),
                });
            }
            let nn = guided_supervision_loss(
                &nn_gi.vectors,
                &nn_gt.vectors,
                z_image,
                z_text,
                adapters,
                temperature,
                config.modality_mask,
            )?;
            let xnn = guided_supervision_loss(
                &xnn_gi.vectors,
                &xnn_gt.vectors,
                z_image,
                z_text,
                adapters,
                temperature,
                config.modality_mask,
            )?;
            let ping = ping_loss(&nn, &xnn, config.alpha)?;
            let total = clip_ping_loss(&clip, &ping, config.lambda)?;
            Ok(StepLosses {
                clip: clip.value,
                nn: nn.value,
                xnn: xnn.value,
                distill: 0.0,
                total,
            })
        }
        Method::ClipF | Method::ClipD => {
            let (fi, ft) = frozen.expect("distill methods carry frozen features");
            let breakdown = distill_loss(
                fi,
                ft,
                z_image,
                z_text,
                adapters,
                temperature,
                config.lambda_distill,
            )?;
            Ok(StepLosses {
                clip: breakdown.clip_value,
                nn: 0.0,
                xnn: 0.0,
                distill: breakdown.distill_value,
                total: breakdown.total,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};
    use std::collections::BTreeMap;

    fn tiny_dataset() -> PairedDataset {
        generate_dataset(&GenConfig {
            classes: 4,
            n_train: 64,
            n_val: 16,
            n_test: 16,
            latent_dim: 6,
            raw_dim_image: 12,
            raw_dim_text: 10,
            sigma_within: 0.3,
            sigma_view: 0.2,
            seed: 900,
        })
        .unwrap()
    }

    fn tiny_config(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 16,
            capacity: 32,
            proj_dim: 8,
            hidden_dim: 12,
            seed,
            ..TrainConfig::default()
        }
    }

    fn tiny_teachers(data_seed: u64) -> (TeacherModel, TeacherModel) {
        let ti = TeacherModel::new(Modality::Image, 12, 9, derive_seed(data_seed, 0xA1)).unwrap();
        let tt = TeacherModel::new(Modality::Text, 10, 7, derive_seed(data_seed, 0xA2)).unwrap();
        (ti, tt)
    }

    fn banks_from(
        ti: &TeacherModel,
        tt: &TeacherModel,
        ds: &PairedDataset,
    ) -> (FeatureBank, FeatureBank) {
        (
            extract_features(ti, ds, Modality::Image).unwrap(),
            extract_features(tt, ds, Modality::Text).unwrap(),
        )
    }

    #[test]
    fn run_log_shape_and_finiteness() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let cfg = tiny_config(Method::ClipPing, 1);
        let out = train(
            &cfg,
            &ds,
            &GuidanceSource::Banks { image: bi, text: bt },
        )
        .unwrap();
        assert_eq!(out.run_log.epochs.len(), cfg.epochs);
        for r in &out.run_log.epochs {
            assert!(r.loss_total.is_finite());
            assert!(r.inv_tau > 0.0 && r.inv_tau <= 100.0);
            assert!(r.lr_image > 0.0);
        }
        let csv = out.run_log.to_csv();
        assert!(csv.starts_with("epoch,lr_image,lr_text,loss_total"));
        assert_eq!(csv.lines().count(), 1 + cfg.epochs);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let cfg = tiny_config(Method::ClipPing, 7);
        let src = GuidanceSource::Banks { image: bi, text: bt };
        let a = train(&cfg, &ds, &src).unwrap();
        let b = train(&cfg, &ds, &src).unwrap();
        assert_eq!(a.image_encoder.flat_params(), b.image_encoder.flat_params());
        assert_eq!(a.text_encoder.flat_params(), b.text_encoder.flat_params());
        assert_eq!(a.temperature.log_inv_tau(), b.temperature.log_inv_tau());
        for (ra, rb) in a.run_log.epochs.iter().zip(b.run_log.epochs.iter()) {
            assert_eq!(ra.loss_total, rb.loss_total);
            assert_eq!(ra.inv_tau, rb.inv_tau);
        }
        let c = train(&tiny_config(Method::ClipPing, 8), &ds, &src).unwrap();
        assert_ne!(a.image_encoder.flat_params(), c.image_encoder.flat_params());
    }

    #[test]
    fn lambda_zero_matches_plain_clip_run() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let mut ping_cfg = tiny_config(Method::ClipPing, 3);
        ping_cfg.lambda = 0.0;
        let ping_out = train(
            &ping_cfg,
            &ds,
            &GuidanceSource::Banks { image: bi, text: bt },
        )
        .unwrap();
        let clip_cfg = tiny_config(Method::Clip, 3);
        let clip_out = train(&clip_cfg, &ds, &GuidanceSource::None).unwrap();
        for (rp, rc) in ping_out
            .run_log
            .epochs
            .iter()
            .zip(clip_out.run_log.epochs.iter())
        {
            assert_eq!(rp.loss_total, rc.loss_total, "epoch {}", rp.epoch);
            assert_eq!(rp.loss_clip, rc.loss_clip);
        }
        assert_eq!(
            ping_out.image_encoder.flat_params(),
            clip_out.image_encoder.flat_params()
        );
        assert_eq!(
            ping_out.temperature.log_inv_tau(),
            clip_out.temperature.log_inv_tau()
        );
    }

    #[test]
    fn augment_strength_zero_collapses_active_onto_bank_method() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let mut bank_cfg = tiny_config(Method::ClipPing, 5);
        bank_cfg.augment_strength = 0.0;
        let mut active_cfg = tiny_config(Method::AClipPing, 5);
        active_cfg.augment_strength = 0.0;
        let bank_out = train(
            &bank_cfg,
            &ds,
            &GuidanceSource::Banks { image: bi, text: bt },
        )
        .unwrap();
        let active_out = train(
            &active_cfg,
            &ds,
            &GuidanceSource::Teachers { image: ti, text: tt },
        )
        .unwrap();
        assert_eq!(
            bank_out.image_encoder.flat_params(),
            active_out.image_encoder.flat_params()
        );
        assert_eq!(
            bank_out.text_encoder.flat_params(),
            active_out.text_encoder.flat_params()
        );
        for (ra, rb) in bank_out
            .run_log
            .epochs
            .iter()
            .zip(active_out.run_log.epochs.iter())
        {
            assert_eq!(ra.loss_total, rb.loss_total);
            assert_eq!(ra.loss_nn, rb.loss_nn);
            assert_eq!(ra.loss_xnn, rb.loss_xnn);
        }
    }

    #[test]
    fn distill_methods_coincide_at_zero_augmentation() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let mut f_cfg = tiny_config(Method::ClipF, 6);
        f_cfg.augment_strength = 0.0;
        let mut d_cfg = tiny_config(Method::ClipD, 6);
        d_cfg.augment_strength = 0.0;
        let f_out = train(&f_cfg, &ds, &GuidanceSource::Banks { image: bi, text: bt }).unwrap();
        let d_out = train(&d_cfg, &ds, &GuidanceSource::Teachers { image: ti, text: tt }).unwrap();
        for (ra, rb) in f_out.run_log.epochs.iter().zip(d_out.run_log.epochs.iter()) {
            assert_eq!(ra.loss_total, rb.loss_total);
            assert_eq!(ra.loss_distill, rb.loss_distill);
        }
        assert!(f_out.run_log.epochs.iter().all(|r| r.loss_distill >= 0.0));
    }

    #[test]
    fn method_and_source_must_match() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let err = train(
            &tiny_config(Method::Clip, 0),
            &ds,
            &GuidanceSource::Banks {
                image: bi.clone(),
                text: bt.clone(),
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let err = train(
            &tiny_config(Method::ClipPing, 0),
            &ds,
            &GuidanceSource::Teachers {
                image: ti.clone(),
                text: tt.clone(),
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let err = train(&tiny_config(Method::AClipPing, 0), &ds, &GuidanceSource::None);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = train(
            &tiny_config(Method::ClipD, 0),
            &ds,
            &GuidanceSource::Banks { image: bi, text: bt },
        );
        assert!(matches!(err, Err(Error::Config(_))));
        // Swapped modalities are rejected outright.
        let (bi2, bt2) = banks_from(&ti, &tt, &ds);
        let err = train(
            &tiny_config(Method::ClipPing, 0),
            &ds,
            &GuidanceSource::Banks {
                image: bt2,
                text: bi2,
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn traces_show_retrieval_before_update_and_shuffle_covers_split() {
        let ds = tiny_dataset();
        let (ti, tt) = tiny_teachers(900);
        let (bi, bt) = banks_from(&ti, &tt, &ds);
        let mut cfg = tiny_config(Method::ClipPing, 11);
        cfg.trace_steps = true;
        cfg.capacity = 16;
        let out = train(
            &cfg,
            &ds,
            &GuidanceSource::Banks { image: bi, text: bt },
        )
        .unwrap();
        let steps_per_epoch = 64usize.div_ceil(cfg.batch_size);
        assert_eq!(out.run_log.step_traces.len(), cfg.epochs * steps_per_epoch);
        let train_ids: BTreeMap<u64, usize> =
            split_ids(&ds, Split::Train).into_iter().map(|id| (id, 1)).collect();
        for epoch in 0..cfg.epochs {
            let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
            for t in out
                .run_log
                .step_traces
                .iter()
                .filter(|t| t.epoch == epoch)
            {
                for &id in &t.batch_ids {
                    *seen.entry(id).or_insert(0) += 1;
                }
                // Every retrieved neighbour was present before the step's
                // queue refresh.
                let before: std::collections::BTreeSet<u64> =
                    t.support_ids_before_update.iter().copied().collect();
                for ids in [
                    &t.nn_image_ids,
                    &t.nn_text_ids,
                    &t.xnn_image_ids,
                    &t.xnn_text_ids,
                ] {
                    assert!(ids.iter().all(|id| before.contains(id)));
                }
                assert!(t.support_ids_before_update.len() <= cfg.capacity);
            }
            assert_eq!(seen, train_ids, "epoch {epoch} shuffle must cover the split");
        }
        // Consecutive-step bookkeeping: with FIFO and full batches, the ids
        // pushed in one step appear in the next step's queue snapshot.
        for pair in out.run_log.step_traces.windows(2) {
            if pair[0].epoch == pair[1].epoch {
                let next: std::collections::BTreeSet<u64> =
                    pair[1].support_ids_before_update.iter().copied().collect();
                for id in pair[0].batch_ids.iter().rev().take(cfg.capacity) {
                    assert!(next.contains(id));
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = tiny_config(Method::Clip, 0);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(Method::Clip, 0);
        cfg.warmup_epochs = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(Method::Clip, 0);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(Method::Clip, 0);
        cfg.lr_image = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(Method::Clip, 0);
        cfg.augment_strength = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Clip,
            Method::ClipPing,
            Method::AClipPing,
            Method::ClipF,
            Method::ClipD,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("clipping".parse::<Method>().is_err());
    }
}
