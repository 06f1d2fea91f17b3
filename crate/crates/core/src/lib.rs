//! Contrastive image-text pre-training with frozen-teacher neighbour guidance.
//!
//! The crate implements the full training stack on synthetic paired data:
//! a latent-class data generator, frozen teacher feature banks, a paired
//! support set with nearest-neighbour and cross-modal neighbour retrieval,
//! the guided InfoNCE objectives with hand-rolled analytic gradients, a
//! distillation baseline, AdamW with warmup-cosine scheduling, and retrieval,
//! zero-shot and linear-probe evaluation.

pub mod bank;
mod bytes;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod seeding;
pub mod support;
pub mod trainer;

pub use bank::{
    extract_features, read_bank, split_ids, write_bank, write_bank_with_dtype, BankDtype,
    FeatureBank, FrozenFeature, Modality,
};
pub use checkpoint::Checkpoint;
pub use data::{
    augment, generate_dataset, read_dataset, write_dataset, GenConfig, PairedDataset, Sample,
    Split,
};
pub use error::{Error, Result};
pub use eval::{
    class_prototypes, embed_split, linear_probe, recall_at_k, zero_shot_top1, MetricRow,
    ProbeConfig, RetrievalResult,
};
pub use linalg::{
    finite_difference_gradient, gradient_check, l2_normalize_backward, relative_gradient_error,
    similarity_matrix, softmax_cross_entropy_rows, FeatureBatch, GradCheckReport, SimilarityMatrix,
};
pub use models::{
    Adapter, AdapterGrad, AdapterPair, EncoderDims, StudentEncoder, StudentGrads, TeacherModel,
};
pub use objectives::{
    clip_loss, clip_ping_loss, distill_loss, guided_supervision_loss, kl_divergence_matched_rows,
    nn_supervision_loss, ping_loss, retrieve_nn_guidance, retrieve_xnn_guidance, symmetric_infonce,
    xnn_supervision_loss, DistillBreakdown, LossResult, ModalityMask, NeighborBatch, PairLoss,
    TemperatureParam,
};
pub use optim::{cosine_warmup_lr, lr_at, AdamW};
pub use seeding::{derive_seed, seeded_rng, splitmix64, stream_rng};
pub use support::{PairedSupportSet, SupportEntry, UpdateStrategy};
pub use trainer::{
    train, EpochRecord, GuidanceSource, Method, RunLog, StepTrace, TrainConfig, TrainOutput,
};
