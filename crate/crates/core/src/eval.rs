//! Retrieval recall, zero-shot classification and a linear probe over
//! frozen embeddings.
//!
//! Batches are aligned by index: row `i` of an image batch and row `i` of
//! the matching text batch describe the same pair. Ties are always broken
//! toward the lower index so results can be compared against sort-based
//! oracles exactly.

use crate::data::{PairedDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{softmax_cross_entropy_rows, FeatureBatch, SimilarityMatrix};
use crate::models::StudentEncoder;
use crate::optim::{cosine_warmup_lr, AdamW};
use crate::seeding::seeded_rng;
use rand::seq::SliceRandom;

/// Recall@K in both retrieval directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    pub k: usize,
    pub i2t_at_k: f64,
    pub t2i_at_k: f64,
}

/// Fraction of queries whose true partner ranks in the top `k`.
///
/// Row `i` pairs with column `i`. A competitor outranks the true partner if
/// its similarity is strictly larger, or equal with a lower index.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<RetrievalResult> {
    if sim.rows() != sim.cols() {
        return Err(Error::Shape(format!(
            "index pairing needs a square grid, got {}x{}",
            sim.rows(),
            sim.cols()
        )));
    }
    let n = sim.rows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "k must lie in [1, {n}], got {k}"
        )));
    }
    let mut i2t_hits = 0usize;
    for i in 0..n {
        let row = sim.row(i);
        let truth = row[i];
        let outranked = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > truth || (v == truth && j < i))
            .count();
        if outranked < k {
            i2t_hits += 1;
        }
    }
    let mut t2i_hits = 0usize;
    for j in 0..n {
        let truth = sim.value(j, j);
        let outranked = (0..n)
            .filter(|&i| {
                let v = sim.value(i, j);
                v > truth || (v == truth && i < j)
            })
            .count();
        if outranked < k {
            t2i_hits += 1;
        }
    }
    Ok(RetrievalResult {
        k,
        i2t_at_k: i2t_hits as f64 / n as f64,
        t2i_at_k: t2i_hits as f64 / n as f64,
    })
}

/// Top-1 accuracy of nearest-prototype classification by dot product.
///
/// Ties resolve to the lowest class id.
pub fn zero_shot_top1(
    image_embeds: &FeatureBatch,
    class_prototypes: &FeatureBatch,
    labels: &[usize],
) -> Result<f64> {
    if image_embeds.dim() != class_prototypes.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match prototype dim {}",
            image_embeds.dim(),
            class_prototypes.dim()
        )));
    }
    if labels.len() != image_embeds.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            image_embeds.rows()
        )));
    }
    let c = class_prototypes.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {c} prototypes"
        )));
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let x = image_embeds.row(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for cls in 0..c {
            let score = crate::linalg::dot(x, class_prototypes.row(cls));
            if score > best_score {
                best_score = score;
                best = cls;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Linear-probe training settings.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 512,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "probe epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "probe learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Multinomial logistic regression on frozen embeddings; returns test top-1.
///
/// The classifier starts from zeros and trains with AdamW (no decay) under a
/// pure cosine schedule. Gradients never reach the embeddings.
pub fn linear_probe(
    train_embeds: &FeatureBatch,
    train_labels: &[usize],
    test_embeds: &FeatureBatch,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    if train_labels.len() != train_embeds.rows() || test_labels.len() != test_embeds.rows() {
        return Err(Error::Shape(
            "label count does not match embedding count".into(),
        ));
    }
    if train_embeds.dim() != test_embeds.dim() {
        return Err(Error::Shape(format!(
            "train dim {} does not match test dim {}",
            train_embeds.dim(),
            test_embeds.dim()
        )));
    }
    let classes = 1 + train_labels
        .iter()
        .chain(test_labels.iter())
        .copied()
        .max()
        .ok_or_else(|| Error::Empty("probe requires at least one sample".into()))?;
    let d = train_embeds.dim();
    let n = train_embeds.rows();
    let mut weight = vec![0.0; classes * d];
    let mut bias = vec![0.0; classes];
    let mut opt = AdamW::new(0.0)?;
    let mut rng = seeded_rng(cfg.seed);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_warmup_lr(step, total_steps, 0, cfg.lr)?;
            let m = chunk.len();
            let mut logits = vec![0.0; m * classes];
            for (r, &idx) in chunk.iter().enumerate() {
                let x = train_embeds.row(idx);
                for cls in 0..classes {
                    logits[r * classes + cls] =
                        crate::linalg::dot(x, &weight[cls * d..(cls + 1) * d]) + bias[cls];
                }
            }
            let grid = SimilarityMatrix::from_logits(m, classes, logits)?;
            let targets: Vec<usize> = chunk.iter().map(|&idx| train_labels[idx]).collect();
            let (_, d_logits) = softmax_cross_entropy_rows(&grid, &targets)?;
            let mut grad_w = vec![0.0; classes * d];
            let mut grad_b = vec![0.0; classes];
            for (r, &idx) in chunk.iter().enumerate() {
                let x = train_embeds.row(idx);
                for cls in 0..classes {
                    let g = d_logits[r * classes + cls];
                    if g == 0.0 {
                        continue;
                    }
                    grad_b[cls] += g;
                    for (w, v) in grad_w[cls * d..(cls + 1) * d].iter_mut().zip(x.iter()) {
                        *w += g * v;
                    }
                }
            }
            opt.begin_step();
            opt.update_slot(0, lr, &mut weight, &grad_w)?;
            opt.update_slot(1, lr, &mut bias, &grad_b)?;
            step += 1;
        }
    }
    let mut correct = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        let x = test_embeds.row(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for cls in 0..classes {
            let score = crate::linalg::dot(x, &weight[cls * d..(cls + 1) * d]) + bias[cls];
            if score > best_score {
                best_score = score;
                best = cls;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Embeds one split's raw views (no augmentation) through both encoders.
///
/// Returns image embeddings, text embeddings, class labels and sample ids,
/// all in the split's id order.
pub fn embed_split(
    image_encoder: &StudentEncoder,
    text_encoder: &StudentEncoder,
    dataset: &PairedDataset,
    split: Split,
) -> Result<(FeatureBatch, FeatureBatch, Vec<usize>, Vec<u64>)> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Empty(format!("split {} has no samples", split.as_str())));
    }
    let mut image_rows = Vec::with_capacity(indices.len());
    let mut text_rows = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in &indices {
        let s = &dataset.samples()[i];
        image_rows.push(s.raw_image.clone());
        text_rows.push(s.raw_text.clone());
        labels.push(s.class_id as usize);
        ids.push(s.id);
    }
    let (zi, _) = image_encoder.forward(&FeatureBatch::from_rows(&image_rows)?)?;
    let (zt, _) = text_encoder.forward(&FeatureBatch::from_rows(&text_rows)?)?;
    Ok((zi, zt, labels, ids))
}

/// Class prototypes: the text encoder applied to the noiseless class views.
pub fn class_prototypes(
    text_encoder: &StudentEncoder,
    dataset: &PairedDataset,
) -> Result<FeatureBatch> {
    let views = dataset.class_text_views()?;
    let (protos, _) = text_encoder.forward(&views)?;
    Ok(protos)
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

impl MetricRow {
    pub fn csv_header() -> &'static str {
        "method,seed,split,metric,k,value"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.seed, self.split, self.metric, self.k, self.value
        )
    }
}
