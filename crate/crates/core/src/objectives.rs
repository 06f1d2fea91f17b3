//! Training objectives with hand-rolled analytic gradients.
//!
//! The building block is a symmetric InfoNCE over two embedding batches.
//! On top of it sit: the plain contrastive loss between student modalities,
//! neighbour-guided and cross-modal-neighbour-guided variants whose guidance
//! side flows through a trainable adapter, their convex combinations, and a
//! KL distillation baseline. Every loss returns the gradient w.r.t. the
//! student embeddings, adapter parameters and `log(1/tau)`; gradients w.r.t.
//! frozen guidance vectors are never produced.

use crate::bank::Modality;
use crate::error::{Error, Result};
use crate::linalg::{
    l2_normalize_backward, similarity_matrix, softmax_cross_entropy_rows, FeatureBatch,
    SimilarityMatrix,
};
use crate::models::{AdapterGrad, AdapterPair};
use crate::support::{PairedSupportSet, SupportEntry};
use rand_chacha::ChaCha8Rng;

/// Learnable temperature stored as `log(1/tau)`.
///
/// The exponential keeps `1/tau` positive; setters clamp it to at most
/// `max_inv_tau` (100 by default).
#[derive(Debug, Clone)]
pub struct TemperatureParam {
    log_inv_tau: f64,
    max_inv_tau: f64,
}

impl TemperatureParam {
    pub fn new(tau_init: f64) -> Result<Self> {
        Self::with_max(tau_init, 100.0)
    }

    pub fn with_max(tau_init: f64, max_inv_tau: f64) -> Result<Self> {
        if !(tau_init.is_finite() && tau_init > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {tau_init}"
            )));
        }
        if !(max_inv_tau.is_finite() && max_inv_tau > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature clamp must be positive, got {max_inv_tau}"
            )));
        }
        let mut t = Self {
            log_inv_tau: 0.0,
            max_inv_tau,
        };
        t.set_log_inv_tau((1.0 / tau_init).ln());
        Ok(t)
    }

    pub fn from_log_inv_tau(log_inv_tau: f64, max_inv_tau: f64) -> Result<Self> {
        let mut t = Self::with_max(1.0, max_inv_tau)?;
        t.set_log_inv_tau(log_inv_tau);
        Ok(t)
    }

    pub fn log_inv_tau(&self) -> f64 {
        self.log_inv_tau
    }

    pub fn inv_tau(&self) -> f64 {
        self.log_inv_tau.exp()
    }

    pub fn max_inv_tau(&self) -> f64 {
        self.max_inv_tau
    }

    /// Sets the raw parameter, clamping so `1/tau` never exceeds the cap.
    pub fn set_log_inv_tau(&mut self, v: f64) {
        self.log_inv_tau = v.min(self.max_inv_tau.ln());
    }
}

/// Which guided supervision terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityMask {
    Both,
    ImageOnly,
    TextOnly,
}

impl ModalityMask {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityMask::Both => "both",
            ModalityMask::ImageOnly => "image_only",
            ModalityMask::TextOnly => "text_only",
        }
    }

    fn image_term(self) -> bool {
        self != ModalityMask::TextOnly
    }

    fn text_term(self) -> bool {
        self != ModalityMask::ImageOnly
    }
}

impl std::str::FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ModalityMask::Both),
            "image_only" => Ok(ModalityMask::ImageOnly),
            "text_only" => Ok(ModalityMask::TextOnly),
            other => Err(Error::Parameter(format!("unknown modality mask '{other}'"))),
        }
    }
}

/// Value and gradients of one symmetric InfoNCE term over batches `a` and `b`.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: FeatureBatch,
    pub grad_b: FeatureBatch,
    pub grad_log_inv_tau: f64,
}

/// Value and gradients of a composite training loss.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_student_image: FeatureBatch,
    pub grad_student_text: FeatureBatch,
    pub grad_adapter_image: Option<AdapterGrad>,
    pub grad_adapter_text: Option<AdapterGrad>,
    pub grad_log_inv_tau: f64,
}

impl LossResult {
    fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_student_image: FeatureBatch::zeros(rows, dim),
            grad_student_text: FeatureBatch::zeros(rows, dim),
            grad_adapter_image: None,
            grad_adapter_text: None,
            grad_log_inv_tau: 0.0,
        }
    }

    /// `wa * a + wb * b` over the value and every gradient field.
    ///
    /// The unit-weight endpoints short-circuit to a clone of the surviving
    /// side, so combinations at weight 0 / 1 reduce to their endpoint
    /// bit-for-bit.
    pub fn affine(a: &LossResult, wa: f64, b: &LossResult, wb: f64) -> Result<LossResult> {
        if wa == 1.0 && wb == 0.0 {
            return Ok(a.clone());
        }
        if wa == 0.0 && wb == 1.0 {
            return Ok(b.clone());
        }
        if a.grad_student_image.rows() != b.grad_student_image.rows()
            || a.grad_student_image.dim() != b.grad_student_image.dim()
        {
            return Err(Error::Shape(format!(
                "cannot combine losses over {}x{} and {}x{} batches",
                a.grad_student_image.rows(),
                a.grad_student_image.dim(),
                b.grad_student_image.rows(),
                b.grad_student_image.dim()
            )));
        }
        let combine_batch = |x: &FeatureBatch, y: &FeatureBatch| {
            let mut out = x.clone();
            for (o, (xv, yv)) in out
                .values_mut()
                .iter_mut()
                .zip(x.values().iter().zip(y.values().iter()))
            {
                *o = wa * xv + wb * yv;
            }
            out
        };
        let combine_adapter = |x: &Option<AdapterGrad>, y: &Option<AdapterGrad>| -> Result<Option<AdapterGrad>> {
            match (x, y) {
                (None, None) => Ok(None),
                (Some(g), None) => Ok(Some(AdapterGrad {
                    weight: g.weight.iter().map(|v| wa * v).collect(),
                    bias: g.bias.iter().map(|v| wa * v).collect(),
                })),
                (None, Some(g)) => Ok(Some(AdapterGrad {
                    weight: g.weight.iter().map(|v| wb * v).collect(),
                    bias: g.bias.iter().map(|v| wb * v).collect(),
                })),
                (Some(ga), Some(gb)) => {
                    if ga.weight.len() != gb.weight.len() || ga.bias.len() != gb.bias.len() {
                        return Err(Error::Shape(
                            "adapter gradient shapes differ between loss terms".into(),
                        ));
                    }
                    Ok(Some(AdapterGrad {
                        weight: ga
                            .weight
                            .iter()
                            .zip(gb.weight.iter())
                            .map(|(x, y)| wa * x + wb * y)
                            .collect(),
                        bias: ga
                            .bias
                            .iter()
                            .zip(gb.bias.iter())
                            .map(|(x, y)| wa * x + wb * y)
                            .collect(),
                    }))
                }
            }
        };
        Ok(LossResult {
            value: wa * a.value + wb * b.value,
            grad_student_image: combine_batch(&a.grad_student_image, &b.grad_student_image),
            grad_student_text: combine_batch(&a.grad_student_text, &b.grad_student_text),
            grad_adapter_image: combine_adapter(&a.grad_adapter_image, &b.grad_adapter_image)?,
            grad_adapter_text: combine_adapter(&a.grad_adapter_text, &b.grad_adapter_text)?,
            grad_log_inv_tau: wa * a.grad_log_inv_tau + wb * b.grad_log_inv_tau,
        })
    }
}

/// `G . m` for a row-major `n x n` coefficient grid and an `n x d` batch.
fn grid_times_batch(g: &[f64], m: &FeatureBatch) -> FeatureBatch {
    let n = m.rows();
    let d = m.dim();
    let mut out = FeatureBatch::zeros(n, d);
    for i in 0..n {
        let gi = &g[i * n..(i + 1) * n];
        let dst = &mut out.values_mut()[i * d..(i + 1) * d];
        for (j, &w) in gi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in dst.iter_mut().zip(m.row(j).iter()) {
                *o += w * v;
            }
        }
    }
    out
}

/// `G^T . m`, accumulating rows of `m` into columns of the grid.
fn grid_transpose_times_batch(g: &[f64], m: &FeatureBatch) -> FeatureBatch {
    let n = m.rows();
    let d = m.dim();
    let mut out = FeatureBatch::zeros(n, d);
    for i in 0..n {
        let mi = m.row(i).to_vec();
        let gi = &g[i * n..(i + 1) * n];
        for (j, &w) in gi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let dst = &mut out.values_mut()[j * d..(j + 1) * d];
            for (o, v) in dst.iter_mut().zip(mi.iter()) {
                *o += w * v;
            }
        }
    }
    out
}

/// Symmetric InfoNCE between matched rows of `a` and `b`.
///
/// Rows are expected to be L2-normalized already. The value averages the
/// `a -> b` and `b -> a` cross-entropies; diagonal entries are the targets.
/// With `stop_grad_a` the gradient w.r.t. `a` is dropped.
pub fn symmetric_infonce(
    a: &FeatureBatch,
    b: &FeatureBatch,
    temp: &TemperatureParam,
    stop_grad_a: bool,
) -> Result<PairLoss> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    let n = a.rows();
    let s = similarity_matrix(a, b, temp.inv_tau())?;
    let targets: Vec<usize> = (0..n).collect();
    let (l_ab, g_ab) = softmax_cross_entropy_rows(&s, &targets)?;
    let (l_ba, g_ba) = softmax_cross_entropy_rows(&s.transposed(), &targets)?;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = 0.5 * (g_ab[i * n + j] + g_ba[j * n + i]);
        }
    }
    let inv_tau = temp.inv_tau();
    let scale = |mut batch: FeatureBatch| {
        for v in batch.values_mut() {
            *v *= inv_tau;
        }
        batch
    };
    let grad_a = if stop_grad_a {
        FeatureBatch::zeros(n, a.dim())
    } else {
        scale(grid_times_batch(&g, b))
    };
    let grad_b = scale(grid_transpose_times_batch(&g, a));
    let grad_log_inv_tau = g
        .iter()
        .zip(s.values().iter())
        .map(|(gv, sv)| gv * sv)
        .sum();
    Ok(PairLoss {
        value: 0.5 * (l_ab + l_ba),
        grad_a,
        grad_b,
        grad_log_inv_tau,
    })
}

/// Contrastive loss between the two student modalities.
pub fn clip_loss(
    student_image: &FeatureBatch,
    student_text: &FeatureBatch,
    temp: &TemperatureParam,
) -> Result<LossResult> {
    let pair = symmetric_infonce(student_image, student_text, temp, false)?;
    Ok(LossResult {
        value: pair.value,
        grad_student_image: pair.grad_a,
        grad_student_text: pair.grad_b,
        grad_adapter_image: None,
        grad_adapter_text: None,
        grad_log_inv_tau: pair.grad_log_inv_tau,
    })
}

/// Guidance vectors retrieved for one modality, in batch order.
#[derive(Debug, Clone)]
pub struct NeighborBatch {
    pub ids: Vec<u64>,
    pub vectors: FeatureBatch,
}

/// Same-modality nearest-neighbour guidance for a batch of frozen pairs.
///
/// Image rows are resolved first, then text rows; with `top_k > 1` each
/// resolution consumes one draw from `rng` in that order.
pub fn retrieve_nn_guidance(
    set: &PairedSupportSet,
    frozen_image: &FeatureBatch,
    frozen_text: &FeatureBatch,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(NeighborBatch, NeighborBatch)> {
    let n = frozen_image.rows();
    if frozen_text.rows() != n {
        return Err(Error::Shape(format!(
            "frozen batches differ in size: {n} vs {}",
            frozen_text.rows()
        )));
    }
    if top_k == 1 {
        let image = neighbor_batch(set.nn_retrieve_batch(frozen_image, Modality::Image)?, Modality::Image)?;
        let text = neighbor_batch(set.nn_retrieve_batch(frozen_text, Modality::Text)?, Modality::Text)?;
        return Ok((image, text));
    }
    let mut image_ids = Vec::with_capacity(n);
    let mut image_rows = Vec::with_capacity(n);
    for k in 0..n {
        let e = set.topk_sample(frozen_image.row(k), Modality::Image, top_k, rng)?;
        image_ids.push(e.sample_id);
        image_rows.push(e.image_vector.clone());
    }
    let mut text_ids = Vec::with_capacity(n);
    let mut text_rows = Vec::with_capacity(n);
    for k in 0..n {
        let e = set.topk_sample(frozen_text.row(k), Modality::Text, top_k, rng)?;
        text_ids.push(e.sample_id);
        text_rows.push(e.text_vector.clone());
    }
    Ok((
        NeighborBatch {
            ids: image_ids,
            vectors: FeatureBatch::from_rows(&image_rows)?,
        },
        NeighborBatch {
            ids: text_ids,
            vectors: FeatureBatch::from_rows(&text_rows)?,
        },
    ))
}

/// Collects retrieved entries into a [`NeighborBatch`] holding the entries'
/// vectors for `side`.
fn neighbor_batch(entries: Vec<&SupportEntry>, side: Modality) -> Result<NeighborBatch> {
    let mut ids = Vec::with_capacity(entries.len());
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        ids.push(e.sample_id);
        rows.push(match side {
            Modality::Image => e.image_vector.clone(),
            Modality::Text => e.text_vector.clone(),
        });
    }
    Ok(NeighborBatch {
        ids,
        vectors: FeatureBatch::from_rows(&rows)?,
    })
}

/// Cross-modal neighbour guidance: the image guidance vector for a pair is
/// the image half of the entry matched by the pair's *text* feature, and
/// vice versa.
pub fn retrieve_xnn_guidance(
    set: &PairedSupportSet,
    frozen_image: &FeatureBatch,
    frozen_text: &FeatureBatch,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(NeighborBatch, NeighborBatch)> {
    let n = frozen_image.rows();
    if frozen_text.rows() != n {
        return Err(Error::Shape(format!(
            "frozen batches differ in size: {n} vs {}",
            frozen_text.rows()
        )));
    }
    if top_k == 1 {
        // Delegated retrieval: the other modality's feature picks the entry.
        let image = neighbor_batch(set.nn_retrieve_batch(frozen_text, Modality::Text)?, Modality::Image)?;
        let text = neighbor_batch(set.nn_retrieve_batch(frozen_image, Modality::Image)?, Modality::Text)?;
        return Ok((image, text));
    }
    let mut image_ids = Vec::with_capacity(n);
    let mut image_rows = Vec::with_capacity(n);
    for k in 0..n {
        let e = set.xnn_topk_sample(
            frozen_image.row(k),
            frozen_text.row(k),
            Modality::Image,
            top_k,
            rng,
        )?;
        image_ids.push(e.sample_id);
        image_rows.push(e.image_vector.clone());
    }
    let mut text_ids = Vec::with_capacity(n);
    let mut text_rows = Vec::with_capacity(n);
    for k in 0..n {
        let e = set.xnn_topk_sample(
            frozen_image.row(k),
            frozen_text.row(k),
            Modality::Text,
            top_k,
            rng,
        )?;
        text_ids.push(e.sample_id);
        text_rows.push(e.text_vector.clone());
    }
    Ok((
        NeighborBatch {
            ids: image_ids,
            vectors: FeatureBatch::from_rows(&image_rows)?,
        },
        NeighborBatch {
            ids: text_ids,
            vectors: FeatureBatch::from_rows(&text_rows)?,
        },
    ))
}

/// Symmetric InfoNCE of each student modality against adapted, normalized
/// guidance vectors. The only trainable path on the guidance side is the
/// adapter; masked terms contribute nothing.
pub fn guided_supervision_loss(
    guidance_image: &FeatureBatch,
    guidance_text: &FeatureBatch,
    student_image: &FeatureBatch,
    student_text: &FeatureBatch,
    adapters: &AdapterPair,
    temp: &TemperatureParam,
    mask: ModalityMask,
) -> Result<LossResult> {
    let n = student_image.rows();
    let d = student_image.dim();
    if student_text.rows() != n || student_text.dim() != d {
        return Err(Error::Shape(format!(
            "student batches differ: {}x{} vs {}x{}",
            n,
            d,
            student_text.rows(),
            student_text.dim()
        )));
    }
    let mut out = LossResult::zeros(n, d);
    if mask.image_term() {
        let adapted = adapters.image.forward(guidance_image)?;
        let normalized = adapted.l2_normalize();
        let part = symmetric_infonce(&normalized, student_image, temp, false)?;
        let d_adapted = l2_normalize_backward(&adapted, &part.grad_a)?;
        out.grad_adapter_image = adapters.image.backward(guidance_image, &d_adapted)?;
        out.value += part.value;
        out.grad_log_inv_tau += part.grad_log_inv_tau;
        accumulate(&mut out.grad_student_image, &part.grad_b);
    }
    if mask.text_term() {
        let adapted = adapters.text.forward(guidance_text)?;
        let normalized = adapted.l2_normalize();
        let part = symmetric_infonce(&normalized, student_text, temp, false)?;
        let d_adapted = l2_normalize_backward(&adapted, &part.grad_a)?;
        out.grad_adapter_text = adapters.text.backward(guidance_text, &d_adapted)?;
        out.value += part.value;
        out.grad_log_inv_tau += part.grad_log_inv_tau;
        accumulate(&mut out.grad_student_text, &part.grad_b);
    }
    Ok(out)
}

fn accumulate(dst: &mut FeatureBatch, src: &FeatureBatch) {
    for (d, s) in dst.values_mut().iter_mut().zip(src.values().iter()) {
        *d += s;
    }
}

/// Sum of the image- and text-side nearest-neighbour supervision terms.
#[allow(clippy::too_many_arguments)]
pub fn nn_supervision_loss(
    frozen_image: &FeatureBatch,
    frozen_text: &FeatureBatch,
    student_image: &FeatureBatch,
    student_text: &FeatureBatch,
    set: &PairedSupportSet,
    adapters: &AdapterPair,
    temp: &TemperatureParam,
    mask: ModalityMask,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossResult> {
    let (gi, gt) = retrieve_nn_guidance(set, frozen_image, frozen_text, top_k, rng)?;
    guided_supervision_loss(
        &gi.vectors,
        &gt.vectors,
        student_image,
        student_text,
        adapters,
        temp,
        mask,
    )
}

/// Sum of the image- and text-side cross-modal neighbour supervision terms.
#[allow(clippy::too_many_arguments)]
pub fn xnn_supervision_loss(
    frozen_image: &FeatureBatch,
    frozen_text: &FeatureBatch,
    student_image: &FeatureBatch,
    student_text: &FeatureBatch,
    set: &PairedSupportSet,
    adapters: &AdapterPair,
    temp: &TemperatureParam,
    mask: ModalityMask,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossResult> {
    let (gi, gt) = retrieve_xnn_guidance(set, frozen_image, frozen_text, top_k, rng)?;
    guided_supervision_loss(
        &gi.vectors,
        &gt.vectors,
        student_image,
        student_text,
        adapters,
        temp,
        mask,
    )
}

/// `(1 - alpha) * nn + alpha * xnn`.
pub fn ping_loss(nn: &LossResult, xnn: &LossResult, alpha: f64) -> Result<LossResult> {
    check_unit_interval("alpha", alpha)?;
    LossResult::affine(nn, 1.0 - alpha, xnn, alpha)
}

/// `(1 - lambda) * clip + lambda * ping`.
pub fn clip_ping_loss(clip: &LossResult, ping: &LossResult, lambda: f64) -> Result<LossResult> {
    check_unit_interval("lambda", lambda)?;
    LossResult::affine(clip, 1.0 - lambda, ping, lambda)
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
        return Err(Error::Parameter(format!(
            "{name} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Mean row-wise `KL(softmax(t_row) || softmax(s_row))`.
///
/// Returns the value and the gradients w.r.t. both logit grids.
pub fn kl_divergence_matched_rows(
    t: &SimilarityMatrix,
    s: &SimilarityMatrix,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if t.rows() != s.rows() || t.cols() != s.cols() {
        return Err(Error::Shape(format!(
            "logit grids differ: {}x{} vs {}x{}",
            t.rows(),
            t.cols(),
            s.rows(),
            s.cols()
        )));
    }
    let (rows, cols) = (t.rows(), t.cols());
    let n = rows as f64;
    let mut value = 0.0;
    let mut grad_t = vec![0.0; rows * cols];
    let mut grad_s = vec![0.0; rows * cols];
    let mut log_p = vec![0.0; cols];
    let mut log_q = vec![0.0; cols];
    for r in 0..rows {
        log_softmax_into(t.row(r), &mut log_p);
        log_softmax_into(s.row(r), &mut log_q);
        let mut kl = 0.0;
        for c in 0..cols {
            kl += log_p[c].exp() * (log_p[c] - log_q[c]);
        }
        value += kl;
        let gt = &mut grad_t[r * cols..(r + 1) * cols];
        let gs = &mut grad_s[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let p = log_p[c].exp();
            let q = log_q[c].exp();
            gs[c] = (q - p) / n;
            gt[c] = p * ((log_p[c] - log_q[c]) - kl) / n;
        }
    }
    Ok((value / n, grad_t, grad_s))
}

fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &v in row {
        denom += (v - max).exp();
    }
    let log_denom = denom.ln();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = v - max - log_denom;
    }
}

/// Distillation baseline value plus the separate component values for logging.
#[derive(Debug, Clone)]
pub struct DistillBreakdown {
    pub total: LossResult,
    pub clip_value: f64,
    pub distill_value: f64,
}

/// `(1 - lambda) * clip + lambda * 0.5 * (KL_i2t + KL_t2i)` where the KL terms
/// compare adapted-teacher similarity rows against student similarity rows.
///
/// The teacher side is differentiated through its adapters; the raw frozen
/// features themselves receive no gradient. `lambda = 0` short-circuits to the
/// pure contrastive loss.
pub fn distill_loss(
    frozen_image: &FeatureBatch,
    frozen_text: &FeatureBatch,
    student_image: &FeatureBatch,
    student_text: &FeatureBatch,
    adapters: &AdapterPair,
    temp: &TemperatureParam,
    lambda_distill: f64,
) -> Result<DistillBreakdown> {
    check_unit_interval("lambda_distill", lambda_distill)?;
    let clip = clip_loss(student_image, student_text, temp)?;
    let clip_value = clip.value;
    if lambda_distill == 0.0 {
        return Ok(DistillBreakdown {
            total: clip,
            clip_value,
            distill_value: 0.0,
        });
    }
    let n = student_image.rows();
    if frozen_image.rows() != n || frozen_text.rows() != n {
        return Err(Error::Shape(format!(
            "frozen batches ({} / {}) do not match student batch size {n}",
            frozen_image.rows(),
            frozen_text.rows()
        )));
    }
    let teacher_image_pre = adapters.image.forward(frozen_image)?;
    let teacher_text_pre = adapters.text.forward(frozen_text)?;
    let teacher_image = teacher_image_pre.l2_normalize();
    let teacher_text = teacher_text_pre.l2_normalize();
    let inv_tau = temp.inv_tau();
    let s_teacher = similarity_matrix(&teacher_image, &teacher_text, inv_tau)?;
    let s_student = similarity_matrix(student_image, student_text, inv_tau)?;
    let (kl_i2t, gt1, gs1) = kl_divergence_matched_rows(&s_teacher, &s_student)?;
    let (kl_t2i, gt2, gs2) =
        kl_divergence_matched_rows(&s_teacher.transposed(), &s_student.transposed())?;
    let distill_value = 0.5 * (kl_i2t + kl_t2i);
    let mut grad_s_teacher = vec![0.0; n * n];
    let mut grad_s_student = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            grad_s_teacher[i * n + j] = 0.5 * (gt1[i * n + j] + gt2[j * n + i]);
            grad_s_student[i * n + j] = 0.5 * (gs1[i * n + j] + gs2[j * n + i]);
        }
    }
    let lam = lambda_distill;
    let scale_into = |mut batch: FeatureBatch, w: f64| {
        for v in batch.values_mut() {
            *v *= w;
        }
        batch
    };
    // Student side: (1 - lam) * clip gradient + lam * KL chain.
    let mut grad_student_image = scale_into(clip.grad_student_image, 1.0 - lam);
    let kl_gi = scale_into(grid_times_batch(&grad_s_student, student_text), lam * inv_tau);
    accumulate(&mut grad_student_image, &kl_gi);
    let mut grad_student_text = scale_into(clip.grad_student_text, 1.0 - lam);
    let kl_gt = scale_into(
        grid_transpose_times_batch(&grad_s_student, student_image),
        lam * inv_tau,
    );
    accumulate(&mut grad_student_text, &kl_gt);
    // Teacher side: through normalization into the adapters.
    let d_teacher_image = scale_into(grid_times_batch(&grad_s_teacher, &teacher_text), lam * inv_tau);
    let d_teacher_text = scale_into(
        grid_transpose_times_batch(&grad_s_teacher, &teacher_image),
        lam * inv_tau,
    );
    let d_pre_image = l2_normalize_backward(&teacher_image_pre, &d_teacher_image)?;
    let d_pre_text = l2_normalize_backward(&teacher_text_pre, &d_teacher_text)?;
    let grad_adapter_image = adapters.image.backward(frozen_image, &d_pre_image)?;
    let grad_adapter_text = adapters.text.backward(frozen_text, &d_pre_text)?;
    let grad_log_kl: f64 = grad_s_student
        .iter()
        .zip(s_student.values().iter())
        .map(|(g, s)| g * s)
        .sum::<f64>()
        + grad_s_teacher
            .iter()
            .zip(s_teacher.values().iter())
            .map(|(g, s)| g * s)
            .sum::<f64>();
    Ok(DistillBreakdown {
        total: LossResult {
            value: (1.0 - lam) * clip_value + lam * distill_value,
            grad_student_image,
            grad_student_text,
            grad_adapter_image,
            grad_adapter_text,
            grad_log_inv_tau: (1.0 - lam) * clip.grad_log_inv_tau + lam * grad_log_kl,
        },
        clip_value,
        distill_value,
    })
}
