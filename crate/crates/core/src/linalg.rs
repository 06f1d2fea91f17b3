//! Dense row-major batch arithmetic: the numerical substrate for every loss.
//!
//! All math runs in f64. Gradients produced elsewhere in the crate are checked
//! against [`finite_difference_gradient`], so the primitives here double as the
//! test oracle layer.

use crate::error::{Error, Result};

/// Rows with L2 norm below this are left untouched by [`FeatureBatch::l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// A batch of `rows` feature vectors of width `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureBatch {
    /// Builds a batch, validating shape and finiteness.
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature batch must be non-empty, got {rows}x{dim}"
            )));
        }
        if values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "expected {rows}x{dim}={} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "value at flat index {idx} is {}",
                values[idx]
            )));
        }
        Ok(Self { rows, dim, values })
    }

    /// All-zero batch of the given shape.
    pub fn zeros(rows: usize, dim: usize) -> Self {
        assert!(rows > 0 && dim > 0, "zero-sized batch");
        Self {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    /// Builds a batch from per-row slices, which must all share one width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no rows given".into()));
        }
        let dim = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has width {}, expected {dim}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place accumulation of gradients.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    ///
    /// Rows with norm below [`NORM_EPSILON`] pass through unchanged, and rows
    /// already within `1e-12` of unit norm are returned bit-identically, which
    /// makes normalization idempotent.
    pub fn l2_normalize(&self) -> FeatureBatch {
        let mut out = self.clone();
        for i in 0..self.rows {
            let start = i * self.dim;
            let row = &mut out.values[start..start + self.dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPSILON || (norm - 1.0).abs() < 1e-12 {
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        out
    }
}

/// Pulls an upstream gradient back through [`FeatureBatch::l2_normalize`].
///
/// `prenorm` must be the exact input the forward pass normalized; the branch
/// taken per row (pass-through vs scale) is recomputed from it so forward and
/// backward always agree.
pub fn l2_normalize_backward(prenorm: &FeatureBatch, grad_out: &FeatureBatch) -> Result<FeatureBatch> {
    if prenorm.rows != grad_out.rows || prenorm.dim != grad_out.dim {
        return Err(Error::Shape(format!(
            "prenorm {}x{} vs gradient {}x{}",
            prenorm.rows, prenorm.dim, grad_out.rows, grad_out.dim
        )));
    }
    let mut grad_in = FeatureBatch::zeros(prenorm.rows, prenorm.dim);
    for i in 0..prenorm.rows {
        let v = prenorm.row(i);
        let g = grad_out.row(i);
        let start = i * prenorm.dim;
        let out = &mut grad_in.values[start..start + prenorm.dim];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_EPSILON || (norm - 1.0).abs() < 1e-12 {
            out.copy_from_slice(g);
            continue;
        }
        let y_dot_g = v
            .iter()
            .zip(g.iter())
            .map(|(vi, gi)| (vi / norm) * gi)
            .sum::<f64>();
        for m in 0..prenorm.dim {
            let y = v[m] / norm;
            out[m] = (g[m] - y * y_dot_g) / norm;
        }
    }
    Ok(grad_in)
}

/// Pairwise scaled dot products between two batches.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    inv_temperature: f64,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps a row-major grid of precomputed logits with unit scale.
    pub fn from_logits(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "logit grid must be non-empty, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} logits for a {rows}x{cols} grid, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite logit {bad}")));
        }
        Ok(Self {
            rows,
            cols,
            inv_temperature: 1.0,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn inv_temperature(&self) -> f64 {
        self.inv_temperature
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Transposed copy. The scale factor carries over.
    pub fn transposed(&self) -> SimilarityMatrix {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        SimilarityMatrix {
            rows: self.cols,
            cols: self.rows,
            inv_temperature: self.inv_temperature,
            values,
        }
    }
}

/// `S[i][j] = inv_temperature * <a_i, b_j>`.
pub fn similarity_matrix(
    a: &FeatureBatch,
    b: &FeatureBatch,
    inv_temperature: f64,
) -> Result<SimilarityMatrix> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    if !(inv_temperature.is_finite() && inv_temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "inverse temperature must be positive and finite, got {inv_temperature}"
        )));
    }
    let mut values = vec![0.0; a.rows * b.rows];
    for i in 0..a.rows {
        let ra = a.row(i);
        for j in 0..b.rows {
            values[i * b.rows + j] = inv_temperature * dot(ra, b.row(j));
        }
    }
    Ok(SimilarityMatrix {
        rows: a.rows,
        cols: b.rows,
        inv_temperature,
        values,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

// Four independent accumulators break the add-latency chain so the scan
// loops over large queues are throughput-bound rather than latency-bound.
// The lane split is fixed, so results are deterministic for a given length.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xs, ys) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            let d = xs[k] - ys[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Mean softmax cross-entropy over rows with one target column per row.
///
/// Logits are shifted by their row maximum before exponentiation. Returns the
/// scalar loss and `dloss/dS` as a row-major `rows x cols` buffer.
pub fn softmax_cross_entropy_rows(
    s: &SimilarityMatrix,
    targets: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if targets.len() != s.rows {
        return Err(Error::Shape(format!(
            "{} targets for {} rows",
            targets.len(),
            s.rows
        )));
    }
    let n = s.rows as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; s.rows * s.cols];
    for i in 0..s.rows {
        let t = targets[i];
        if t >= s.cols {
            return Err(Error::Index(format!(
                "target {t} out of range for {} columns",
                s.cols
            )));
        }
        let row = s.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(row[t] - max - log_denom);
        let g = &mut grad[i * s.cols..(i + 1) * s.cols];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            g[j] = (p - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Central finite differences of `f` at `x` with perturbation `h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Parameter(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective returned a non-finite value while probing coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Outcome of one analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Two-norm relative error between the analytic and numeric gradients.
    pub max_relative_error: f64,
    /// Number of scalar coordinates probed.
    pub probe_count: usize,
}

/// `||a - n||_2 / max(||a||_2 + ||n||_2, 1e-12)`.
pub fn relative_gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12)
}

/// Runs finite differences against a supplied analytic gradient.
pub fn gradient_check<F>(f: F, x: &[f64], h: f64, analytic: &[f64]) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let numeric = finite_difference_gradient(f, x, h)?;
    Ok(GradCheckReport {
        max_relative_error: relative_gradient_error(analytic, &numeric),
        probe_count: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_rejects_bad_shapes_and_nan() {
        assert!(FeatureBatch::new(0, 3, vec![]).is_err());
        assert!(FeatureBatch::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            FeatureBatch::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn normalize_three_four_row() {
        let b = FeatureBatch::new(1, 2, vec![3.0, 4.0]).unwrap();
        let n = b.l2_normalize();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_leaves_zero_row_unchanged() {
        let b = FeatureBatch::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let n = b.l2_normalize();
        assert_eq!(n.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent_bitwise() {
        let b = FeatureBatch::new(2, 3, vec![0.3, -1.2, 2.5, 1e-3, 4.0, -0.7]).unwrap();
        let once = b.l2_normalize();
        let twice = once.l2_normalize();
        assert_eq!(once.values(), twice.values(), "second pass must be a no-op");
        let e1 = FeatureBatch::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e1.l2_normalize().values(), e1.values());
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_output() {
        let pre = FeatureBatch::new(1, 4, vec![0.4, -1.3, 2.2, 0.9]).unwrap();
        let out = pre.l2_normalize();
        let g = FeatureBatch::new(1, 4, vec![0.7, 0.1, -0.5, 1.3]).unwrap();
        let back = l2_normalize_backward(&pre, &g).unwrap();
        let d = dot(out.row(0), back.row(0));
        assert!(
            d.abs() < 1e-10,
            "normalization gradient must be orthogonal to the unit output, got {d}"
        );
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let pre = vec![0.4, -1.3, 2.2, 0.9, -0.2, 0.05];
        let upstream = [0.3, -0.8, 0.25, 1.1, 0.6, -0.4];
        let f = |x: &[f64]| {
            let b = FeatureBatch::new(2, 3, x.to_vec()).unwrap().l2_normalize();
            b.values()
                .iter()
                .zip(upstream.iter())
                .map(|(v, u)| v * u)
                .sum()
        };
        let pre_batch = FeatureBatch::new(2, 3, pre.clone()).unwrap();
        let g_out = FeatureBatch::new(2, 3, upstream.to_vec()).unwrap();
        let analytic = l2_normalize_backward(&pre_batch, &g_out).unwrap();
        let report = gradient_check(f, &pre, 1e-6, analytic.values()).unwrap();
        assert!(
            report.max_relative_error < 1e-8,
            "rel err {}",
            report.max_relative_error
        );
    }

    #[test]
    fn similarity_identity_rows() {
        let a = FeatureBatch::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = similarity_matrix(&a, &a, 2.0).unwrap();
        assert_eq!(s.value(0, 0), 2.0);
        assert_eq!(s.value(0, 1), 0.0);
        assert_eq!(s.value(1, 1), 2.0);
    }

    #[test]
    fn similarity_transpose_property() {
        let a = FeatureBatch::new(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = FeatureBatch::new(2, 4, (0..8).map(|i| (i as f64).cos()).collect()).unwrap();
        let ab = similarity_matrix(&a, &b, 1.7).unwrap();
        let ba = similarity_matrix(&b, &a, 1.7).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((ab.value(i, j) - ba.value(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_rejects_width_mismatch() {
        let a = FeatureBatch::zeros(2, 3);
        let b = FeatureBatch::zeros(2, 4);
        assert!(matches!(
            similarity_matrix(&a, &b, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn uniform_four_way_cross_entropy_is_ln_4() {
        let a = FeatureBatch::new(4, 1, vec![1.0; 4]).unwrap();
        let s = similarity_matrix(&a, &a, 1.0).unwrap();
        let (loss, grad) = softmax_cross_entropy_rows(&s, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 1.3862943611198906).abs() < 1e-12, "loss {loss}");
        // Uniform probabilities: every gradient entry is (1/4 - target)/4.
        assert!((grad[0] - (0.25 - 1.0) / 4.0).abs() < 1e-12);
        assert!((grad[1] - 0.25 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_give_small_loss() {
        let a = FeatureBatch::new(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let s = similarity_matrix(&a, &a, 1.0).unwrap();
        let (loss, _) = softmax_cross_entropy_rows(&s, &[0, 1]).unwrap();
        assert!(loss < 1e-4, "diagonal-dominant logits should be near zero loss, got {loss}");
    }

    #[test]
    fn cross_entropy_is_stable_under_large_logits() {
        let a = FeatureBatch::new(2, 1, vec![500.0, 400.0]).unwrap();
        let s = similarity_matrix(&a, &a, 2.0).unwrap();
        let (loss, grad) = softmax_cross_entropy_rows(&s, &[0, 1]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let a = FeatureBatch::zeros(2, 2);
        let s = similarity_matrix(&a, &a, 1.0).unwrap();
        assert!(matches!(
            softmax_cross_entropy_rows(&s, &[0, 5]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let values = vec![0.3, -0.7, 1.1, 0.4, 2.0, -0.2, 0.9, -1.5, 0.6, 0.1, -0.4, 1.3, 0.8, -0.9, 0.2, 1.7, -1.1, 0.5, 0.0, 2.1, -0.6, 1.2, 0.7, -0.3, 0.95];
        let targets = [2, 0, 4, 1, 3];
        let f = |x: &[f64]| {
            let batch = FeatureBatch::new(5, 5, x.to_vec()).unwrap();
            // Build S with scale one directly from raw logits.
            let s = similarity_matrix(&batch, &FeatureBatch::new(5, 5, identity(5)).unwrap(), 1.0).unwrap();
            softmax_cross_entropy_rows(&s, &targets).unwrap().0
        };
        let batch = FeatureBatch::new(5, 5, values.clone()).unwrap();
        let s = similarity_matrix(&batch, &FeatureBatch::new(5, 5, identity(5)).unwrap(), 1.0).unwrap();
        let (_, analytic) = softmax_cross_entropy_rows(&s, &targets).unwrap();
        let report = gradient_check(f, &values, 1e-6, &analytic).unwrap();
        assert!(
            report.max_relative_error < 1e-6,
            "rel err {}",
            report.max_relative_error
        );
        assert_eq!(report.probe_count, 25);
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    }

    #[test]
    fn finite_differences_on_quadratic() {
        let x = vec![1.0, -2.0, 3.0];
        let grad = finite_difference_gradient(|p| p.iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        for (g, xi) in grad.iter().zip(x.iter()) {
            assert!((g - 2.0 * xi).abs() < 1e-8, "quadratic slope at {xi}: {g}");
        }
    }

    #[test]
    fn finite_differences_rejects_bad_step() {
        assert!(finite_difference_gradient(|_| 0.0, &[1.0], 0.0).is_err());
        assert!(finite_difference_gradient(|_| 0.0, &[1.0], f64::NAN).is_err());
    }
}
