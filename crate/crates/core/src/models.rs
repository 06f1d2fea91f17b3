//! Student encoders, linear adapters and frozen teacher networks.
//!
//! The student is a one-layer backbone followed by a two-layer projection
//! head, GELU between affine maps, with L2 normalization on the output.
//! Backward passes are hand-rolled; forward caches are version-stamped so a
//! cache from before a parameter update cannot be replayed.

use crate::bank::Modality;
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_backward, FeatureBatch};
use crate::seeding::seeded_rng;
use rand::Rng;

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Exact derivative of the tanh-approximated GELU.
pub fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Dense affine map `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone)]
struct AffineLayer {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl AffineLayer {
    /// Xavier-uniform weights, zero biases, drawn row-major from `rng`.
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &FeatureBatch) -> FeatureBatch {
        debug_assert_eq!(x.dim(), self.in_dim);
        let mut out = FeatureBatch::zeros(x.rows(), self.out_dim);
        for k in 0..x.rows() {
            let xr = x.row(k);
            let or = &mut out.values_mut()[k * self.out_dim..(k + 1) * self.out_dim];
            for o in 0..self.out_dim {
                let wr = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias[o];
                for (w, v) in wr.iter().zip(xr.iter()) {
                    acc += w * v;
                }
                or[o] = acc;
            }
        }
        out
    }

    /// Accumulates `dW`, `db` and returns the gradient w.r.t. the layer input.
    fn backward(
        &self,
        input: &FeatureBatch,
        grad_out: &FeatureBatch,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> FeatureBatch {
        let mut grad_in = FeatureBatch::zeros(input.rows(), self.in_dim);
        for k in 0..input.rows() {
            let xr = input.row(k);
            let gr = grad_out.row(k);
            let gi = &mut grad_in.values_mut()[k * self.in_dim..(k + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let g = gr[o];
                grad_bias[o] += g;
                let wr = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let gw = &mut grad_weight[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    gw[i] += g * xr[i];
                    gi[i] += g * wr[i];
                }
            }
        }
        grad_in
    }
}

/// Width of every stage of the student encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_raw: usize,
    pub d_hidden: usize,
    pub d_proj_hidden: usize,
    pub d_out: usize,
}

/// Trainable encoder for one modality.
#[derive(Debug, Clone)]
pub struct StudentEncoder {
    modality: Modality,
    dims: EncoderDims,
    backbone: AffineLayer,
    proj_hidden: AffineLayer,
    proj_out: AffineLayer,
    version: u64,
}

/// Intermediate activations captured by [`StudentEncoder::forward`].
///
/// Tied to the parameter version it was produced under; replaying it after an
/// update is rejected.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: FeatureBatch,
    z0: FeatureBatch,
    a0: FeatureBatch,
    z1: FeatureBatch,
    a1: FeatureBatch,
    z2: FeatureBatch,
}

/// Parameter gradients in `visit_tensors_mut` order:
/// backbone weight, backbone bias, hidden weight, hidden bias, output weight,
/// output bias.
#[derive(Debug, Clone)]
pub struct StudentGrads {
    pub tensors: [Vec<f64>; 6],
}

impl StudentEncoder {
    /// Seeded Xavier-uniform initialization, zero biases.
    pub fn new(modality: Modality, dims: EncoderDims, seed: u64) -> Result<Self> {
        for (name, d) in [
            ("d_raw", dims.d_raw),
            ("d_hidden", dims.d_hidden),
            ("d_proj_hidden", dims.d_proj_hidden),
            ("d_out", dims.d_out),
        ] {
            if d == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        let mut rng = seeded_rng(seed);
        Ok(Self {
            modality,
            dims,
            backbone: AffineLayer::init(dims.d_raw, dims.d_hidden, &mut rng),
            proj_hidden: AffineLayer::init(dims.d_hidden, dims.d_proj_hidden, &mut rng),
            proj_out: AffineLayer::init(dims.d_proj_hidden, dims.d_out, &mut rng),
            version: 0,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    /// Embeds a raw batch; output rows are L2-normalized.
    pub fn forward(&self, raw: &FeatureBatch) -> Result<(FeatureBatch, ForwardCache)> {
        if raw.dim() != self.dims.d_raw {
            return Err(Error::Shape(format!(
                "encoder expects raw width {}, got {}",
                self.dims.d_raw,
                raw.dim()
            )));
        }
        let z0 = self.backbone.forward(raw);
        let a0 = map_batch(&z0, gelu);
        let z1 = self.proj_hidden.forward(&a0);
        let a1 = map_batch(&z1, gelu);
        let z2 = self.proj_out.forward(&a1);
        let out = z2.l2_normalize();
        let cache = ForwardCache {
            version: self.version,
            input: raw.clone(),
            z0,
            a0,
            z1,
            a1,
            z2,
        };
        Ok((out, cache))
    }

    /// Backpropagates a gradient w.r.t. the normalized output into parameter
    /// gradients. The cache must come from a forward pass at the current
    /// parameter version.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &FeatureBatch) -> Result<StudentGrads> {
        if cache.version != self.version {
            return Err(Error::Contract(format!(
                "stale forward cache: built at version {}, encoder is at {}",
                cache.version, self.version
            )));
        }
        if grad_out.rows() != cache.input.rows() || grad_out.dim() != self.dims.d_out {
            return Err(Error::Shape(format!(
                "output gradient {}x{} does not match forward batch {}x{}",
                grad_out.rows(),
                grad_out.dim(),
                cache.input.rows(),
                self.dims.d_out
            )));
        }
        let mut grads = StudentGrads {
            tensors: [
                vec![0.0; self.backbone.weight.len()],
                vec![0.0; self.backbone.bias.len()],
                vec![0.0; self.proj_hidden.weight.len()],
                vec![0.0; self.proj_hidden.bias.len()],
                vec![0.0; self.proj_out.weight.len()],
                vec![0.0; self.proj_out.bias.len()],
            ],
        };
        let dz2 = l2_normalize_backward(&cache.z2, grad_out)?;
        let [gw0, gb0, gw1, gb1, gw2, gb2] = &mut grads.tensors;
        let da1 = self.proj_out.backward(&cache.a1, &dz2, gw2, gb2);
        let dz1 = mul_by_derivative(&da1, &cache.z1);
        let da0 = self.proj_hidden.backward(&cache.a0, &dz1, gw1, gb1);
        let dz0 = mul_by_derivative(&da0, &cache.z0);
        self.backbone.backward(&cache.input, &dz0, gw0, gb0);
        Ok(grads)
    }

    /// Tensor lengths in `visit_tensors_mut` order.
    pub fn tensor_sizes(&self) -> [usize; 6] {
        [
            self.backbone.weight.len(),
            self.backbone.bias.len(),
            self.proj_hidden.weight.len(),
            self.proj_hidden.bias.len(),
            self.proj_out.weight.len(),
            self.proj_out.bias.len(),
        ]
    }

    /// Mutable access to every parameter tensor. Bumps the version, so caches
    /// taken before this call can no longer be used for backward.
    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        f(0, &mut self.backbone.weight);
        f(1, &mut self.backbone.bias);
        f(2, &mut self.proj_hidden.weight);
        f(3, &mut self.proj_hidden.bias);
        f(4, &mut self.proj_out.weight);
        f(5, &mut self.proj_out.bias);
        self.version += 1;
    }

    /// All parameters flattened in tensor order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.backbone.weight);
        out.extend_from_slice(&self.backbone.bias);
        out.extend_from_slice(&self.proj_hidden.weight);
        out.extend_from_slice(&self.proj_hidden.bias);
        out.extend_from_slice(&self.proj_out.weight);
        out.extend_from_slice(&self.proj_out.bias);
        out
    }

    /// Overwrites all parameters from a flat buffer laid out as
    /// [`Self::flat_params`] produces.
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = self.tensor_sizes().iter().sum();
        if params.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        let mut offset = 0;
        self.visit_tensors_mut(|_, t| {
            t.copy_from_slice(&params[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }
}

fn map_batch(b: &FeatureBatch, f: impl Fn(f64) -> f64) -> FeatureBatch {
    let mut out = b.clone();
    for v in out.values_mut() {
        *v = f(*v);
    }
    out
}

/// Elementwise `grad * gelu'(pre_activation)`.
fn mul_by_derivative(grad: &FeatureBatch, pre: &FeatureBatch) -> FeatureBatch {
    let mut out = grad.clone();
    for (g, z) in out.values_mut().iter_mut().zip(pre.values().iter()) {
        *g *= gelu_prime(*z);
    }
    out
}

/// Gradient of an [`Adapter`]'s parameters.
#[derive(Debug, Clone)]
pub struct AdapterGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Single affine map from teacher width to student width.
///
/// Enabled by default exactly when the widths differ; a disabled adapter with
/// equal widths acts as identity.
#[derive(Debug, Clone)]
pub struct Adapter {
    modality: Modality,
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    enabled: bool,
}

impl Adapter {
    pub fn new(modality: Modality, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Self::with_enabled(modality, in_dim, out_dim, seed, in_dim != out_dim)
    }

    /// Constructor with an explicit enable override.
    pub fn with_enabled(
        modality: Modality,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
        enabled: bool,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Parameter("adapter dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let layer = AffineLayer::init(in_dim, out_dim, &mut rng);
        Ok(Self {
            modality,
            in_dim,
            out_dim,
            weight: layer.weight,
            bias: layer.bias,
            enabled,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies the affine map, or passes through when disabled with equal
    /// widths. Driving a disabled adapter across unequal widths is a misuse.
    pub fn forward(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        if x.dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {}",
                self.in_dim,
                x.dim()
            )));
        }
        if !self.enabled {
            if self.in_dim == self.out_dim {
                return Ok(x.clone());
            }
            return Err(Error::Contract(format!(
                "disabled adapter cannot map {} -> {}",
                self.in_dim, self.out_dim
            )));
        }
        let layer = AffineLayer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        };
        Ok(layer.forward(x))
    }

    /// Parameter gradients for an upstream gradient on the adapter output.
    /// Inputs are frozen, so no input gradient is produced. Returns `None`
    /// when the adapter is disabled.
    pub fn backward(
        &self,
        input: &FeatureBatch,
        grad_out: &FeatureBatch,
    ) -> Result<Option<AdapterGrad>> {
        if !self.enabled {
            return Ok(None);
        }
        if input.rows() != grad_out.rows()
            || input.dim() != self.in_dim
            || grad_out.dim() != self.out_dim
        {
            return Err(Error::Shape(format!(
                "adapter backward got input {}x{} and gradient {}x{}",
                input.rows(),
                input.dim(),
                grad_out.rows(),
                grad_out.dim()
            )));
        }
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for k in 0..input.rows() {
            let xr = input.row(k);
            let gr = grad_out.row(k);
            for o in 0..self.out_dim {
                gb[o] += gr[o];
                let dst = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    dst[i] += gr[o] * xr[i];
                }
            }
        }
        Ok(Some(AdapterGrad { weight: gw, bias: gb }))
    }

    pub fn tensor_sizes(&self) -> [usize; 2] {
        [self.weight.len(), self.bias.len()]
    }

    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        f(0, &mut self.weight);
        f(1, &mut self.bias);
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.weight.clone();
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.weight.len() + self.bias.len() {
            return Err(Error::Shape(format!(
                "expected {} adapter parameters, got {}",
                self.weight.len() + self.bias.len(),
                params.len()
            )));
        }
        let split = self.weight.len();
        self.weight.copy_from_slice(&params[..split]);
        self.bias.copy_from_slice(&params[split..]);
        Ok(())
    }
}

/// Image and text adapters, carried together through the loss plumbing.
#[derive(Debug, Clone)]
pub struct AdapterPair {
    pub image: Adapter,
    pub text: Adapter,
}

/// Frozen feature extractor: `tanh(W x + b)` with seed-derived parameters.
/// There is no mutable access; a teacher never changes after construction.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    modality: Modality,
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl TeacherModel {
    pub fn new(modality: Modality, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Parameter("teacher dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let layer = AffineLayer::init(in_dim, out_dim, &mut rng);
        Ok(Self {
            modality,
            in_dim,
            out_dim,
            weight: layer.weight,
            bias: layer.bias,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, raw: &FeatureBatch) -> Result<FeatureBatch> {
        if raw.dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "teacher expects raw width {}, got {}",
                self.in_dim,
                raw.dim()
            )));
        }
        let layer = AffineLayer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        };
        let mut out = layer.forward(raw);
        for v in out.values_mut() {
            *v = v.tanh();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gradient_check, FeatureBatch};

    fn dims() -> EncoderDims {
        EncoderDims {
            d_raw: 8,
            d_hidden: 6,
            d_proj_hidden: 5,
            d_out: 4,
        }
    }

    fn random_batch(rows: usize, dim: usize, seed: u64) -> FeatureBatch {
        let mut rng = seeded_rng(seed);
        FeatureBatch::new(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .unwrap()
    }

    #[test]
    fn gelu_matches_its_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9, 4.2] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_prime(x) - numeric).abs() < 1e-8,
                "gelu'({x}) analytic {} vs numeric {numeric}",
                gelu_prime(x)
            );
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn init_is_xavier_bounded_with_zero_bias() {
        let enc = StudentEncoder::new(Modality::Image, dims(), 11).unwrap();
        let limit0 = (6.0 / (8 + 6) as f64).sqrt();
        assert!(enc.backbone.weight.iter().all(|w| w.abs() <= limit0));
        assert!(enc.backbone.bias.iter().all(|b| *b == 0.0));
        assert!(enc.proj_out.bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = StudentEncoder::new(Modality::Image, dims(), 5).unwrap();
        let b = StudentEncoder::new(Modality::Image, dims(), 5).unwrap();
        let c = StudentEncoder::new(Modality::Image, dims(), 6).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_rows() {
        let enc = StudentEncoder::new(Modality::Text, dims(), 3).unwrap();
        let raw = FeatureBatch::zeros(2, 8);
        let (out, _) = enc.forward(&raw).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0), "epsilon guard must keep zero rows");
    }

    #[test]
    fn output_rows_are_unit_norm() {
        let enc = StudentEncoder::new(Modality::Image, dims(), 9).unwrap();
        let (out, _) = enc.forward(&random_batch(5, 8, 1)).unwrap();
        for i in 0..5 {
            let n: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12, "row {i} norm {n}");
        }
    }

    #[test]
    fn doubling_a_weight_changes_outputs() {
        let mut enc = StudentEncoder::new(Modality::Image, dims(), 9).unwrap();
        let raw = random_batch(3, 8, 2);
        let (before, _) = enc.forward(&raw).unwrap();
        enc.visit_tensors_mut(|i, t| {
            if i == 0 {
                for v in t.iter_mut() {
                    *v *= 2.0;
                }
            }
        });
        let (after, _) = enc.forward(&raw).unwrap();
        assert_ne!(before.values(), after.values());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = StudentEncoder::new(Modality::Image, dims(), 21).unwrap();
        let raw = random_batch(4, 8, 7);
        // Scalar objective: weighted sum of normalized outputs.
        let weights: Vec<f64> = (0..4 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let params = enc.flat_params();
        let f = |p: &[f64]| {
            let mut e = enc.clone();
            e.set_flat_params(p).unwrap();
            let (out, _) = e.forward(&raw).unwrap();
            out.values().iter().zip(weights.iter()).map(|(v, w)| v * w).sum()
        };
        let (out, cache) = enc.forward(&raw).unwrap();
        let grad_out = FeatureBatch::new(4, 4, weights.clone()).unwrap();
        let grads = enc.backward(&cache, &grad_out).unwrap();
        let mut analytic = Vec::new();
        for t in &grads.tensors {
            analytic.extend_from_slice(t);
        }
        let report = gradient_check(f, &params, 1e-5, &analytic).unwrap();
        assert!(
            report.max_relative_error <= 1e-6,
            "encoder backward rel err {}",
            report.max_relative_error
        );
        drop(out);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut enc = StudentEncoder::new(Modality::Image, dims(), 4).unwrap();
        let raw = random_batch(2, 8, 3);
        let (_, cache) = enc.forward(&raw).unwrap();
        enc.visit_tensors_mut(|_, _| {});
        let g = FeatureBatch::zeros(2, 4);
        assert!(matches!(
            enc.backward(&cache, &g),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adapter_enabled_rule_follows_dims() {
        assert!(Adapter::new(Modality::Image, 6, 4, 0).unwrap().enabled());
        assert!(!Adapter::new(Modality::Image, 4, 4, 0).unwrap().enabled());
    }

    #[test]
    fn disabled_adapter_passes_through_on_equal_dims() {
        let a = Adapter::new(Modality::Text, 5, 5, 2).unwrap();
        let x = random_batch(3, 5, 8);
        let y = a.forward(&x).unwrap();
        assert_eq!(x.values(), y.values());
        assert!(a.backward(&x, &y).unwrap().is_none());
    }

    #[test]
    fn disabled_adapter_with_mismatched_dims_is_a_contract_error() {
        let a = Adapter::with_enabled(Modality::Text, 5, 3, 2, false).unwrap();
        let x = random_batch(2, 5, 8);
        assert!(matches!(a.forward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn adapter_backward_matches_finite_differences() {
        let adapter = Adapter::new(Modality::Image, 6, 4, 13).unwrap();
        let x = random_batch(3, 6, 17);
        let weights: Vec<f64> = (0..3 * 4).map(|i| ((i % 5) as f64 - 2.0) / 2.0).collect();
        let params = adapter.flat_params();
        let f = |p: &[f64]| {
            let mut a = adapter.clone();
            a.set_flat_params(p).unwrap();
            let out = a.forward(&x).unwrap();
            out.values().iter().zip(weights.iter()).map(|(v, w)| v * w).sum()
        };
        let grad_out = FeatureBatch::new(3, 4, weights.clone()).unwrap();
        let g = adapter.backward(&x, &grad_out).unwrap().unwrap();
        let mut analytic = g.weight.clone();
        analytic.extend_from_slice(&g.bias);
        let report = gradient_check(f, &params, 1e-5, &analytic).unwrap();
        assert!(report.max_relative_error <= 1e-6, "rel err {}", report.max_relative_error);
    }

    #[test]
    fn teacher_is_deterministic_and_bounded() {
        let t1 = TeacherModel::new(Modality::Image, 8, 6, 42).unwrap();
        let t2 = TeacherModel::new(Modality::Image, 8, 6, 42).unwrap();
        let raw = random_batch(4, 8, 19);
        let a = t1.forward(&raw).unwrap();
        let b = t2.forward(&raw).unwrap();
        assert_eq!(a.values(), b.values(), "same seed must reproduce bit-identically");
        assert!(a.values().iter().all(|v| v.abs() <= 1.0), "tanh output must stay in [-1, 1]");
        let t3 = TeacherModel::new(Modality::Image, 8, 6, 43).unwrap();
        assert_ne!(a.values(), t3.forward(&raw).unwrap().values());
    }
}
