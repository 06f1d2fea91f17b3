//! AdamW with decoupled weight decay and the warmup/cosine learning-rate
//! schedule.
//!
//! The optimizer keeps one first/second moment pair per registered tensor
//! slot and a single shared step count. A training step is `begin_step`
//! followed by `update_slot` for every tensor updated in that step; slots
//! left out of a run (a disabled adapter) simply never initialize.

use crate::error::{Error, Result};

/// Learning rate at `step` for linear warmup followed by cosine decay.
///
/// During warmup the rate ramps as `base_lr * (step + 1) / warmup_steps`;
/// afterwards it follows `base_lr * 0.5 * (1 + cos(pi * progress))` where
/// progress runs over the post-warmup steps. `step` must be below
/// `total_steps`.
pub fn cosine_warmup_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if warmup_steps > total_steps {
        return Err(Error::Parameter(format!(
            "warmup ({warmup_steps}) exceeds total steps ({total_steps})"
        )));
    }
    if step >= total_steps {
        return Err(Error::Parameter(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    if !(base_lr.is_finite() && base_lr > 0.0) {
        return Err(Error::Parameter(format!(
            "base learning rate must be positive, got {base_lr}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Schedule value derived from epoch-level settings.
///
/// The warmup span is `total_steps * warmup_epochs / epochs` in integer
/// arithmetic, exact whenever every epoch has the same number of steps.
pub fn lr_at(
    epochs: usize,
    warmup_epochs: usize,
    global_step: usize,
    total_steps: usize,
    base_lr: f64,
) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::Parameter("epochs must be at least one".into()));
    }
    if warmup_epochs > epochs {
        return Err(Error::Parameter(format!(
            "warmup epochs ({warmup_epochs}) exceed total epochs ({epochs})"
        )));
    }
    let warmup_steps = total_steps * warmup_epochs / epochs;
    cosine_warmup_lr(global_step, total_steps, warmup_steps, base_lr)
}

struct SlotState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW optimizer state over numbered tensor slots.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    slots: Vec<Option<SlotState>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Result<Self> {
        Self::with_hyperparams(0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn with_hyperparams(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        for (name, v) in [("beta1", beta1), ("beta2", beta2)] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(Error::Parameter(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            slots: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// Advances the shared step count. Call once per optimizer step, before
    /// any slot update belonging to that step.
    pub fn begin_step(&mut self) -> u64 {
        self.step_count += 1;
        self.step_count
    }

    /// Applies one decoupled-decay AdamW update to a tensor slot.
    ///
    /// Decay multiplies parameters by `1 - lr * weight_decay` before the
    /// moment-based update. Slot state is created on first use and its length
    /// is pinned from then on.
    pub fn update_slot(
        &mut self,
        slot: usize,
        lr: f64,
        params: &mut [f64],
        grads: &[f64],
    ) -> Result<()> {
        if self.step_count == 0 {
            return Err(Error::Contract(
                "update_slot called before begin_step".into(),
            ));
        }
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "parameter/gradient length mismatch: {} vs {}",
                params.len(),
                grads.len()
            )));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, || None);
        }
        let state = self.slots[slot].get_or_insert_with(|| SlotState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        });
        if state.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "slot {slot} was registered with {} parameters, got {}",
                state.m.len(),
                params.len()
            )));
        }
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite gradient {g} in slot {slot}"
                )));
            }
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
