//! AdamW with readable first-moment state, and the linear warm-up schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("AdamW betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("AdamW eps must be > 0 and weight decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates this parameter has received (drives bias correction).
    pub steps: u64,
}

/// Decoupled-weight-decay Adam.
///
/// Per update with gradient `g` and learning rate `lr`:
///
/// ```text
/// θ ← θ − lr·λ·θ
/// m ← β1·m + (1 − β1)·g
/// v ← β2·v + (1 − β2)·g²
/// θ ← θ − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    state: IndexMap<String, Moments<T>>,
}

pub type AdamWState<T> = AdamW<T>;

impl<T: Scalar> AdamW<T> {
    /// Registers zeroed moments for every parameter in `params`.
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let mut opt = Self {
            config,
            step: 0,
            state: IndexMap::new(),
        };
        for (name, t) in params.iter() {
            opt.register(name, t.numel());
        }
        opt
    }

    pub fn register(&mut self, name: &str, len: usize) {
        self.state.insert(
            name.to_string(),
            Moments {
                m: vec![T::zero(); len],
                v: vec![T::zero(); len],
                steps: 0,
            },
        );
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of completed `step` calls.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copy of the raw (not bias-corrected) first moment as it stands now,
    /// i.e. before the gradient of the step about to run is folded in.
    pub fn first_moment(&self, name: &str) -> Result<Vec<T>> {
        self.moments(name).map(|s| s.m.clone())
    }

    pub fn moments(&self, name: &str) -> Result<&Moments<T>> {
        self.state
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>, lr: T) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            let s = self.moments(name)?;
            if g.len() != p.numel() || s.m.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at element {i}")));
            }
        }
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let eps = T::of(self.config.eps);
        let decay = T::one() - lr * T::of(self.config.weight_decay);
        let one = T::one();
        for (name, g) in grads {
            let s = self.state.get_mut(name).expect("validated above");
            s.steps += 1;
            let t = s.steps as i32;
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            let p = params.get_mut(name)?.data_mut();
            for i in 0..g.len() {
                s.m[i] = b1 * s.m[i] + (one - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (one - b2) * g[i] * g[i];
                let m_hat = s.m[i] / c1;
                let v_hat = s.v[i] / c2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Linear warm-up from `base_lr/W` to `base_lr` over the first
/// `W = ⌈warmup_fraction · total_steps⌉` steps, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub base_lr: f64,
}

impl WarmupSchedule {
    pub fn new(total_steps: usize, warmup_fraction: f64, base_lr: f64) -> Result<Self> {
        if total_steps == 0 || !(0.0..1.0).contains(&warmup_fraction) || !(base_lr > 0.0) {
            return Err(Error::Config(format!(
                "schedule needs total_steps ≥ 1, warmup in [0,1), lr > 0; got {total_steps}, {warmup_fraction}, {base_lr}"
            )));
        }
        Ok(Self {
            total_steps,
            warmup_fraction,
            base_lr,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        // the small offset absorbs products such as 0.05·60 = 3.0000000000000004
        (self.warmup_fraction * self.total_steps as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        let w = self.warmup_steps();
        Ok(if step < w {
            self.base_lr * ((step + 1) as f64 / w as f64)
        } else {
            self.base_lr
        })
    }
}
