//! Gradient-guided weight perturbation.
//!
//! For every targeted parameter tensor θ with optimizer first moment m, the
//! perturbation is
//!
//! ```text
//! r = δ · (‖θ‖₂ / ‖m‖₂) · m        (adaptive magnitude)
//! r = ρ · m                        (fixed magnitude)
//! ```
//!
//! and the perturbed weights are `θ' = θ + clip(r, −ε·|θ|, +ε·|θ|)`
//! elementwise. Losses and gradients are evaluated at θ', the weights are
//! restored to θ, and the optimizer applies those gradients to θ.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::scalar::Scalar;

/// Norms below this are treated as zero and yield no perturbation.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Chooses which named parameters are perturbed: a name matches when it
/// starts with any of the prefixes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelector {
    prefixes: Vec<String>,
}

impl TargetSelector {
    pub fn prefixes(prefixes: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    /// All visual-encoder parameters.
    pub fn visual_encoder() -> Self {
        Self::prefixes(["visual."])
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Comma-separated form used in config files.
    pub fn to_spec(&self) -> String {
        self.prefixes.join(",")
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let prefixes: Vec<String> = spec
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                // bare module names select the whole sub-model
                "visual" | "text" | "fusion" | "decoder" => format!("{s}."),
                _ => s.to_string(),
            })
            .collect();
        if prefixes.is_empty() {
            return Err(Error::Config("ggp.target selects nothing".into()));
        }
        Ok(Self { prefixes })
    }
}

impl Default for TargetSelector {
    fn default() -> Self {
        Self::visual_encoder()
    }
}

/// Training phase, for phase-gated perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Perturbation coefficient δ. Zero disables the effect while keeping
    /// the perturbed code path.
    pub delta: f64,
    /// Clipping margin ε, relative to |θ|.
    pub epsilon: f64,
    pub adaptive_magnitude: bool,
    /// Ratio ρ used in place of δ·‖θ‖/‖m‖ when `adaptive_magnitude` is off.
    pub fixed_ratio: f64,
    pub target: TargetSelector,
    pub enabled_pretrain: bool,
    pub enabled_finetune: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            epsilon: 0.001,
            adaptive_magnitude: true,
            fixed_ratio: 0.05,
            target: TargetSelector::default(),
            enabled_pretrain: false,
            enabled_finetune: false,
        }
    }
}

impl PerturbationConfig {
    pub fn enabled_for(&self, phase: Phase) -> bool {
        match phase {
            Phase::Pretrain => self.enabled_pretrain,
            Phase::Finetune => self.enabled_finetune,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("ggp.delta must be ≥ 0, got {}", self.delta)));
        }
        if !(self.epsilon > 0.0) || !(self.fixed_ratio > 0.0) {
            return Err(Error::Config("ggp.epsilon and ggp.fixed_ratio must be > 0".into()));
        }
        Ok(())
    }

    /// Targeted parameter names, in store order. Errors if a phase is enabled
    /// but nothing matches.
    pub fn targets<T: Scalar>(&self, params: &ParamStore<T>) -> Result<Vec<String>> {
        let names: Vec<String> = params
            .names()
            .filter(|n| self.target.matches(n))
            .map(str::to_string)
            .collect();
        if names.is_empty() && (self.enabled_pretrain || self.enabled_finetune) {
            return Err(Error::Config(format!(
                "ggp.target `{}` matches no parameter",
                self.target.to_spec()
            )));
        }
        Ok(names)
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn shapes_match(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

/// Perturbation direction and magnitude for one parameter tensor, before clipping.
pub fn compute_perturbation<T: Scalar>(theta: &[T], moment: &[T], cfg: &PerturbationConfig) -> Result<Vec<T>> {
    shapes_match("compute_perturbation", theta.len(), moment.len())?;
    let m_norm = norm(moment);
    let tiny = T::of(DEGENERATE_NORM);
    let scale = if cfg.adaptive_magnitude {
        let t_norm = norm(theta);
        if m_norm < tiny || t_norm < tiny {
            return Ok(vec![T::zero(); theta.len()]);
        }
        T::of(cfg.delta) * t_norm / m_norm
    } else {
        if m_norm < tiny {
            return Ok(vec![T::zero(); theta.len()]);
        }
        T::of(cfg.fixed_ratio)
    };
    Ok(moment.iter().map(|&m| scale * m).collect())
}

/// `θ + clip(r, −ε·|θ|, +ε·|θ|)` elementwise.
pub fn clip_and_apply<T: Scalar>(snapshot: &[T], r: &[T], epsilon: T) -> Result<Vec<T>> {
    shapes_match("clip_and_apply", snapshot.len(), r.len())?;
    Ok(snapshot
        .iter()
        .zip(r)
        .map(|(&theta, &ri)| {
            let bound = epsilon * theta.abs();
            let mut out = theta + ri.max(-bound).min(bound);
            // the rounded sum can overshoot the margin by half an ulp
            while (out - theta).abs() > bound {
                out = out.step_toward(theta);
            }
            out
        })
        .collect())
}

/// Deep copy of selected parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot<T> {
    values: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> ParameterSnapshot<T> {
    pub fn take(params: &ParamStore<T>, names: &[String]) -> Result<Self> {
        let values = names
            .iter()
            .map(|n| Ok((n.clone(), params.get(n)?.data().to_vec())))
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn restore(&self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, v) in &self.values {
            params.get_mut(name)?.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}

/// Per-parameter perturbation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPerturbation {
    pub name: String,
    pub pre_clip_norm: f64,
    pub clip_fraction: f64,
    /// cos(r, m) before clipping; 0 when either is zero.
    pub cosine: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub params: Vec<ParamPerturbation>,
}

impl PerturbationReport {
    pub fn mean_pre_clip_norm(&self) -> f64 {
        if self.params.is_empty() {
            return 0.0;
        }
        self.params.iter().map(|p| p.pre_clip_norm).sum::<f64>() / self.params.len() as f64
    }

    pub fn mean_clip_fraction(&self) -> f64 {
        if self.params.is_empty() {
            return 0.0;
        }
        self.params.iter().map(|p| p.clip_fraction).sum::<f64>() / self.params.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return 0.0;
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    (dot / (na * nb)).as_f64().clamp(-1.0, 1.0)
}

/// Result of one training step.
#[derive(Clone, Debug)]
pub struct StepOutcome<T, A> {
    pub loss: T,
    /// Whatever the loss function returned alongside the loss.
    pub aux: A,
    pub report: PerturbationReport,
}

/// Loss evaluation: returns the scalar loss, its gradients by parameter name,
/// and auxiliary data passed through to the caller.
pub type LossEval<T, A> = (T, GradMap<T>, A);

/// One training step with optional gradient-guided perturbation.
///
/// When the config is enabled for `phase`: snapshot the targeted parameters,
/// read their first moments, write `θ + clip(r)` in place, evaluate loss and
/// gradients, restore the snapshot, then apply the gradients with AdamW.
/// Otherwise this is a plain evaluate-then-step.
pub fn perturbed_training_step<T: Scalar, A>(
    params: &mut ParamStore<T>,
    optimizer: &mut AdamW<T>,
    cfg: &PerturbationConfig,
    phase: Phase,
    lr: T,
    loss_fn: impl FnOnce(&ParamStore<T>) -> Result<LossEval<T, A>>,
) -> Result<StepOutcome<T, A>> {
    let mut report = PerturbationReport::default();
    let snapshot = if cfg.enabled_for(phase) {
        let targets = cfg.targets(params)?;
        let snapshot = ParameterSnapshot::take(params, &targets)?;
        let eps = T::of(cfg.epsilon);
        for name in &targets {
            let theta = snapshot.get(name).expect("snapshot holds every target");
            let moment = optimizer.first_moment(name)?;
            let r = compute_perturbation(theta, &moment, cfg)?;
            let perturbed = clip_and_apply(theta, &r, eps)?;
            let clipped = theta
                .iter()
                .zip(&r)
                .filter(|(&t, &ri)| ri.abs() > eps * t.abs())
                .count();
            report.params.push(ParamPerturbation {
                name: name.clone(),
                pre_clip_norm: norm(&r).as_f64(),
                clip_fraction: clipped as f64 / theta.len() as f64,
                cosine: cosine(&r, &moment),
            });
            params.get_mut(name)?.data_mut().copy_from_slice(&perturbed);
        }
        Some(snapshot)
    } else {
        None
    };

    let evaluated = loss_fn(params);
    if let Some(s) = &snapshot {
        s.restore(params)?;
    }
    let (loss, grads, aux) = match evaluated {
        Ok(v) if v.0.is_finite() => v,
        Ok(_) | Err(Error::NonFinite(_)) if snapshot.is_some() => {
            let norms = report
                .params
                .iter()
                .map(|p| (p.name.clone(), p.pre_clip_norm))
                .collect();
            return Err(Error::PerturbedLossNonFinite { norms });
        }
        Ok(_) => return Err(Error::NonFinite("loss".into())),
        Err(e) => return Err(e),
    };
    optimizer.step(params, &grads, lr)?;
    Ok(StepOutcome { loss, aux, report })
}
