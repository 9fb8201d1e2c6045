//! Entropy-guided L∞ perturbations in embedding space.
//!
//! The generator has no parameters of its own: for each embedding it runs
//! projected ascent on `H(f(x + δ)) + γ·MI(f(x + δ))` inside the box
//! `‖δ‖∞ ≤ ε`. One step with `step_size = ε` under the sign rule is FGSM.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::numerics::{entropy_unchecked, norm_inf, softmax_unchecked};
use crate::student::{self, backward, forward, DropoutMask, Objective, StudentGrads, StudentParams};
use crate::uncertainty::mutual_information;
use crate::{Error, Result};

/// How an ascent step uses the objective gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentRule {
    /// `δ + η·sign(∇)`, the steepest L∞ step.
    #[default]
    Sign,
    /// `δ + η·∇`.
    Gradient,
}

impl std::str::FromStr for AscentRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(Self::Sign),
            "gradient" => Ok(Self::Gradient),
            other => Err(Error::invalid(format!("unknown ascent rule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// L∞ budget.
    pub epsilon: f64,
    /// Weight of the MI term.
    pub gamma: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Dropout passes for the MI term when `gamma > 0`.
    pub mi_passes: usize,
    pub rule: AscentRule,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self::fgsm(1.0)
    }
}

impl PerturbConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            gamma: 0.0,
            steps: 1,
            step_size: epsilon,
            mi_passes: 5,
            rule: AscentRule::Sign,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64, rule: AscentRule) -> Self {
        Self {
            epsilon,
            gamma: 0.0,
            steps,
            step_size,
            mi_passes: 5,
            rule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("perturbation needs at least one step"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.gamma > 0.0 && self.mi_passes == 0 {
            return Err(Error::invalid("MI term needs at least one dropout pass"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub objective_value: f64,
    pub fixed_point_residual: f64,
    /// Set when the gradient at `δ = 0` was identically zero.
    pub flat: bool,
}

/// Coordinatewise clamp onto `[-ε, ε]`.
pub fn project_linf(delta: &[f64], epsilon: f64) -> Vec<f64> {
    delta.iter().map(|d| d.clamp(-epsilon, epsilon)).collect()
}

fn shifted(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter().zip(delta).map(|(a, b)| a + b).collect()
}

/// Eval-mode entropy at `x + δ` and its gradient in `δ`.
pub fn entropy_gradient(params: &StudentParams, x: &[f64], delta: &[f64]) -> Result<(f64, Vec<f64>)> {
    student::input_gradient(params, &shifted(x, delta), None, Objective::Entropy)
}

/// Objective value and `δ`-gradient with the MI term's masks held fixed.
///
/// The MI part is the unclamped `H(p̄) − mean_k H(p_k)` over the given masks.
pub fn objective_gradient(
    params: &StudentParams,
    x: &[f64],
    delta: &[f64],
    gamma: f64,
    masks: &[DropoutMask],
) -> Result<(f64, Vec<f64>)> {
    let xp = shifted(x, delta);
    let (h, mut grad) = student::input_gradient(params, &xp, None, Objective::Entropy)?;
    if gamma == 0.0 || masks.is_empty() {
        return Ok((h, grad));
    }
    let k = masks.len() as f64;
    let mut passes = Vec::with_capacity(masks.len());
    for m in masks {
        let (logits, cache) = forward(params, &xp, Some(m))?;
        passes.push((softmax_unchecked(&logits), cache));
    }
    let c = params.classes();
    let mut mean = vec![0.0; c];
    for (p, _) in &passes {
        mean.iter_mut().zip(p).for_each(|(m, q)| *m += q / k);
    }
    let log_mean: Vec<f64> = mean.iter().map(|&m| if m > 0.0 { m.ln() } else { 0.0 }).collect();
    let mut expected = 0.0;
    let mut scratch = StudentGrads::zeros_like(params);
    for (p, cache) in &passes {
        let hk = entropy_unchecked(p);
        expected += hk / k;
        let cross: f64 = p.iter().zip(&log_mean).map(|(q, l)| q * l).sum();
        let dlogits: Vec<f64> = p
            .iter()
            .zip(&log_mean)
            .map(|(&q, &lm)| {
                let own = if q > 0.0 { q.ln() + hk } else { 0.0 };
                gamma * q * ((cross - lm) + own) / k
            })
            .collect();
        let dx = backward(params, cache, &dlogits, &mut scratch);
        grad.iter_mut().zip(dx).for_each(|(g, d)| *g += d);
    }
    let mi = entropy_unchecked(&mean) - expected;
    Ok((h + gamma * mi, grad))
}

/// `H(f(x + δ))` in eval mode plus `γ · MI` over `mi_passes` fresh masks.
pub fn perturb_objective(
    params: &StudentParams,
    x: &[f64],
    delta: &[f64],
    cfg: &PerturbConfig,
    rng: &mut impl RngCore,
) -> Result<f64> {
    let xp = shifted(x, delta);
    let h = student::predict(params, &xp)?.entropy();
    if cfg.gamma == 0.0 {
        return Ok(h);
    }
    let samples = student::mc_forward(params, &xp, cfg.mi_passes, rng)?;
    Ok(h + cfg.gamma * mutual_information(&samples)?.mi)
}

/// `‖δ − P_ε(δ + η ∇_δ H(f(x + δ)))‖∞`, the stationarity gap of projected
/// entropy ascent.
pub fn fixed_point_residual(
    params: &StudentParams,
    x: &[f64],
    delta: &[f64],
    cfg: &PerturbConfig,
) -> Result<f64> {
    let (_, g) = entropy_gradient(params, x, delta)?;
    Ok(delta
        .iter()
        .zip(&g)
        .map(|(&d, &gi)| (d - (d + cfg.step_size * gi).clamp(-cfg.epsilon, cfg.epsilon)).abs())
        .fold(0.0, f64::max))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ascend(delta: &mut [f64], grad: &[f64], cfg: &PerturbConfig) {
    for (d, &g) in delta.iter_mut().zip(grad) {
        let step = match cfg.rule {
            AscentRule::Sign => sign(g),
            AscentRule::Gradient => g,
        };
        *d = (*d + cfg.step_size * step).clamp(-cfg.epsilon, cfg.epsilon);
    }
}

/// Projected ascent from `δ = 0`; MI masks, when needed, are redrawn from
/// `rng` at the start of every step.
pub fn pgd_perturb(
    params: &StudentParams,
    x: &[f64],
    cfg: &PerturbConfig,
    rng: &mut impl RngCore,
) -> Result<Perturbation> {
    pgd_perturb_traced(params, x, cfg, rng, |_, _| {})
}

/// [`pgd_perturb`] reporting `(iteration, objective before the step)`.
pub fn pgd_perturb_traced(
    params: &StudentParams,
    x: &[f64],
    cfg: &PerturbConfig,
    rng: &mut impl RngCore,
    mut trace: impl FnMut(usize, f64),
) -> Result<Perturbation> {
    cfg.validate()?;
    let mut delta = vec![0.0; x.len()];
    for step in 0..cfg.steps {
        let masks: Vec<DropoutMask> = if cfg.gamma > 0.0 {
            (0..cfg.mi_passes)
                .map(|_| DropoutMask::sample(rng, params.d_hidden(), params.dropout_rate))
                .collect()
        } else {
            Vec::new()
        };
        let (value, grad) = objective_gradient(params, x, &delta, cfg.gamma, &masks)?;
        trace(step, value);
        if step == 0 && grad.iter().all(|&g| g == 0.0) {
            return Ok(Perturbation {
                delta,
                objective_value: value,
                fixed_point_residual: 0.0,
                flat: true,
            });
        }
        ascend(&mut delta, &grad, cfg);
    }
    let objective_value = perturb_objective(params, x, &delta, cfg, rng)?;
    let fixed_point_residual = fixed_point_residual(params, x, &delta, cfg)?;
    debug_assert!(norm_inf(&delta) <= cfg.epsilon);
    Ok(Perturbation {
        delta,
        objective_value,
        fixed_point_residual,
        flat: false,
    })
}

/// Label-loss PGD used for robust accuracy: `steps` sign-ascent steps on
/// `−ln p_y(x + δ)` from `δ = 0`, returning the final `δ`.
pub fn label_attack(
    params: &StudentParams,
    x: &[f64],
    label: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Result<Vec<f64>> {
    let cfg = PerturbConfig::pgd(epsilon, steps.max(1), step_size, AscentRule::Sign);
    cfg.validate()?;
    let mut delta = vec![0.0; x.len()];
    for _ in 0..steps {
        let (_, g) = student::input_gradient(params, &shifted(x, &delta), None, Objective::Label(label))?;
        ascend(&mut delta, &g, &cfg);
    }
    Ok(delta)
}
