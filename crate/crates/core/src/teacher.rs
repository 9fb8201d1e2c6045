//! Meta-learned teacher strategy `(τ_MI, λ_u, λ_adv)`.
//!
//! The raw vector `z` passes through a sigmoid; the two loss weights are
//! then rescaled onto `λ_u + λ_adv ≤ 1` when they overshoot. The teacher is
//! trained by differentiating a validation loss through one virtual SGD
//! step of the students. Only the explicit dependence of the virtual step
//! on the strategy is kept; pseudo-labels, MI values, perturbations and
//! dropout masks are held fixed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numerics::{logit, sigmoid};
use crate::student::{weighted_loss_and_grads, DropoutMask, Objective, StudentGrads, StudentParams, Term};
use crate::uncertainty::FilterDirection;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyTriple {
    pub tau_mi: f64,
    pub lambda_u: f64,
    pub lambda_adv: f64,
}

impl StrategyTriple {
    pub const fn new(tau_mi: f64, lambda_u: f64, lambda_adv: f64) -> Self {
        Self {
            tau_mi,
            lambda_u,
            lambda_adv,
        }
    }

    /// Box and simplex constraints, with `slack` absolute tolerance.
    pub fn is_feasible(&self, slack: f64) -> bool {
        let unit = |v: f64| (-slack..=1.0 + slack).contains(&v);
        unit(self.tau_mi)
            && unit(self.lambda_u)
            && unit(self.lambda_adv)
            && self.lambda_u + self.lambda_adv <= 1.0 + slack
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_feasible(0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "strategy {self:?} violates τ, λ ∈ [0, 1] and λ_u + λ_adv ≤ 1"
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.tau_mi, self.lambda_u, self.lambda_adv]
    }
}

/// Sigmoid map with post-sigmoid simplex rescaling of the loss weights.
pub fn map_strategy(z: &[f64; 3]) -> StrategyTriple {
    let s = z.map(sigmoid);
    let sum = s[1] + s[2];
    let (mut lambda_u, lambda_adv) = if sum <= 1.0 {
        (s[1], s[2])
    } else {
        (s[1] / sum, s[2] / sum)
    };
    // rounding can leave the rescaled pair one ulp above the simplex
    while lambda_u + lambda_adv > 1.0 {
        lambda_u = lambda_u.next_down();
    }
    StrategyTriple::new(s[0], lambda_u, lambda_adv)
}

/// `J[i][j] = ∂triple_i / ∂z_j`.
pub fn map_jacobian(z: &[f64; 3]) -> [[f64; 3]; 3] {
    let s = z.map(sigmoid);
    let ds = s.map(|v| v * (1.0 - v));
    let mut j = [[0.0; 3]; 3];
    j[0][0] = ds[0];
    let sum = s[1] + s[2];
    if sum <= 1.0 {
        j[1][1] = ds[1];
        j[2][2] = ds[2];
    } else {
        let sq = sum * sum;
        j[1][1] = s[2] / sq * ds[1];
        j[1][2] = -s[1] / sq * ds[2];
        j[2][1] = -s[2] / sq * ds[1];
        j[2][2] = s[1] / sq * ds[2];
    }
    j
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStrategy {
    pub z: [f64; 3],
    pub lr_teacher: f64,
    pub gate_temperature: f64,
}

impl TeacherStrategy {
    /// Strategy whose mapped triple equals `init`; every component must lie
    /// strictly inside `(0, 1)`.
    pub fn from_triple(init: StrategyTriple, lr_teacher: f64, gate_temperature: f64) -> Result<Self> {
        init.validate()?;
        let arr = init.as_array();
        if arr.iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::invalid(format!(
                "learned teacher init {arr:?} must lie strictly inside (0, 1)"
            )));
        }
        if !(gate_temperature > 0.0) {
            return Err(Error::invalid("gate temperature must be positive"));
        }
        Ok(Self {
            z: arr.map(logit),
            lr_teacher,
            gate_temperature,
        })
    }

    pub fn mapped(&self) -> StrategyTriple {
        map_strategy(&self.z)
    }
}

/// Differentiable acceptance weight `σ((mi − τ)/T)`.
#[inline]
pub fn soft_gate(mi: f64, tau_mi: f64, temperature: f64) -> f64 {
    sigmoid((mi - tau_mi) / temperature)
}

/// Soft gate for either filter direction, with `∂gate/∂τ`.
#[inline]
pub fn directed_gate(direction: FilterDirection, mi: f64, tau: f64, temperature: f64) -> (f64, f64) {
    let g = sigmoid(direction.margin(mi, tau) / temperature);
    let dmargin_dtau = match direction {
        FilterDirection::Above => -1.0,
        FilterDirection::Below => 1.0,
    };
    (g, g * (1.0 - g) * dmargin_dtau / temperature)
}

/// A cross-view pseudo-labeled input of one student.
#[derive(Clone, Copy, Debug)]
pub struct PseudoTerm<'a> {
    pub x: &'a [f64],
    pub label: usize,
    /// MI of the view that produced the label.
    pub source_mi: f64,
    pub mask: Option<&'a DropoutMask>,
}

/// A perturbed input `x + δ` of one student.
#[derive(Clone, Copy, Debug)]
pub struct AdvTerm<'a> {
    pub x: &'a [f64],
    pub mask: Option<&'a DropoutMask>,
}

/// Everything one student contributes to the meta-gradient.
#[derive(Clone, Debug, Default)]
pub struct VirtualBatch<'a> {
    pub unsup: Vec<PseudoTerm<'a>>,
    pub adv: Vec<AdvTerm<'a>>,
    /// Normaliser of the unlabeled losses (the unlabeled batch size).
    pub n_unlabeled: usize,
    pub validation: Vec<(&'a [f64], usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaGradient {
    /// `∂L_val/∂z`
    pub grad_z: [f64; 3],
    /// `∂L_val/∂(τ, λ_u, λ_adv)`
    pub grad_triple: [f64; 3],
    /// Validation loss after the virtual step.
    pub val_loss: f64,
}

fn validation_terms<'a>(val: &[(&'a [f64], usize)]) -> Vec<Term<'a>> {
    let w = 1.0 / val.len() as f64;
    val.iter()
        .map(|&(x, y)| Term {
            x,
            objective: Objective::Label(y),
            weight: w,
            mask: None,
        })
        .collect()
}

fn check_batches(students: &[StudentParams], batches: &[VirtualBatch<'_>]) -> Result<()> {
    if students.len() != batches.len() {
        return Err(Error::invalid("one virtual batch per student required"));
    }
    if batches.iter().any(|b| b.validation.is_empty()) {
        return Err(Error::invalid("empty validation batch"));
    }
    Ok(())
}

/// Gradient of `Σ_students L_val(θ′)` with respect to `z`, where
/// `θ′ = θ − η ∇_θ[λ_u L_unsup^soft + λ_adv L_adv]`.
///
/// Real student parameters are never touched.
pub fn meta_grad(
    strategy: &TeacherStrategy,
    direction: FilterDirection,
    students: &[StudentParams],
    batches: &[VirtualBatch<'_>],
    eta_student: f64,
) -> Result<MetaGradient> {
    check_batches(students, batches)?;
    let t = strategy.mapped();
    let temp = strategy.gate_temperature;
    let mut grad_triple = [0.0; 3];
    let mut val_loss = 0.0;
    for (params, batch) in students.iter().zip(batches) {
        let n = batch.n_unlabeled.max(1) as f64;
        let mut gated = Vec::with_capacity(batch.unsup.len());
        let mut gated_dtau = Vec::with_capacity(batch.unsup.len());
        for u in &batch.unsup {
            let (g, dg) = directed_gate(direction, u.source_mi, t.tau_mi, temp);
            let term = Term {
                x: u.x,
                objective: Objective::Label(u.label),
                weight: g / n,
                mask: u.mask,
            };
            gated.push(term);
            gated_dtau.push(Term { weight: dg / n, ..term });
        }
        let adv: Vec<Term<'_>> = batch
            .adv
            .iter()
            .map(|a| Term {
                x: a.x,
                objective: Objective::Entropy,
                weight: 1.0 / n,
                mask: a.mask,
            })
            .collect();
        let (_, g_unsup) = weighted_loss_and_grads(params, &gated)?;
        let (_, g_tau) = weighted_loss_and_grads(params, &gated_dtau)?;
        let (_, g_adv) = weighted_loss_and_grads(params, &adv)?;

        let mut step = StudentGrads::zeros_like(params);
        step.add_scaled(t.lambda_u, &g_unsup);
        step.add_scaled(t.lambda_adv, &g_adv);
        let mut virt = params.clone();
        let mut flat = virt.flatten();
        flat.iter_mut()
            .zip(step.flatten())
            .for_each(|(p, s)| *p -= eta_student * s);
        virt.set_flat(&flat)?;

        let (loss, v) = weighted_loss_and_grads(&virt, &validation_terms(&batch.validation))?;
        val_loss += loss;
        // ∂θ′/∂τ = −η λ_u G_τ, ∂θ′/∂λ_u = −η G_u, ∂θ′/∂λ_adv = −η G_adv
        grad_triple[0] += -eta_student * t.lambda_u * v.dot(&g_tau);
        grad_triple[1] += -eta_student * v.dot(&g_unsup);
        grad_triple[2] += -eta_student * v.dot(&g_adv);
    }
    let j = map_jacobian(&strategy.z);
    let mut grad_z = [0.0; 3];
    for (k, gz) in grad_z.iter_mut().enumerate() {
        *gz = (0..3).map(|i| grad_triple[i] * j[i][k]).sum();
    }
    Ok(MetaGradient {
        grad_z,
        grad_triple,
        val_loss,
    })
}

/// `z ← z − η_T · g`.
pub fn teacher_step(strategy: &TeacherStrategy, grad_z: &[f64; 3]) -> Result<TeacherStrategy> {
    if grad_z.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("non-finite meta-gradient"));
    }
    let mut next = strategy.clone();
    for (z, g) in next.z.iter_mut().zip(grad_z) {
        *z -= strategy.lr_teacher * g;
    }
    Ok(next)
}

/// Ring buffer of the last `window` mapped strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyHistory {
    window: usize,
    entries: VecDeque<StrategyTriple>,
}

impl StrategyHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            entries: VecDeque::with_capacity(window.max(1)),
        }
    }

    pub fn push(&mut self, t: StrategyTriple) {
        if self.entries.len() == self.window {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn iter(&self) -> impl Iterator<Item = &StrategyTriple> {
        self.entries.iter()
    }
}

/// Sum of the windowed population variances of τ, λ_u and λ_adv.
pub fn stability_score(history: &StrategyHistory) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            have: history.len(),
        });
    }
    let var = |f: fn(&StrategyTriple) -> f64| {
        let xs: Vec<f64> = history.iter().map(f).collect();
        crate::numerics::mean_var(&xs).1
    };
    Ok(var(|t| t.tau_mi) + var(|t| t.lambda_u) + var(|t| t.lambda_adv))
}

/// True iff the last `patience` scores are all below `eps_stop`.
pub fn should_stop(scores: &[f64], eps_stop: f64, patience: usize) -> bool {
    let patience = patience.max(1);
    scores.len() >= patience && scores[scores.len() - patience..].iter().all(|&s| s < eps_stop)
}
