//! Two-layer GELU MLP student with hidden-layer dropout.
//!
//! `logits = W2ᵀ · drop(gelu(W1ᵀ x + b1)) + b2`, with inverted dropout
//! scaling so that evaluation mode (no mask) needs no rescale. Gradients
//! are hand-derived reverse mode, including the gradient with respect to
//! the input embedding which the perturbation generator needs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{softmax_unchecked, DenseMatrix, ProbVector, PROB_FLOOR};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    /// `d_in × d_h`
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    /// `d_h × C`
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    pub dropout_rate: f64,
}

impl StudentParams {
    pub fn zeros(d_in: usize, d_h: usize, classes: usize, dropout_rate: f64) -> Result<Self> {
        Self::check_dims(d_in, d_h, classes, dropout_rate)?;
        Ok(Self {
            w1: DenseMatrix::zeros(d_in, d_h),
            b1: vec![0.0; d_h],
            w2: DenseMatrix::zeros(d_h, classes),
            b2: vec![0.0; classes],
            dropout_rate,
        })
    }

    /// Gaussian fan-in initialisation, zero biases.
    pub fn init(
        d_in: usize,
        d_h: usize,
        classes: usize,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(d_in, d_h, classes, dropout_rate)?;
        let n1 = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (1.0 / d_h as f64).sqrt()).expect("valid std");
        p.w1.data_mut().iter_mut().for_each(|w| *w = n1.sample(rng));
        p.w2.data_mut().iter_mut().for_each(|w| *w = n2.sample(rng));
        Ok(p)
    }

    fn check_dims(d_in: usize, d_h: usize, classes: usize, dropout_rate: f64) -> Result<()> {
        if d_in == 0 || d_h == 0 {
            return Err(Error::invalid("student dimensions must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid("student needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_dims(self.d_in(), self.d_hidden(), self.classes(), self.dropout_rate)?;
        if self.w2.rows() != self.d_hidden()
            || self.b1.len() != self.d_hidden()
            || self.b2.len() != self.classes()
        {
            return Err(Error::invalid("inconsistent student parameter shapes"));
        }
        let finite = self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite student parameter"));
        }
        Ok(())
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    #[inline]
    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for dst in [
            self.w1.data_mut(),
            &mut self.b1[..],
            self.w2.data_mut(),
            &mut self.b2[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        [self.w1.data(), &self.b1[..], self.w2.data(), &self.b2[..]].into_iter()
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1[..],
            self.w2.data_mut(),
            &mut self.b2[..],
        ]
    }
}

/// Gradient buffers shaped like [`StudentParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentGrads {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl StudentGrads {
    pub fn zeros_like(p: &StudentParams) -> Self {
        Self {
            w1: DenseMatrix::zeros(p.d_in(), p.d_hidden()),
            b1: vec![0.0; p.d_hidden()],
            w2: DenseMatrix::zeros(p.d_hidden(), p.classes()),
            b2: vec![0.0; p.classes()],
        }
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1[..], self.w2.data(), &self.b2[..]]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1[..],
            self.w2.data_mut(),
            &mut self.b2[..],
        ]
    }

    fn same_shape(&self, p: &StudentParams) -> bool {
        self.w1.rows() == p.d_in()
            && self.w1.cols() == p.d_hidden()
            && self.w2.rows() == p.d_hidden()
            && self.w2.cols() == p.classes()
            && self.b1.len() == p.d_hidden()
            && self.b2.len() == p.classes()
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &StudentGrads) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn dot(&self, other: &StudentGrads) -> f64 {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .map(|(a, b)| crate::numerics::dot(a, b))
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn norm_inf(&self) -> f64 {
        self.tensors()
            .into_iter()
            .map(crate::numerics::norm_inf)
            .fold(0.0, f64::max)
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Hidden-unit keep pattern, reproducible from its seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub seed: u64,
    pub keep: Vec<bool>,
}

impl DropoutMask {
    pub fn from_seed(seed: u64, d_h: usize, rate: f64) -> Self {
        let mut r = rng::seeded(seed);
        let keep = (0..d_h).map(|_| r.random::<f64>() >= rate).collect();
        Self { seed, keep }
    }

    /// Draws a fresh mask seed from `rng`.
    pub fn sample(rng: &mut impl RngCore, d_h: usize, rate: f64) -> Self {
        Self::from_seed(rng.next_u64(), d_h, rate)
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    /// Per-unit dropout multiplier: 0, 1/(1 − rate), or 1 in eval mode.
    scale: Vec<f64>,
}

fn check_input(params: &StudentParams, x: &[f64]) -> Result<()> {
    if x.len() != params.d_in() {
        return Err(Error::invalid(format!(
            "input length {} does not match d_in {}",
            x.len(),
            params.d_in()
        )));
    }
    Ok(())
}

/// Forward pass; `mask = None` is deterministic evaluation mode.
pub fn forward(
    params: &StudentParams,
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_input(params, x)?;
    let d_h = params.d_hidden();
    let scale: Vec<f64> = match mask {
        None => vec![1.0; d_h],
        Some(m) => {
            if m.keep.len() != d_h {
                return Err(Error::invalid(format!(
                    "mask length {} does not match hidden width {d_h}",
                    m.keep.len()
                )));
            }
            let s = 1.0 / (1.0 - params.dropout_rate);
            m.keep.iter().map(|&k| if k { s } else { 0.0 }).collect()
        }
    };
    let pre = params.w1.affine(x, &params.b1);
    let hidden: Vec<f64> = pre
        .iter()
        .zip(&scale)
        .map(|(&z, &s)| if s == 0.0 { 0.0 } else { gelu(z) * s })
        .collect();
    let logits = params.w2.affine(&hidden, &params.b2);
    Ok((
        logits,
        ForwardCache {
            x: x.to_vec(),
            pre,
            hidden,
            scale,
        },
    ))
}

/// Eval-mode class distribution.
pub fn predict(params: &StudentParams, x: &[f64]) -> Result<ProbVector> {
    let (logits, _) = forward(params, x, None)?;
    ProbVector::new(softmax_unchecked(&logits))
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits`; returns `∂L/∂x`.
pub fn backward(
    params: &StudentParams,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut StudentGrads,
) -> Vec<f64> {
    grads.w2.add_outer(1.0, &cache.hidden, dlogits);
    grads
        .b2
        .iter_mut()
        .zip(dlogits)
        .for_each(|(g, d)| *g += d);
    let dhidden = params.w2.mul_vec(dlogits);
    let dpre: Vec<f64> = dhidden
        .iter()
        .zip(&cache.scale)
        .zip(&cache.pre)
        .map(|((&dh, &s), &z)| if s == 0.0 { 0.0 } else { dh * s * gelu_grad(z) })
        .collect();
    grads.w1.add_outer(1.0, &cache.x, &dpre);
    grads.b1.iter_mut().zip(&dpre).for_each(|(g, d)| *g += d);
    params.w1.mul_vec(&dpre)
}

/// `K` dropout-sampled predictive distributions, one fresh mask per pass.
pub fn mc_forward(
    params: &StudentParams,
    x: &[f64],
    k: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<ProbVector>> {
    Ok(mc_forward_with_masks(params, x, k, rng)?.0)
}

/// Like [`mc_forward`], also returning the masks that were drawn.
pub fn mc_forward_with_masks(
    params: &StudentParams,
    x: &[f64],
    k: usize,
    rng: &mut impl RngCore,
) -> Result<(Vec<ProbVector>, Vec<DropoutMask>)> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let masks: Vec<DropoutMask> = (0..k)
        .map(|_| DropoutMask::sample(rng, params.d_hidden(), params.dropout_rate))
        .collect();
    let probs = masks
        .iter()
        .map(|m| {
            let (logits, _) = forward(params, x, Some(m))?;
            ProbVector::new(softmax_unchecked(&logits))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((probs, masks))
}

/// Per-sample training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy against a hard label.
    Label(usize),
    /// Shannon entropy of the predicted distribution.
    Entropy,
}

impl Objective {
    /// Loss value and `∂loss/∂logits` for probabilities `p`.
    pub fn loss_and_dlogits(self, p: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Objective::Label(y) => {
                let loss = -p[y].max(PROB_FLOOR).ln();
                let mut d = p.to_vec();
                d[y] -= 1.0;
                (loss, d)
            }
            Objective::Entropy => {
                let h = crate::numerics::entropy_unchecked(p);
                let d = p
                    .iter()
                    .map(|&q| if q > 0.0 { -q * (q.ln() + h) } else { 0.0 })
                    .collect();
                (h, d)
            }
        }
    }
}

/// One weighted term of a student loss.
#[derive(Clone, Copy, Debug)]
pub struct Term<'a> {
    pub x: &'a [f64],
    pub objective: Objective,
    pub weight: f64,
    pub mask: Option<&'a DropoutMask>,
}

/// `Σ weight_i · loss_i` and its parameter gradient.
pub fn weighted_loss_and_grads(
    params: &StudentParams,
    terms: &[Term<'_>],
) -> Result<(f64, StudentGrads)> {
    let mut grads = StudentGrads::zeros_like(params);
    let mut total = 0.0;
    for t in terms {
        if let Objective::Label(y) = t.objective {
            if y >= params.classes() {
                return Err(Error::invalid(format!(
                    "label {y} out of range {}",
                    params.classes()
                )));
            }
        }
        if t.weight == 0.0 {
            continue;
        }
        let (logits, cache) = forward(params, t.x, t.mask)?;
        let p = softmax_unchecked(&logits);
        let (loss, mut d) = t.objective.loss_and_dlogits(&p);
        total += t.weight * loss;
        d.iter_mut().for_each(|v| *v *= t.weight);
        backward(params, &cache, &d, &mut grads);
    }
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    HardLabel,
    Entropy,
}

/// Batch-mean loss and gradients; `masks`, when given, pairs one mask with
/// each example. For [`LossKind::Entropy`] the targets are ignored.
pub fn loss_and_grads(
    params: &StudentParams,
    batch: &[(&[f64], usize)],
    kind: LossKind,
    masks: Option<&[DropoutMask]>,
) -> Result<(f64, StudentGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(Error::invalid("one mask per example required"));
        }
    }
    let w = 1.0 / batch.len() as f64;
    let terms: Vec<Term<'_>> = batch
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Term {
            x,
            objective: match kind {
                LossKind::HardLabel => Objective::Label(y),
                LossKind::Entropy => Objective::Entropy,
            },
            weight: w,
            mask: masks.map(|m| &m[i]),
        })
        .collect();
    weighted_loss_and_grads(params, &terms)
}

/// Loss at `x` and its gradient with respect to `x`.
pub fn input_gradient(
    params: &StudentParams,
    x: &[f64],
    mask: Option<&DropoutMask>,
    objective: Objective,
) -> Result<(f64, Vec<f64>)> {
    let (logits, cache) = forward(params, x, mask)?;
    let p = softmax_unchecked(&logits);
    let (loss, d) = objective.loss_and_dlogits(&p);
    let mut scratch = StudentGrads::zeros_like(params);
    Ok((loss, backward(params, &cache, &d, &mut scratch)))
}

/// SGD-with-momentum state under a cosine learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: StudentGrads,
    pub momentum: f64,
    pub base_lr: f64,
    pub step: usize,
    pub total_steps: usize,
    /// Optional projection radius for ‖θ‖₂ after every update.
    pub norm_bound: Option<f64>,
}

impl OptimizerState {
    pub fn new(
        params: &StudentParams,
        base_lr: f64,
        momentum: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            velocity: StudentGrads::zeros_like(params),
            momentum,
            base_lr,
            step: 0,
            total_steps,
            norm_bound: None,
        })
    }

    /// `base_lr · ½(1 + cos(π · step / total_steps))`, clamped at the end.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (PI * t).cos())
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.step)
    }
}

/// `v ← βv + g; θ ← θ − lr(step)·v; step += 1`, then the optional norm
/// projection.
pub fn sgd_step(
    params: &mut StudentParams,
    grads: &StudentGrads,
    opt: &mut OptimizerState,
) -> Result<()> {
    if !grads.same_shape(params) || !opt.velocity.same_shape(params) {
        return Err(Error::invalid("gradient shape does not match parameters"));
    }
    let lr = opt.lr();
    let momentum = opt.momentum;
    for (v, g) in opt.velocity.tensors_mut().into_iter().zip(grads.tensors()) {
        v.iter_mut().zip(g).for_each(|(v, g)| *v = momentum * *v + g);
    }
    for (p, v) in params.tensors_mut().into_iter().zip(opt.velocity.tensors()) {
        p.iter_mut().zip(v).for_each(|(p, v)| *p -= lr * v);
    }
    opt.step += 1;
    if let Some(bound) = opt.norm_bound {
        let norm = params.l2_norm();
        if norm > bound {
            let s = bound / norm;
            for t in params.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn random_params(seed: u64, d_in: usize, d_h: usize, c: usize, rate: f64) -> StudentParams {
        let mut r = rng::seeded(seed);
        let mut p = StudentParams::init(d_in, d_h, c, rate, &mut r).unwrap();
        p.b1.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        p.b2.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        p
    }

    fn random_vec(r: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn zero_net_is_uniform() {
        let p = StudentParams::zeros(3, 4, 3, 0.1).unwrap();
        let (logits, _) = forward(&p, &[1.0, -2.0, 0.5], None).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        let q = predict(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert!(q.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_rate_mask_matches_eval_mode() {
        let p = random_params(1, 3, 5, 3, 0.0);
        let x = [0.3, -0.2, 0.9];
        let mask = DropoutMask::from_seed(99, 5, 0.0);
        assert!(mask.keep.iter().all(|&k| k));
        let (a, _) = forward(&p, &x, Some(&mask)).unwrap();
        let (b, _) = forward(&p, &x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_mask_forward_is_repeatable() {
        let p = random_params(2, 3, 8, 3, 0.5);
        let x = [0.3, -0.2, 0.9];
        let m1 = DropoutMask::from_seed(17, 8, 0.5);
        let m2 = DropoutMask::from_seed(17, 8, 0.5);
        assert_eq!(m1, m2);
        assert_eq!(
            forward(&p, &x, Some(&m1)).unwrap().0,
            forward(&p, &x, Some(&m2)).unwrap().0
        );
    }

    #[test]
    fn shape_errors() {
        let p = StudentParams::zeros(3, 4, 3, 0.1).unwrap();
        assert!(forward(&p, &[1.0], None).is_err());
        let bad = DropoutMask::from_seed(0, 7, 0.1);
        assert!(forward(&p, &[1.0; 3], Some(&bad)).is_err());
        assert!(StudentParams::zeros(3, 4, 1, 0.1).is_err());
        assert!(StudentParams::zeros(3, 4, 2, 1.0).is_err());
    }

    #[test]
    fn mc_forward_contract() {
        let p = random_params(3, 3, 6, 3, 0.0);
        let x = [0.1, 0.2, 0.3];
        let mut r = rng::seeded(5);
        let s = mc_forward(&p, &x, 5, &mut r).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] == w[1]));
        assert!(mc_forward(&p, &x, 0, &mut r).is_err());

        let p = random_params(3, 3, 6, 3, 0.3);
        let a = mc_forward(&p, &x, 5, &mut rng::seeded(11)).unwrap();
        let b = mc_forward(&p, &x, 5, &mut rng::seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ce_gradient_of_b2_at_zero_net() {
        let p = StudentParams::zeros(3, 4, 3, 0.0).unwrap();
        let x = [1.0, 2.0, 3.0];
        let (loss, g) = loss_and_grads(&p, &[(&x, 2)], LossKind::HardLabel, None).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert!((g.b2[2] - (1.0 / 3.0 - 1.0)).abs() < 1e-15);
        assert!((g.b2[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_gradient_vanishes_at_vertex() {
        let mut p = StudentParams::zeros(3, 4, 3, 0.0).unwrap();
        p.b2 = vec![60.0, 0.0, 0.0];
        let x = [0.3, 0.1, -0.4];
        let (_, g) = loss_and_grads(&p, &[(&x, 0)], LossKind::Entropy, None).unwrap();
        assert!(g.norm_l2() < 1e-8);
    }

    #[test]
    fn empty_batch_rejected() {
        let p = StudentParams::zeros(3, 4, 3, 0.0).unwrap();
        assert!(loss_and_grads(&p, &[], LossKind::HardLabel, None).is_err());
    }

    fn check_param_grads(kind: LossKind, seed: u64) {
        let mut r = rng::seeded(seed);
        let p = random_params(seed, 3, 4, 3, 0.25);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 3)).collect();
        let ys: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        let masks: Vec<DropoutMask> = (0..4).map(|i| DropoutMask::from_seed(i, 4, 0.25)).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
        let (_, g) = loss_and_grads(&p, &batch, kind, Some(&masks)).unwrap();
        let theta = p.flatten();
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.set_flat(t).unwrap();
                loss_and_grads(&q, &batch, kind, Some(&masks)).unwrap().0
            },
            &theta,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.flatten().iter().zip(&fd) {
            let tol = 1e-5 * a.abs().max(b.abs()) + 1e-8;
            assert!((a - b).abs() <= tol, "{kind:?}: analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        for seed in 0..10 {
            check_param_grads(LossKind::HardLabel, seed);
            check_param_grads(LossKind::Entropy, seed + 100);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = random_params(8, 3, 5, 3, 0.0);
        let x = [0.4, -0.7, 1.1];
        let (_, g) = input_gradient(&p, &x, None, Objective::Entropy).unwrap();
        let fd = finite_diff_grad(
            |x| input_gradient(&p, x, None, Objective::Entropy).unwrap().0,
            &x,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-8);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let p = StudentParams::zeros(2, 2, 2, 0.0).unwrap();
        let opt = OptimizerState::new(&p, 0.03, 0.9, 100).unwrap();
        assert_eq!(opt.lr_at(0), 0.03);
        assert!(opt.lr_at(100).abs() < 1e-18);
        assert!((opt.lr_at(50) - 0.015).abs() < 1e-15);
        assert!(OptimizerState::new(&p, 0.0, 0.9, 1).is_err());
        assert!(OptimizerState::new(&p, 0.1, 1.0, 1).is_err());
    }

    #[test]
    fn sgd_step_zero_grad_keeps_params() {
        let mut p = random_params(4, 3, 4, 3, 0.1);
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 0.03, 0.0, 10).unwrap();
        let g = StudentGrads::zeros_like(&p);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn sgd_step_momentum_and_projection() {
        let mut p = StudentParams::zeros(1, 1, 2, 0.0).unwrap();
        let mut opt = OptimizerState::new(&p, 0.5, 0.5, 0).unwrap();
        let mut g = StudentGrads::zeros_like(&p);
        g.b2 = vec![1.0, -1.0];
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert_eq!(p.b2, vec![-0.5, 0.5]);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        // v = 0.5·1 + 1 = 1.5
        assert_eq!(p.b2, vec![-1.25, 1.25]);

        opt.norm_bound = Some(1.0);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert!((p.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_unbiased() {
        let p = random_params(6, 2, 3, 2, 0.3);
        let x = [0.8, -0.4];
        let (_, eval) = forward(&p, &x, None).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 3];
        let mut sumsq = [0.0; 3];
        let mut r = rng::seeded(21);
        for _ in 0..n {
            let m = DropoutMask::sample(&mut r, 3, 0.3);
            let (_, c) = forward(&p, &x, Some(&m)).unwrap();
            for j in 0..3 {
                sum[j] += c.hidden[j];
                sumsq[j] += c.hidden[j] * c.hidden[j];
            }
        }
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let var = sumsq[j] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - eval.hidden[j]).abs() <= 3.0 * se + 1e-12);
        }
    }
}
