//! Finite-difference suites for every analytic gradient in the crate.
//!
//! Each suite draws random toy instances from a fixed seed, compares the
//! analytic gradient with central differences and reports the worst
//! relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::generator::objective_gradient;
use crate::numerics::{finite_diff_grad, norm_inf, sigmoid};
use crate::rng::{self, Rng};
use crate::student::{input_gradient, weighted_loss_and_grads, DropoutMask, Objective, StudentParams, Term};
use crate::teacher::{meta_grad, AdvTerm, PseudoTerm, TeacherStrategy, VirtualBatch};
use crate::uncertainty::FilterDirection;
use crate::Result;

pub const STUDENT_TOL: f64 = 1e-5;
pub const GENERATOR_TOL: f64 = 1e-5;
pub const TEACHER_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm_inf(&diff) / norm_inf(analytic).max(norm_inf(numeric)).max(1e-8)
}

fn report(name: &str, errs: &[f64], tolerance: f64) -> SuiteReport {
    let max_rel_err = errs.iter().cloned().fold(0.0, f64::max);
    SuiteReport {
        name: name.to_string(),
        instances: errs.len(),
        max_rel_err,
        tolerance,
        passed: max_rel_err <= tolerance && errs.iter().all(|e| e.is_finite()),
    }
}

fn toy_student(r: &mut Rng) -> Result<StudentParams> {
    let d_in = r.random_range(2..6);
    let d_h = r.random_range(2..7);
    let c = r.random_range(2..5);
    let rate = [0.0, 0.1, 0.3][r.random_range(0..3)];
    let mut p = StudentParams::init(d_in, d_h, c, rate, r)?;
    p.b1.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
    p.b2.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
    Ok(p)
}

fn toy_x(r: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-1.5..1.5)).collect()
}

fn toy_mask(r: &mut Rng, p: &StudentParams) -> Option<DropoutMask> {
    r.random_bool(0.5)
        .then(|| DropoutMask::from_seed(r.random(), p.d_hidden(), p.dropout_rate))
}

/// Parameter gradients of weighted cross-entropy and entropy losses.
pub fn student_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut errs = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut r = rng::substream(seed, &[1, i as u64]);
        let p = toy_student(&mut r)?;
        let n = r.random_range(1..4);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| toy_x(&mut r, p.d_in())).collect();
        let masks: Vec<Option<DropoutMask>> = (0..n).map(|_| toy_mask(&mut r, &p)).collect();
        let objectives: Vec<Objective> = (0..n)
            .map(|_| {
                if r.random_bool(0.5) {
                    Objective::Label(r.random_range(0..p.classes()))
                } else {
                    Objective::Entropy
                }
            })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        let terms: Vec<Term<'_>> = (0..n)
            .map(|k| Term {
                x: &xs[k],
                objective: objectives[k],
                weight: weights[k],
                mask: masks[k].as_ref(),
            })
            .collect();
        let (_, g) = weighted_loss_and_grads(&p, &terms)?;
        let mut probe = p.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.set_flat(theta).expect("same shape");
                weighted_loss_and_grads(&probe, &terms).map_or(f64::NAN, |(l, _)| l)
            },
            &p.flatten(),
            1e-6,
        )?;
        errs.push(rel_err(&g.flatten(), &numeric));
    }
    Ok(report("student", &errs, STUDENT_TOL))
}

/// Input gradients of the generator objective, with and without the MI term.
pub fn generator_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut errs = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut r = rng::substream(seed, &[2, i as u64]);
        let p = toy_student(&mut r)?;
        let x = toy_x(&mut r, p.d_in());
        let delta: Vec<f64> = (0..p.d_in()).map(|_| r.random_range(-0.3..0.3)).collect();
        let (gamma, masks) = if i % 2 == 0 {
            (0.0, Vec::new())
        } else {
            let k = r.random_range(2..5);
            let masks: Vec<DropoutMask> = (0..k)
                .map(|_| DropoutMask::from_seed(r.random(), p.d_hidden(), p.dropout_rate.max(0.2)))
                .collect();
            (r.random_range(0.1..2.0), masks)
        };
        let (_, g) = objective_gradient(&p, &x, &delta, gamma, &masks)?;
        let numeric = finite_diff_grad(
            |d| objective_gradient(&p, &x, d, gamma, &masks).map_or(f64::NAN, |(v, _)| v),
            &delta,
            1e-6,
        )?;
        errs.push(rel_err(&g, &numeric));
    }
    Ok(report("generator", &errs, GENERATOR_TOL))
}

/// Random `z` away from the kink of the simplex rescaling.
fn toy_z(r: &mut Rng) -> [f64; 3] {
    loop {
        let z = [r.random_range(-3.0..1.0), r.random_range(-2.5..2.5), r.random_range(-2.5..2.5)];
        if (sigmoid(z[1]) + sigmoid(z[2]) - 1.0).abs() > 1e-2 {
            return z;
        }
    }
}

/// Meta-gradient `∂L_val/∂z` through one virtual student step.
pub fn teacher_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut errs = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut r = rng::substream(seed, &[3, i as u64]);
        let classes = r.random_range(2..4);
        let d_h = r.random_range(2..6);
        let dims = [r.random_range(2..5), r.random_range(2..5)];
        let students: Vec<StudentParams> = dims
            .iter()
            .map(|&d| StudentParams::init(d, d_h, classes, 0.2, &mut r))
            .collect::<Result<_>>()?;
        let n_u = r.random_range(2..5);
        let n_v = r.random_range(1..4);
        let direction = if r.random_bool(0.5) { FilterDirection::Above } else { FilterDirection::Below };
        let data: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> = dims
            .iter()
            .map(|&d| {
                (
                    (0..n_u).map(|_| toy_x(&mut r, d)).collect(),
                    (0..n_u).map(|_| toy_x(&mut r, d)).collect(),
                    (0..n_v).map(|_| toy_x(&mut r, d)).collect(),
                )
            })
            .collect();
        let masks: Vec<Vec<DropoutMask>> = (0..2)
            .map(|_| (0..2 * n_u).map(|_| DropoutMask::from_seed(r.random(), d_h, 0.2)).collect())
            .collect();
        let labels: Vec<Vec<usize>> = (0..2).map(|_| (0..n_u).map(|_| r.random_range(0..classes)).collect()).collect();
        let mis: Vec<Vec<f64>> = (0..2).map(|_| (0..n_u).map(|_| r.random_range(0.0..0.3)).collect()).collect();
        let val_labels: Vec<usize> = (0..n_v).map(|_| r.random_range(0..classes)).collect();
        let batches: Vec<VirtualBatch<'_>> = (0..2)
            .map(|s| VirtualBatch {
                unsup: (0..n_u)
                    .map(|j| PseudoTerm {
                        x: &data[s].0[j],
                        label: labels[s][j],
                        source_mi: mis[s][j],
                        mask: Some(&masks[s][j]),
                    })
                    .collect(),
                adv: (0..n_u)
                    .map(|j| AdvTerm {
                        x: &data[s].1[j],
                        mask: Some(&masks[s][n_u + j]),
                    })
                    .collect(),
                n_unlabeled: n_u,
                validation: (0..n_v).map(|j| (&data[s].2[j][..], val_labels[j])).collect(),
            })
            .collect();
        let strategy = TeacherStrategy {
            z: toy_z(&mut r),
            lr_teacher: 0.01,
            gate_temperature: r.random_range(0.05..0.5),
        };
        let eta = r.random_range(0.05..0.5);
        let g = meta_grad(&strategy, direction, &students, &batches, eta)?;
        let numeric = finite_diff_grad(
            |z| {
                let s = TeacherStrategy {
                    z: [z[0], z[1], z[2]],
                    ..strategy.clone()
                };
                meta_grad(&s, direction, &students, &batches, eta).map_or(f64::NAN, |m| m.val_loss)
            },
            &strategy.z,
            1e-5,
        )?;
        errs.push(rel_err(&g.grad_z, &numeric));
    }
    Ok(report("teacher", &errs, TEACHER_TOL))
}

/// Input gradient of the label loss used by the robust-accuracy attack.
pub fn attack_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut errs = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut r = rng::substream(seed, &[4, i as u64]);
        let p = toy_student(&mut r)?;
        let x = toy_x(&mut r, p.d_in());
        let y = r.random_range(0..p.classes());
        let (_, g) = input_gradient(&p, &x, None, Objective::Label(y))?;
        let numeric = finite_diff_grad(
            |xx| input_gradient(&p, xx, None, Objective::Label(y)).map_or(f64::NAN, |(l, _)| l),
            &x,
            1e-6,
        )?;
        errs.push(rel_err(&g, &numeric));
    }
    Ok(report("attack", &errs, STUDENT_TOL))
}

pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        student_suite(instances, seed)?,
        generator_suite(instances, seed)?,
        teacher_suite(instances, seed)?,
        attack_suite(instances, seed)?,
    ])
}
