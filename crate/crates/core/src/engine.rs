//! The co-training loop: pseudo-labeling, loss assembly, student and
//! teacher updates, convergence monitoring, evaluation and cost counters.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchIter, BatchPlan, Split, TwoViewDataset};
use crate::generator::{self, label_attack, PerturbConfig};
use crate::numerics::{argmax, entropy_unchecked, mean_sd, norm_inf, softmax_unchecked};
use crate::rng::{self, derive_seed};
use crate::student::{
    self, forward, sgd_step, weighted_loss_and_grads, DropoutMask, Objective, OptimizerState,
    StudentGrads, StudentParams, Term,
};
use crate::teacher::{
    self, meta_grad, should_stop, stability_score, AdvTerm, MetaGradient, PseudoTerm,
    StrategyHistory, StrategyTriple, TeacherStrategy, VirtualBatch,
};
use crate::uncertainty::{
    confidence_filter, impurity, mi_filter, mutual_information, FilterDirection, FilterResult,
    UncertaintyEstimate,
};
use crate::{Error, Result};

const TAG_INIT: u64 = 0x11;
const TAG_MC: u64 = 0x21;
const TAG_GEN: u64 = 0x31;
const TAG_SUP: u64 = 0x41;
const TAG_UNSUP: u64 = 0x42;
const TAG_ADV: u64 = 0x43;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    /// `z` follows meta-gradients.
    #[default]
    Learned,
    /// The init triple is used unchanged (zeros allowed).
    Fixed,
}

/// Which rule selects the pseudo-labels that enter the unlabeled loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoFilter {
    #[default]
    Mi,
    Confidence,
    /// Accept everything.
    Off,
}

/// Whether the teacher's virtual step starts from the students before or
/// after their real update in the same iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaTiming {
    #[default]
    PreStep,
    PostStep,
}

/// Random streams per view. `Shared` gives both students the same init and
/// dropout streams, which makes identical views train identically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    #[default]
    Independent,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub init: StrategyTriple,
    pub lr: f64,
    pub gate_temperature: f64,
    /// Teacher update period in steps.
    pub update_every: usize,
    pub timing: MetaTiming,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Learned,
            init: StrategyTriple::new(0.05, 0.5, 0.5),
            lr: 0.01,
            gate_temperature: 0.01,
            update_every: 1,
            timing: MetaTiming::PreStep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub eps_stop: f64,
    pub patience: usize,
    /// Sliding window in epochs.
    pub window: usize,
    pub delta_h: Option<f64>,
    pub delta_a: Option<f64>,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            eps_stop: 1e-4,
            patience: 5,
            window: 10,
            delta_h: None,
            delta_a: None,
        }
    }
}

/// Label-targeted PGD used for robust accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustEvalConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 4` when `None`.
    pub step_size: Option<f64>,
}

impl Default for RobustEvalConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            steps: 10,
            step_size: None,
        }
    }
}

impl RobustEvalConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per epoch; 0 means one pass over the unlabeled rows.
    pub steps_per_epoch: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub labeled_batch: usize,
    pub mu: usize,
    pub validation_batch: usize,
    pub class_balanced: bool,
    /// Projection radius for ‖θ‖₂ of each student after every update.
    pub norm_bound: Option<f64>,
    /// Dropout passes per unlabeled sample.
    pub mc_passes: usize,
    pub filter: PseudoFilter,
    pub direction: FilterDirection,
    pub confidence_threshold: f64,
    pub perturb: PerturbConfig,
    pub generator_enabled: bool,
    pub teacher: TeacherConfig,
    pub early_stop: EarlyStopConfig,
    pub robust: RobustEvalConfig,
    pub streams: StreamMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 0,
            hidden: 32,
            dropout: 0.1,
            lr: 0.03,
            momentum: 0.9,
            labeled_batch: 64,
            mu: 7,
            validation_batch: 64,
            class_balanced: false,
            norm_bound: None,
            mc_passes: 5,
            filter: PseudoFilter::Mi,
            direction: FilterDirection::Above,
            confidence_threshold: 0.95,
            perturb: PerturbConfig::default(),
            generator_enabled: true,
            teacher: TeacherConfig::default(),
            early_stop: EarlyStopConfig::default(),
            robust: RobustEvalConfig::default(),
            streams: StreamMode::Independent,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The `λ_u = λ_adv = 0` baseline with everything else unchanged.
    pub fn supervised_only(&self) -> Self {
        let mut c = self.clone();
        c.teacher.mode = TeacherMode::Fixed;
        c.teacher.init = StrategyTriple::new(c.teacher.init.tau_mi, 0.0, 0.0);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.hidden", self.hidden),
            ("data.labeled_batch", self.labeled_batch),
            ("data.mu", self.mu),
            ("data.validation_batch", self.validation_batch),
            ("teacher.update_every", self.teacher.update_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model.dropout must lie in [0, 1)"));
        }
        if self.filter == PseudoFilter::Mi && self.mc_passes < 2 {
            return Err(Error::invalid("MI filtering needs at least 2 dropout passes"));
        }
        if self.mc_passes == 0 {
            return Err(Error::invalid("uncertainty.k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid("filter.confidence_threshold must lie in [0, 1]"));
        }
        self.perturb.validate()?;
        self.teacher.init.validate()?;
        if !(self.teacher.lr >= 0.0) {
            return Err(Error::invalid("teacher.eta_t must be non-negative"));
        }
        if self.teacher.mode == TeacherMode::Learned {
            TeacherStrategy::from_triple(self.teacher.init, self.teacher.lr, self.teacher.gate_temperature)?;
        }
        if !(self.robust.epsilon > 0.0) || !(self.robust.step() > 0.0) {
            return Err(Error::invalid("eval.epsilon and step size must be positive"));
        }
        if self.norm_bound.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("train.norm_bound must be positive"));
        }
        if self.early_stop.window < 2 {
            return Err(Error::invalid("early_stop.window must be at least 2"));
        }
        Ok(())
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            labeled_batch: self.labeled_batch,
            mu: self.mu,
            validation_batch: self.validation_batch,
            class_balanced: self.class_balanced,
            seed: derive_seed(self.seed, &[0xBA7C]),
        }
    }
}

/// Per-step operation counts in units of single-sample passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostCounters {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    /// Forward-backward passes of both students over `B_l + N_u`.
    pub student_passes: usize,
    /// Dropout forward passes per view, `K · N_u` when MI is computed.
    pub mi_forward: [usize; 2],
    /// Input-gradient passes per view, `k · N_u` when perturbing.
    pub perturb_grad: [usize; 2],
    /// Forward-backward validation passes, both students.
    pub validation_passes: usize,
}

/// Relative cost of a forward-backward pass against a forward pass.
pub const TRAIN_PASS_UNITS: f64 = 3.0;

impl CostCounters {
    /// Total work in forward-pass units.
    pub fn units(&self) -> f64 {
        TRAIN_PASS_UNITS * self.student_passes as f64
            + (self.mi_forward[0] + self.mi_forward[1]) as f64
            + TRAIN_PASS_UNITS * (self.perturb_grad[0] + self.perturb_grad[1]) as f64
            + TRAIN_PASS_UNITS * self.validation_passes as f64
    }

    /// Work of a supervised-only step on the same batch.
    pub fn supervised_units(&self) -> f64 {
        TRAIN_PASS_UNITS * self.student_passes as f64
    }

    pub fn ratio(&self) -> f64 {
        self.units() / self.supervised_units()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub sup: f64,
    pub unsup: f64,
    pub adv: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewStats {
    /// Pseudo-labels from this view accepted for the other student.
    pub accepted: usize,
    pub mask_rate: f64,
    pub impurity: Option<f64>,
    /// Set when nothing was accepted and the unlabeled loss was zero.
    pub empty: bool,
    pub mean_mi: f64,
    /// Largest `‖δ‖∞` produced by the generator on this view.
    pub max_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: Losses,
    /// Strategy used by this step's losses.
    pub strategy: StrategyTriple,
    pub views: [ViewStats; 2],
    pub cost: CostCounters,
    pub meta: Option<MetaGradient>,
    pub strategy_after: StrategyTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub pgd_robust_accuracy: f64,
    pub mean_entropy: f64,
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_adv: f64,
    pub tau_mi: f64,
    pub lambda_u: f64,
    pub lambda_adv: f64,
    pub accuracy: f64,
    pub mask_rate: f64,
    pub impurity: Option<f64>,
    /// Mean entropy of the ensemble on the unlabeled rows.
    pub mean_entropy: f64,
    /// Cross-view agreement on the unlabeled rows.
    pub agreement: f64,
    pub stability: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochsExhausted,
    TeacherStable,
    Converged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub tau_mi: f64,
    pub lambda_u: f64,
    pub lambda_adv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub mode: TeacherMode,
    pub strategy: Option<TeacherStrategy>,
    pub fixed: StrategyTriple,
}

impl TeacherState {
    pub fn triple(&self) -> StrategyTriple {
        match &self.strategy {
            Some(s) => s.mapped(),
            None => self.fixed,
        }
    }

    fn learned(&self) -> bool {
        self.strategy.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub trace: Vec<TraceRow>,
    pub stop_reason: StopReason,
    pub steps_run: usize,
    pub stability_scores: Vec<f64>,
    pub final_eval: EvalMetrics,
    pub students: [StudentParams; 2],
    pub teacher: TeacherState,
    pub step_reports: Vec<StepReport>,
}

/// Accepted slots and statistics of one view's filter.
#[derive(Clone, Debug, Default)]
struct Filtered {
    estimates: Vec<UncertaintyEstimate>,
    result: Option<FilterResult>,
}

/// Per-step intermediate state shared by the student losses and the
/// teacher's virtual step.
struct Prepared {
    filtered: [Filtered; 2],
    perturbed: [Vec<Vec<f64>>; 2],
    max_delta: [f64; 2],
    sup_masks: [Vec<Option<DropoutMask>>; 2],
    unsup_masks: [Vec<Option<DropoutMask>>; 2],
    adv_masks: [Vec<Option<DropoutMask>>; 2],
    cost: CostCounters,
}

/// Training state: two students, their optimisers and the teacher.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    students: [StudentParams; 2],
    optimizers: [OptimizerState; 2],
    teacher: TeacherState,
    step: usize,
}

fn stream(mode: StreamMode, view: usize) -> u64 {
    match mode {
        StreamMode::Independent => view as u64,
        StreamMode::Shared => 0,
    }
}

impl Trainer {
    /// Fresh students sized from `ds`; `total_steps` sets the cosine horizon.
    pub fn new(config: TrainConfig, ds: &TwoViewDataset, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let (d1, d2) = ds.dims();
        let init = |view: usize, d: usize| {
            StudentParams::init(
                d,
                config.hidden,
                ds.classes(),
                config.dropout,
                &mut rng::substream(config.seed, &[TAG_INIT, stream(config.streams, view)]),
            )
        };
        let students = [init(0, d1)?, init(1, d2)?];
        let opt = |p: &StudentParams| {
            OptimizerState::new(p, config.lr, config.momentum, total_steps).map(|mut o| {
                o.norm_bound = config.norm_bound;
                o
            })
        };
        let optimizers = [opt(&students[0])?, opt(&students[1])?];
        let t = &config.teacher;
        let teacher = TeacherState {
            mode: t.mode,
            strategy: match t.mode {
                TeacherMode::Learned => Some(TeacherStrategy::from_triple(t.init, t.lr, t.gate_temperature)?),
                TeacherMode::Fixed => None,
            },
            fixed: t.init,
        };
        Ok(Self {
            config,
            students,
            optimizers,
            teacher,
            step: 0,
        })
    }

    /// Trainer resuming from saved students and teacher with fresh
    /// optimiser state and a constant learning rate.
    pub fn from_state(
        config: TrainConfig,
        ds: &TwoViewDataset,
        students: [StudentParams; 2],
        teacher: TeacherState,
    ) -> Result<Self> {
        let mut t = Self::new(config, ds, 0)?;
        for (have, want) in t.students.iter().zip(&students) {
            if (have.d_in(), have.d_hidden(), have.classes()) != (want.d_in(), want.d_hidden(), want.classes()) {
                return Err(Error::invalid("saved students do not match the dataset and config"));
            }
        }
        t.students = students;
        t.teacher = teacher;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn students(&self) -> &[StudentParams; 2] {
        &self.students
    }

    pub fn teacher(&self) -> &TeacherState {
        &self.teacher
    }

    pub fn triple(&self) -> StrategyTriple {
        self.teacher.triple()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_teacher(&mut self, teacher: TeacherState) {
        self.teacher = teacher;
    }

    fn mask(&self, tag: u64, step: u64, view: usize, slot: usize) -> DropoutMask {
        let seed = derive_seed(
            self.config.seed,
            &[tag, step, stream(self.config.streams, view), slot as u64],
        );
        DropoutMask::from_seed(seed, self.config.hidden, self.config.dropout)
    }

    fn needs_unsup(&self, t: &StrategyTriple) -> bool {
        t.lambda_u > 0.0 || self.teacher.learned()
    }

    fn needs_adv(&self, t: &StrategyTriple) -> bool {
        self.config.generator_enabled && (t.lambda_adv > 0.0 || self.teacher.learned())
    }

    /// Uncertainty, filtering, perturbations and masks for one batch.
    /// With `train_mode = false` the loss terms run without dropout.
    fn prepare(&self, ds: &TwoViewDataset, batch: &Batch, step: u64, train_mode: bool) -> Result<Prepared> {
        let cfg = &self.config;
        let t = self.triple();
        let nu = batch.unlabeled.len();
        let nl = batch.labeled.len();
        let mut cost = CostCounters {
            labeled: nl,
            unlabeled: nu,
            validation: batch.validation.len(),
            student_passes: 2 * (nl + nu),
            ..CostCounters::default()
        };
        let mut filtered: [Filtered; 2] = Default::default();
        if self.needs_unsup(&t) {
            for v in 0..2 {
                let estimates = batch
                    .unlabeled
                    .iter()
                    .map(|&row| {
                        let mut r = rng::substream(
                            cfg.seed,
                            &[TAG_MC, step, stream(cfg.streams, v), row as u64],
                        );
                        mutual_information(&student::mc_forward(
                            &self.students[v],
                            ds.x(v, row),
                            cfg.mc_passes,
                            &mut r,
                        )?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let result = match cfg.filter {
                    PseudoFilter::Mi => mi_filter(&estimates, t.tau_mi, cfg.direction),
                    PseudoFilter::Confidence => confidence_filter(&estimates, cfg.confidence_threshold),
                    PseudoFilter::Off => FilterResult {
                        accepted: (0..nu).collect(),
                        mask_rate: 0.0,
                    },
                };
                cost.mi_forward[v] = cfg.mc_passes * nu;
                filtered[v] = Filtered {
                    estimates,
                    result: Some(result),
                };
            }
        }
        let mut perturbed: [Vec<Vec<f64>>; 2] = Default::default();
        let mut max_delta = [0.0; 2];
        if self.needs_adv(&t) {
            for v in 0..2 {
                for &row in &batch.unlabeled {
                    let x = ds.x(v, row);
                    let mut r = rng::substream(
                        cfg.seed,
                        &[TAG_GEN, step, stream(cfg.streams, v), row as u64],
                    );
                    let p = generator::pgd_perturb(&self.students[v], x, &cfg.perturb, &mut r)?;
                    max_delta[v] = f64::max(max_delta[v], norm_inf(&p.delta));
                    perturbed[v].push(x.iter().zip(&p.delta).map(|(a, b)| a + b).collect());
                }
                cost.perturb_grad[v] = cfg.perturb.steps * nu;
            }
        }
        if self.teacher.learned() {
            cost.validation_passes = 2 * batch.validation.len();
        }
        let masks = |tag: u64, v: usize, n: usize| -> Vec<Option<DropoutMask>> {
            (0..n)
                .map(|slot| train_mode.then(|| self.mask(tag, step, v, slot)))
                .collect()
        };
        let adv_masks = [
            masks(TAG_ADV, 0, perturbed[0].len()),
            masks(TAG_ADV, 1, perturbed[1].len()),
        ];
        Ok(Prepared {
            filtered,
            perturbed,
            max_delta,
            sup_masks: [masks(TAG_SUP, 0, nl), masks(TAG_SUP, 1, nl)],
            unsup_masks: [masks(TAG_UNSUP, 0, nu), masks(TAG_UNSUP, 1, nu)],
            adv_masks,
            cost,
        })
    }

    /// Unweighted `(L_sup, L_unsup, L_adv)` of student `s` with gradients.
    fn student_terms(
        &self,
        ds: &TwoViewDataset,
        batch: &Batch,
        prep: &Prepared,
        s: usize,
    ) -> Result<[(f64, StudentGrads); 3]> {
        let params = &self.students[s];
        let nl = batch.labeled.len() as f64;
        let nu = batch.unlabeled.len().max(1) as f64;
        let sup: Vec<Term<'_>> = batch
            .labeled
            .iter()
            .enumerate()
            .map(|(k, &row)| {
                let y = ds
                    .label(row)
                    .ok_or_else(|| Error::invalid(format!("row {row} in a labeled batch has no label")))?;
                Ok(Term {
                    x: ds.x(s, row),
                    objective: Objective::Label(y),
                    weight: 1.0 / nl,
                    mask: prep.sup_masks[s][k].as_ref(),
                })
            })
            .collect::<Result<_>>()?;
        let unsup: Vec<Term<'_>> = cross_pseudo_labels(&prep.filtered, s)
            .into_iter()
            .map(|(slot, label, _)| Term {
                x: ds.x(s, batch.unlabeled[slot]),
                objective: Objective::Label(label),
                weight: 1.0 / nu,
                mask: prep.unsup_masks[s][slot].as_ref(),
            })
            .collect();
        let adv: Vec<Term<'_>> = prep.perturbed[s]
            .iter()
            .enumerate()
            .map(|(slot, xp)| Term {
                x: xp,
                objective: Objective::Entropy,
                weight: 1.0 / nu,
                mask: prep.adv_masks[s][slot].as_ref(),
            })
            .collect();
        Ok([
            weighted_loss_and_grads(params, &sup)?,
            weighted_loss_and_grads(params, &unsup)?,
            weighted_loss_and_grads(params, &adv)?,
        ])
    }

    fn virtual_batches<'a>(
        &self,
        ds: &'a TwoViewDataset,
        batch: &Batch,
        prep: &'a Prepared,
    ) -> [VirtualBatch<'a>; 2] {
        let make = |s: usize| {
            let unsup = match &prep.filtered[1 - s].result {
                None => Vec::new(),
                Some(_) => prep.filtered[1 - s]
                    .estimates
                    .iter()
                    .enumerate()
                    .map(|(slot, e)| PseudoTerm {
                        x: ds.x(s, batch.unlabeled[slot]),
                        label: e.pseudo_label,
                        source_mi: e.mi,
                        mask: prep.unsup_masks[s][slot].as_ref(),
                    })
                    .collect(),
            };
            let adv = prep.perturbed[s]
                .iter()
                .enumerate()
                .map(|(slot, xp)| AdvTerm {
                    x: xp,
                    mask: prep.adv_masks[s][slot].as_ref(),
                })
                .collect();
            let validation = batch
                .validation
                .iter()
                .filter_map(|&row| ds.label(row).map(|y| (ds.x(s, row), y)))
                .collect();
            VirtualBatch {
                unsup,
                adv,
                n_unlabeled: batch.unlabeled.len(),
                validation,
            }
        };
        [make(0), make(1)]
    }

    /// One iteration: uncertainty, cross-view filtering, perturbation, loss
    /// assembly, one SGD step per student, then the teacher update.
    pub fn train_step(&mut self, ds: &TwoViewDataset, batch: &Batch) -> Result<StepReport> {
        let step = self.step as u64;
        let t = self.triple();
        let lr = self.optimizers[0].lr();
        let prep = self.prepare(ds, batch, step, true)?;
        let update_teacher = self.teacher.learned() && self.step.is_multiple_of(self.config.teacher.update_every);

        let mut losses = Losses::default();
        let mut grads = Vec::with_capacity(2);
        for s in 0..2 {
            let [(ls, gs), (lu, gu), (la, ga)] = self.student_terms(ds, batch, &prep, s)?;
            losses.sup += ls;
            losses.unsup += lu;
            losses.adv += la;
            let mut g = gs;
            g.add_scaled(t.lambda_u, &gu);
            g.add_scaled(t.lambda_adv, &ga);
            grads.push(g);
        }
        losses.total = losses.sup + t.lambda_u * losses.unsup + t.lambda_adv * losses.adv;

        let mut meta = None;
        if update_teacher && self.config.teacher.timing == MetaTiming::PreStep {
            meta = Some(self.meta_gradient(ds, batch, &prep, lr)?);
        }
        for (s, g) in grads.iter().enumerate() {
            sgd_step(&mut self.students[s], g, &mut self.optimizers[s])?;
        }
        if update_teacher && self.config.teacher.timing == MetaTiming::PostStep {
            meta = Some(self.meta_gradient(ds, batch, &prep, lr)?);
        }
        if let (Some(m), Some(strategy)) = (&meta, &self.teacher.strategy) {
            self.teacher.strategy = Some(teacher::teacher_step(strategy, &m.grad_z)?);
        }

        let true_labels: Vec<Option<usize>> = batch.unlabeled.iter().map(|&r| ds.true_label(r)).collect();
        let views = [0, 1].map(|v| view_stats(&prep, v, &true_labels));
        let report = StepReport {
            step: self.step,
            epoch: batch.epoch,
            lr,
            losses,
            strategy: t,
            views,
            cost: prep.cost,
            meta,
            strategy_after: self.triple(),
        };
        self.step += 1;
        Ok(report)
    }

    fn meta_gradient(&self, ds: &TwoViewDataset, batch: &Batch, prep: &Prepared, eta: f64) -> Result<MetaGradient> {
        let strategy = self
            .teacher
            .strategy
            .as_ref()
            .ok_or_else(|| Error::invalid("meta-gradient needs a learned teacher"))?;
        let vb = self.virtual_batches(ds, batch, prep);
        meta_grad(strategy, self.config.direction, &self.students, &vb, eta)
    }

    /// Meta-gradient at the current state on a fixed probe batch, with the
    /// teacher treated as learned even when it is fixed.
    pub fn probe_meta_gradient(&self, ds: &TwoViewDataset, probe: &Batch, eta: f64) -> Result<MetaGradient> {
        let mut probe_trainer = self.clone();
        if probe_trainer.teacher.strategy.is_none() {
            let t = self.teacher.fixed;
            let inner = |v: f64| v.clamp(1e-6, 1.0 - 1e-6);
            let init = StrategyTriple::new(inner(t.tau_mi), inner(t.lambda_u), inner(t.lambda_adv));
            probe_trainer.teacher.strategy =
                Some(TeacherStrategy::from_triple(init, 0.0, self.config.teacher.gate_temperature)?);
        }
        let prep = probe_trainer.prepare(ds, probe, u64::MAX, false)?;
        probe_trainer.meta_gradient(ds, probe, &prep, eta)
    }

    /// Eval-mode `∇_θ L_total` of both students on a fixed probe batch.
    pub fn probe_total_gradient(&self, ds: &TwoViewDataset, probe: &Batch) -> Result<(Losses, [StudentGrads; 2])> {
        let t = self.triple();
        let prep = self.prepare(ds, probe, u64::MAX, false)?;
        let mut losses = Losses::default();
        let mut out = Vec::with_capacity(2);
        for s in 0..2 {
            let [(ls, gs), (lu, gu), (la, ga)] = self.student_terms(ds, probe, &prep, s)?;
            losses.sup += ls;
            losses.unsup += lu;
            losses.adv += la;
            let mut g = gs;
            g.add_scaled(t.lambda_u, &gu);
            g.add_scaled(t.lambda_adv, &ga);
            out.push(g);
        }
        losses.total = losses.sup + t.lambda_u * losses.unsup + t.lambda_adv * losses.adv;
        let g1 = out.pop().expect("two students");
        let g0 = out.pop().expect("two students");
        Ok((losses, [g0, g1]))
    }
}

/// `(slot, label, source MI)` supervising student `s`: the accepted
/// pseudo-labels of the other view.
fn cross_pseudo_labels(filtered: &[Filtered; 2], s: usize) -> Vec<(usize, usize, f64)> {
    let source = &filtered[1 - s];
    match &source.result {
        None => Vec::new(),
        Some(r) => r
            .accepted
            .iter()
            .map(|&slot| {
                let e = &source.estimates[slot];
                (slot, e.pseudo_label, e.mi)
            })
            .collect(),
    }
}

fn view_stats(prep: &Prepared, v: usize, true_labels: &[Option<usize>]) -> ViewStats {
    let f = &prep.filtered[v];
    let Some(r) = &f.result else {
        return ViewStats {
            max_delta: prep.max_delta[v],
            ..ViewStats::default()
        };
    };
    let pseudo: Vec<usize> = f.estimates.iter().map(|e| e.pseudo_label).collect();
    let mean_mi = if f.estimates.is_empty() {
        0.0
    } else {
        f.estimates.iter().map(|e| e.mi).sum::<f64>() / f.estimates.len() as f64
    };
    ViewStats {
        accepted: r.accepted.len(),
        mask_rate: r.mask_rate,
        impurity: impurity(&r.accepted, &pseudo, true_labels),
        empty: r.accepted.is_empty(),
        mean_mi,
        max_delta: prep.max_delta[v],
    }
}

/// Eval-mode distributions of both students for one row.
pub fn ensemble_probs(students: &[StudentParams; 2], ds: &TwoViewDataset, row: usize) -> Result<[Vec<f64>; 2]> {
    let p = |v: usize| -> Result<Vec<f64>> {
        let (logits, _) = forward(&students[v], ds.x(v, row), None)?;
        Ok(softmax_unchecked(&logits))
    };
    Ok([p(0)?, p(1)?])
}

fn mean_of(p: &[Vec<f64>; 2]) -> Vec<f64> {
    p[0].iter().zip(&p[1]).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Clean accuracy, mean ensemble entropy and agreement; robust accuracy is
/// left at zero.
pub fn evaluate_clean(students: &[StudentParams; 2], ds: &TwoViewDataset, rows: &[usize]) -> Result<EvalMetrics> {
    if rows.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let (mut correct, mut known, mut entropy, mut agree) = (0usize, 0usize, 0.0, 0usize);
    for &row in rows {
        let p = ensemble_probs(students, ds, row)?;
        let m = mean_of(&p);
        entropy += entropy_unchecked(&m);
        agree += (argmax(&p[0]) == argmax(&p[1])) as usize;
        if let Some(y) = ds.true_label(row) {
            known += 1;
            correct += (argmax(&m) == y) as usize;
        }
    }
    let n = rows.len() as f64;
    Ok(EvalMetrics {
        n: rows.len(),
        accuracy: if known == 0 { 0.0 } else { correct as f64 / known as f64 },
        pgd_robust_accuracy: 0.0,
        mean_entropy: entropy / n,
        agreement: agree as f64 / n,
    })
}

/// Ensemble metrics on `rows`. Robust accuracy attacks each view with
/// label-targeted sign PGD and counts a row only if it is classified
/// correctly both before and after the attack.
pub fn evaluate(
    students: &[StudentParams; 2],
    ds: &TwoViewDataset,
    rows: &[usize],
    robust: &RobustEvalConfig,
) -> Result<EvalMetrics> {
    let mut m = evaluate_clean(students, ds, rows)?;
    let (mut robust_correct, mut known) = (0usize, 0usize);
    for &row in rows {
        let Some(y) = ds.true_label(row) else { continue };
        known += 1;
        let clean = mean_of(&ensemble_probs(students, ds, row)?);
        if argmax(&clean) != y {
            continue;
        }
        let mut p = Vec::with_capacity(2);
        for v in 0..2 {
            let x = ds.x(v, row);
            let delta = label_attack(&students[v], x, y, robust.epsilon, robust.steps, robust.step())?;
            let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let (logits, _) = forward(&students[v], &xp, None)?;
            p.push(softmax_unchecked(&logits));
        }
        let attacked = [p[0].clone(), p[1].clone()];
        robust_correct += (argmax(&mean_of(&attacked)) == y) as usize;
    }
    m.pgd_robust_accuracy = if known == 0 { 0.0 } else { robust_correct as f64 / known as f64 };
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mismatch_rate: Option<f64>,
}

/// Pseudo-label mismatch rate per equal-width bin of `max p̄`.
pub fn bin_error_histogram(
    students: &[StudentParams; 2],
    ds: &TwoViewDataset,
    rows: &[usize],
    bins: usize,
) -> Result<Vec<ConfidenceBin>> {
    if bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    let mut probs = Vec::with_capacity(rows.len());
    for &row in rows {
        if let Some(y) = ds.true_label(row) {
            probs.push((mean_of(&ensemble_probs(students, ds, row)?), y));
        }
    }
    Ok(histogram_from(&probs, bins))
}

fn histogram_from(probs: &[(Vec<f64>, usize)], bins: usize) -> Vec<ConfidenceBin> {
    let mut count = vec![0usize; bins];
    let mut wrong = vec![0usize; bins];
    for (p, y) in probs {
        let conf = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        wrong[b] += (argmax(p) != *y) as usize;
    }
    (0..bins)
        .map(|b| ConfidenceBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            mismatch_rate: (count[b] > 0).then(|| wrong[b] as f64 / count[b] as f64),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub steps: usize,
    pub mean_student_passes: f64,
    pub mean_mi_forward: [f64; 2],
    pub mean_perturb_grad: [f64; 2],
    pub mean_validation_passes: f64,
    pub mean_units: f64,
    /// Mean work relative to a supervised-only step on the same batches.
    pub ratio: f64,
}

pub fn cost_counters(reports: &[StepReport]) -> Result<CostSummary> {
    if reports.is_empty() {
        return Err(Error::invalid("no steps recorded"));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&CostCounters) -> f64| reports.iter().map(|r| f(&r.cost)).sum::<f64>() / n;
    let units = mean(&|c| c.units());
    let sup = mean(&|c| c.supervised_units());
    Ok(CostSummary {
        steps: reports.len(),
        mean_student_passes: mean(&|c| c.student_passes as f64),
        mean_mi_forward: [mean(&|c| c.mi_forward[0] as f64), mean(&|c| c.mi_forward[1] as f64)],
        mean_perturb_grad: [mean(&|c| c.perturb_grad[0] as f64), mean(&|c| c.perturb_grad[1] as f64)],
        mean_validation_passes: mean(&|c| c.validation_passes as f64),
        mean_units: units,
        ratio: units / sup,
    })
}

/// Rows used for reported accuracy: the test split, or the unlabeled rows
/// when there is no test split.
pub fn eval_rows(ds: &TwoViewDataset) -> Vec<usize> {
    let test = ds.rows(Split::Test);
    if test.is_empty() {
        ds.rows(Split::Unlabeled)
    } else {
        test
    }
}

fn window_spread(xs: &[f64], window: usize) -> Option<f64> {
    (xs.len() >= window).then(|| {
        let w = &xs[xs.len() - window..];
        let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    })
}

pub fn run_training(config: &TrainConfig, ds: &TwoViewDataset) -> Result<TrainingReport> {
    run_training_with(config, ds, |_| {})
}

/// Full loop with a callback per step report.
pub fn run_training_with(
    config: &TrainConfig,
    ds: &TwoViewDataset,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainingReport> {
    config.validate()?;
    ds.validate()?;
    let mut batches = BatchIter::new(ds, config.batch_plan())?;
    let steps_per_epoch = if config.steps_per_epoch == 0 {
        batches.steps_per_epoch()
    } else {
        config.steps_per_epoch
    };
    let mut trainer = Trainer::new(config.clone(), ds, config.epochs * steps_per_epoch)?;
    let unlabeled = ds.rows(Split::Unlabeled);
    let test = eval_rows(ds);
    let es = &config.early_stop;
    let mut history = StrategyHistory::new(es.window);
    let mut scores = Vec::new();
    let mut entropies = Vec::new();
    let mut agreements = Vec::new();
    let mut epochs = Vec::new();
    let mut trace = Vec::new();
    let mut step_reports = Vec::new();
    let mut stop_reason = StopReason::EpochsExhausted;

    for epoch in 0..config.epochs {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps_per_epoch {
            let mut batch = batches.next_batch();
            batch.epoch = epoch;
            let report = trainer.train_step(ds, &batch)?;
            on_step(&report);
            let t = report.strategy_after;
            trace.push(TraceRow {
                step: report.step,
                epoch,
                tau_mi: t.tau_mi,
                lambda_u: t.lambda_u,
                lambda_adv: t.lambda_adv,
            });
            acc.add(&report);
            step_reports.push(report);
        }
        let t = trainer.triple();
        history.push(t);
        let stability = (history.len() == es.window)
            .then(|| stability_score(&history))
            .transpose()?;
        if let Some(s) = stability {
            scores.push(s);
        }
        let test_eval = evaluate_clean(trainer.students(), ds, &test)?;
        let unl_eval = evaluate_clean(trainer.students(), ds, &unlabeled)?;
        entropies.push(unl_eval.mean_entropy);
        agreements.push(unl_eval.agreement);
        epochs.push(acc.finish(epoch, t, test_eval.accuracy, unl_eval.mean_entropy, unl_eval.agreement, stability));

        if es.enabled {
            if should_stop(&scores, es.eps_stop, es.patience) {
                stop_reason = StopReason::TeacherStable;
                break;
            }
            if let (Some(dh), Some(da)) = (es.delta_h, es.delta_a) {
                let spread_h = window_spread(&entropies, es.window);
                let spread_a = window_spread(&agreements, es.window);
                if matches!((spread_h, spread_a), (Some(h), Some(a)) if h < dh && a < da) {
                    stop_reason = StopReason::Converged;
                    break;
                }
            }
        }
    }
    let final_eval = evaluate(trainer.students(), ds, &test, &config.robust)?;
    Ok(TrainingReport {
        config: config.clone(),
        epochs,
        trace,
        stop_reason,
        steps_run: trainer.step_count(),
        stability_scores: scores,
        final_eval,
        students: trainer.students().clone(),
        teacher: trainer.teacher().clone(),
        step_reports,
    })
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    sup: f64,
    unsup: f64,
    adv: f64,
    mask_rate: f64,
    mask_n: usize,
    impurity: f64,
    impurity_n: usize,
}

impl EpochAccumulator {
    fn add(&mut self, r: &StepReport) {
        self.steps += 1;
        self.sup += r.losses.sup;
        self.unsup += r.losses.unsup;
        self.adv += r.losses.adv;
        for v in &r.views {
            self.mask_rate += v.mask_rate;
            self.mask_n += 1;
            if let Some(i) = v.impurity {
                self.impurity += i;
                self.impurity_n += 1;
            }
        }
    }

    fn finish(
        self,
        epoch: usize,
        t: StrategyTriple,
        accuracy: f64,
        mean_entropy: f64,
        agreement: f64,
        stability: Option<f64>,
    ) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        EpochMetrics {
            epoch,
            steps: self.steps,
            l_sup: self.sup / n,
            l_unsup: self.unsup / n,
            l_adv: self.adv / n,
            tau_mi: t.tau_mi,
            lambda_u: t.lambda_u,
            lambda_adv: t.lambda_adv,
            accuracy,
            mask_rate: self.mask_rate / self.mask_n.max(1) as f64,
            impurity: (self.impurity_n > 0).then(|| self.impurity / self.impurity_n as f64),
            mean_entropy,
            agreement,
            stability,
        }
    }
}

/// Mean and sample standard deviation across seeds.
pub fn across_seeds(values: &[f64]) -> (f64, f64) {
    mean_sd(values)
}
