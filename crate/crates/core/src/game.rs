//! Equilibrium diagnostics on finite strategy grids.
//!
//! A profile assigns each of the three players (teacher, students,
//! generator) an index into its grid. The teacher and the generator
//! maximise their payoffs, the students minimise theirs. Nash residuals are
//! the largest unilateral improvements; Stackelberg residuals are the
//! first-order stationarity gaps of a trained run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Split, TwoViewDataset};
use crate::engine::{
    ensemble_probs, run_training, TeacherMode, TrainConfig, Trainer, TrainingReport,
};
use crate::generator::{fixed_point_residual, pgd_perturb, AscentRule, PerturbConfig};
use crate::numerics::{argmax, entropy_unchecked, softmax_unchecked};
use crate::rng;
use crate::student::{forward, StudentParams};
use crate::teacher::StrategyTriple;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    Teacher,
    Students,
    Generator,
}

impl Player {
    pub const ALL: [Player; 3] = [Player::Teacher, Player::Students, Player::Generator];

    fn slot(self) -> usize {
        match self {
            Player::Teacher => 0,
            Player::Students => 1,
            Player::Generator => 2,
        }
    }

    /// Students pay a cost; the others collect a reward.
    fn maximises(self) -> bool {
        self != Player::Students
    }
}

/// Strategy indices `[teacher, students, generator]`.
pub type Profile = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payoffs {
    pub r_t: f64,
    pub r_s: f64,
    pub r_g: f64,
}

impl Payoffs {
    pub fn of(&self, player: Player) -> f64 {
        match player {
            Player::Teacher => self.r_t,
            Player::Students => self.r_s,
            Player::Generator => self.r_g,
        }
    }
}

pub trait Game {
    /// Number of strategies per player.
    fn sizes(&self) -> [usize; 3];

    fn payoffs(&mut self, profile: Profile) -> Result<Payoffs>;

    /// Payoff of `player` after it alone switches to `alt`.
    fn deviation_payoff(&mut self, player: Player, profile: Profile, alt: usize) -> Result<f64> {
        let mut p = profile;
        p[player.slot()] = alt;
        Ok(self.payoffs(p)?.of(player))
    }
}

fn better(player: Player, candidate: f64, incumbent: f64) -> bool {
    if player.maximises() {
        candidate > incumbent
    } else {
        candidate < incumbent
    }
}

/// Best strategy of `player` among `candidates`, ties kept at the incumbent.
pub fn best_response_over(
    game: &mut impl Game,
    player: Player,
    profile: Profile,
    candidates: &[usize],
) -> Result<(usize, f64)> {
    let incumbent = profile[player.slot()];
    let mut best = (incumbent, game.deviation_payoff(player, profile, incumbent)?);
    for &alt in candidates {
        if alt == incumbent {
            continue;
        }
        let v = game.deviation_payoff(player, profile, alt)?;
        if better(player, v, best.1) {
            best = (alt, v);
        }
    }
    Ok(best)
}

pub fn best_response(game: &mut impl Game, player: Player, profile: Profile) -> Result<(usize, f64)> {
    let all: Vec<usize> = (0..game.sizes()[player.slot()]).collect();
    best_response_over(game, player, profile, &all)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashResidual {
    pub teacher: f64,
    pub students: f64,
    pub generator: f64,
}

impl NashResidual {
    pub fn max(&self) -> f64 {
        self.teacher.max(self.students).max(self.generator)
    }

    pub fn is_equilibrium(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Residuals against the deviation sets `deviations[player]`.
pub fn nash_residual_over(
    game: &mut impl Game,
    profile: Profile,
    deviations: [&[usize]; 3],
) -> Result<NashResidual> {
    let mut res = [0.0; 3];
    for player in Player::ALL {
        let own = game.deviation_payoff(player, profile, profile[player.slot()])?;
        let (_, best) = best_response_over(game, player, profile, deviations[player.slot()])?;
        let gain = if player.maximises() { best - own } else { own - best };
        res[player.slot()] = gain.max(0.0);
    }
    Ok(NashResidual {
        teacher: res[0],
        students: res[1],
        generator: res[2],
    })
}

pub fn nash_residual(game: &mut impl Game, profile: Profile) -> Result<NashResidual> {
    let sizes = game.sizes();
    let grids: Vec<Vec<usize>> = sizes.iter().map(|&n| (0..n).collect()).collect();
    nash_residual_over(game, profile, [&grids[0], &grids[1], &grids[2]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub profile: Profile,
    pub rounds: usize,
    pub converged: bool,
    pub path: Vec<Profile>,
}

/// Teacher, students, generator take turns best-responding; a round with
/// no change ends the dynamics.
pub fn alternating_best_response(game: &mut impl Game, start: Profile, max_rounds: usize) -> Result<Dynamics> {
    let mut profile = start;
    let mut path = vec![profile];
    for round in 1..=max_rounds {
        let before = profile;
        for player in Player::ALL {
            profile[player.slot()] = best_response(game, player, profile)?.0;
        }
        path.push(profile);
        if profile == before {
            return Ok(Dynamics {
                profile,
                rounds: round,
                converged: true,
                path,
            });
        }
    }
    Ok(Dynamics {
        profile,
        rounds: max_rounds,
        converged: false,
        path,
    })
}

/// Every profile whose residuals are all within `tol`.
pub fn enumerate_nash(game: &mut impl Game, tol: f64) -> Result<Vec<Profile>> {
    let [a, b, c] = game.sizes();
    let mut out = Vec::new();
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                if nash_residual(game, [i, j, k])?.is_equilibrium(tol) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    Ok(out)
}

/// A game given by explicit payoff tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableGame {
    sizes: [usize; 3],
    /// Row-major over `[teacher][students][generator]`.
    table: Vec<Payoffs>,
}

impl TableGame {
    pub fn new(sizes: [usize; 3], table: Vec<Payoffs>) -> Result<Self> {
        if sizes.contains(&0) || table.len() != sizes.iter().product::<usize>() {
            return Err(Error::invalid("payoff table does not match the strategy counts"));
        }
        if table.iter().any(|p| !(p.r_t.is_finite() && p.r_s.is_finite() && p.r_g.is_finite())) {
            return Err(Error::invalid("payoffs must be finite"));
        }
        Ok(Self { sizes, table })
    }

    fn index(&self, p: Profile) -> usize {
        (p[0] * self.sizes[1] + p[1]) * self.sizes[2] + p[2]
    }
}

impl Game for TableGame {
    fn sizes(&self) -> [usize; 3] {
        self.sizes
    }

    fn payoffs(&mut self, profile: Profile) -> Result<Payoffs> {
        if profile.iter().zip(&self.sizes).any(|(i, n)| i >= n) {
            return Err(Error::invalid(format!("profile {profile:?} out of range")));
        }
        Ok(self.table[self.index(profile)])
    }
}

/// Training budget that defines the students' response operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudentBudget {
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyGrid {
    pub teacher: Vec<StrategyTriple>,
    pub students: Vec<StudentBudget>,
    /// `None` is the identity perturbation.
    pub generator: Vec<Option<PerturbConfig>>,
}

impl StrategyGrid {
    /// τ ∈ {0.01, 0.05, 0.1, 0.2}, λ_u ∈ {0, 0.25, 0.5, 0.75},
    /// λ_adv ∈ {0, 0.25, 0.5}, keeping λ_u + λ_adv ≤ 1.
    pub fn default_teacher_grid() -> Vec<StrategyTriple> {
        let mut out = Vec::new();
        for tau in [0.01, 0.05, 0.1, 0.2] {
            for lu in [0.0, 0.25, 0.5, 0.75] {
                for la in [0.0, 0.25, 0.5] {
                    if lu + la <= 1.0 {
                        out.push(StrategyTriple::new(tau, lu, la));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher.is_empty() || self.students.is_empty() || self.generator.is_empty() {
            return Err(Error::invalid("strategy grids must be nonempty"));
        }
        for t in &self.teacher {
            t.validate()?;
        }
        for g in self.generator.iter().flatten() {
            g.validate()?;
        }
        Ok(())
    }
}

/// Fixed rows on which `R_S` and `R_G` are measured: the first
/// `probe_size` unlabeled rows, all labeled-train rows and all validation rows.
pub fn probe_batch(ds: &TwoViewDataset, probe_size: usize) -> Result<Batch> {
    let mut unlabeled = ds.rows(Split::Unlabeled);
    unlabeled.truncate(probe_size);
    let labeled = ds.rows(Split::LabeledTrain);
    let validation = ds.rows(Split::Validation);
    if unlabeled.is_empty() || labeled.is_empty() || validation.is_empty() {
        return Err(Error::invalid("probe needs labeled, unlabeled and validation rows"));
    }
    Ok(Batch {
        epoch: 0,
        step_in_epoch: 0,
        labeled,
        unlabeled,
        validation,
    })
}

/// Ensemble accuracy on the validation rows.
pub fn validation_accuracy(students: &[StudentParams; 2], ds: &TwoViewDataset) -> Result<f64> {
    let rows = ds.rows(Split::Validation);
    if rows.is_empty() {
        return Err(Error::invalid("no validation rows"));
    }
    let mut correct = 0usize;
    for &row in &rows {
        let p = ensemble_probs(students, ds, row)?;
        let m: Vec<f64> = p[0].iter().zip(&p[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        correct += (Some(argmax(&m)) == ds.label(row)) as usize;
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Mean eval-mode entropy of both students at `x + δ` over the probe rows.
pub fn perturbed_entropy(
    students: &[StudentParams; 2],
    ds: &TwoViewDataset,
    rows: &[usize],
    generator: Option<&PerturbConfig>,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for v in 0..2 {
        for &row in rows {
            let x = ds.x(v, row);
            let xp: Vec<f64> = match generator {
                None => x.to_vec(),
                Some(cfg) => {
                    let mut r = rng::substream(seed, &[0x9E, v as u64, row as u64]);
                    let d = pgd_perturb(&students[v], x, cfg, &mut r)?.delta;
                    x.iter().zip(&d).map(|(a, b)| a + b).collect()
                }
            };
            let (logits, _) = forward(&students[v], &xp, None)?;
            total += entropy_unchecked(&softmax_unchecked(&logits));
        }
    }
    Ok(total / (2 * rows.len()) as f64)
}

#[derive(Clone, Debug)]
struct Trained {
    trainer: Trainer,
}

/// The co-training game on a dataset: every `(teacher point, budget,
/// generator)` triple trains students from the base config with a fixed
/// teacher at that point.
pub struct TricoGame<'a> {
    ds: &'a TwoViewDataset,
    base: TrainConfig,
    grid: StrategyGrid,
    probe: Batch,
    cache: HashMap<(usize, usize, usize), Trained>,
    payoff_log: Vec<(Profile, Payoffs)>,
}

impl<'a> TricoGame<'a> {
    pub fn new(ds: &'a TwoViewDataset, base: TrainConfig, grid: StrategyGrid, probe_size: usize) -> Result<Self> {
        grid.validate()?;
        base.validate()?;
        Ok(Self {
            ds,
            base,
            grid,
            probe: probe_batch(ds, probe_size)?,
            cache: HashMap::new(),
            payoff_log: Vec::new(),
        })
    }

    pub fn grid(&self) -> &StrategyGrid {
        &self.grid
    }

    /// Payoffs computed so far, in evaluation order.
    pub fn payoff_log(&self) -> &[(Profile, Payoffs)] {
        &self.payoff_log
    }

    fn config_for(&self, profile: Profile) -> TrainConfig {
        let mut c = self.base.clone();
        c.teacher.mode = TeacherMode::Fixed;
        c.teacher.init = self.grid.teacher[profile[0]];
        let budget = self.grid.students[profile[1]];
        c.epochs = budget.epochs;
        c.seed = budget.seed;
        match &self.grid.generator[profile[2]] {
            Some(g) => {
                c.generator_enabled = true;
                c.perturb = g.clone();
            }
            None => c.generator_enabled = false,
        }
        c
    }

    fn trained(&mut self, profile: Profile) -> Result<&Trained> {
        let key = (profile[0], profile[1], profile[2]);
        if !self.cache.contains_key(&key) {
            let cfg = self.config_for(profile);
            let report = run_training(&cfg, self.ds)?;
            let trainer = Trainer::from_state(cfg, self.ds, report.students, report.teacher)?;
            self.cache.insert(key, Trained { trainer });
        }
        Ok(&self.cache[&key])
    }

    fn check(&self, profile: Profile) -> Result<()> {
        let sizes = self.sizes();
        if profile.iter().zip(&sizes).any(|(i, n)| i >= n) {
            return Err(Error::invalid(format!("profile {profile:?} out of range")));
        }
        Ok(())
    }

    fn r_t(&mut self, profile: Profile) -> Result<f64> {
        let ds = self.ds;
        let t = self.trained(profile)?;
        validation_accuracy(t.trainer.students(), ds)
    }

    fn r_s(&mut self, profile: Profile) -> Result<f64> {
        let ds = self.ds;
        let probe = self.probe.clone();
        let t = self.trained(profile)?;
        let (losses, _) = t.trainer.probe_total_gradient(ds, &probe)?;
        let s = t.trainer.triple();
        Ok(s.lambda_u * losses.unsup + s.lambda_adv * losses.adv)
    }

    /// Students trained under `trained_with`, attacked by generator `g`.
    fn r_g(&mut self, trained_with: Profile, g: usize) -> Result<f64> {
        let ds = self.ds;
        let rows = self.probe.unlabeled.clone();
        let generator = self.grid.generator[g].clone();
        let seed = self.base.seed;
        let t = self.trained(trained_with)?;
        perturbed_entropy(t.trainer.students(), ds, &rows, generator.as_ref(), seed)
    }
}

impl Game for TricoGame<'_> {
    fn sizes(&self) -> [usize; 3] {
        [self.grid.teacher.len(), self.grid.students.len(), self.grid.generator.len()]
    }

    fn payoffs(&mut self, profile: Profile) -> Result<Payoffs> {
        self.check(profile)?;
        let p = Payoffs {
            r_t: self.r_t(profile)?,
            r_s: self.r_s(profile)?,
            r_g: self.r_g(profile, profile[2])?,
        };
        self.payoff_log.push((profile, p));
        Ok(p)
    }

    /// Teacher and student deviations retrain the students; a generator
    /// deviation attacks the students trained under the profile.
    fn deviation_payoff(&mut self, player: Player, profile: Profile, alt: usize) -> Result<f64> {
        let mut p = profile;
        p[player.slot()] = alt;
        self.check(p)?;
        match player {
            Player::Teacher => self.r_t(p),
            Player::Students => self.r_s(p),
            Player::Generator => self.r_g(profile, alt),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackelbergOptions {
    pub probe_size: usize,
    /// Ascent iterations before the generator residual is measured.
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub rule: AscentRule,
    /// Student step inside the meta-gradient; the run's base rate when `None`.
    pub eta: Option<f64>,
}

impl Default for StackelbergOptions {
    fn default() -> Self {
        Self {
            probe_size: 256,
            pgd_steps: 50,
            pgd_step_size: 0.1,
            rule: AscentRule::Gradient,
            eta: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackelbergResidual {
    /// `‖∂L_val/∂z‖∞` at the final teacher.
    pub teacher: f64,
    /// `‖∇_θ L_total‖∞` over both students.
    pub students: f64,
    /// Mean generator fixed-point residual.
    pub generator: f64,
}

impl StackelbergResidual {
    pub fn max(&self) -> f64 {
        self.teacher.max(self.students).max(self.generator)
    }
}

/// First-order residuals of a trained state on the probe batch.
pub fn stackelberg_residual_of(
    trainer: &Trainer,
    ds: &TwoViewDataset,
    opts: &StackelbergOptions,
) -> Result<StackelbergResidual> {
    let probe = probe_batch(ds, opts.probe_size)?;
    let eta = opts.eta.unwrap_or(trainer.config().lr);
    let meta = trainer.probe_meta_gradient(ds, &probe, eta)?;
    let teacher = meta.grad_z.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let (_, grads) = trainer.probe_total_gradient(ds, &probe)?;
    let students = grads[0].norm_inf().max(grads[1].norm_inf());
    let epsilon = trainer.config().perturb.epsilon;
    let cfg = PerturbConfig::pgd(epsilon, opts.pgd_steps, opts.pgd_step_size, opts.rule);
    let mut total = 0.0;
    for v in 0..2 {
        let params = &trainer.students()[v];
        for &row in &probe.unlabeled {
            let x = ds.x(v, row);
            let mut r = rng::substream(trainer.config().seed, &[0x5A, v as u64, row as u64]);
            let p = pgd_perturb(params, x, &cfg, &mut r)?;
            total += fixed_point_residual(params, x, &p.delta, &cfg)?;
        }
    }
    Ok(StackelbergResidual {
        teacher,
        students,
        generator: total / (2 * probe.unlabeled.len()) as f64,
    })
}

pub fn stackelberg_residual(
    report: &TrainingReport,
    ds: &TwoViewDataset,
    opts: &StackelbergOptions,
) -> Result<StackelbergResidual> {
    let trainer = Trainer::from_state(report.config.clone(), ds, report.students.clone(), report.teacher.clone())?;
    stackelberg_residual_of(&trainer, ds, opts)
}

/// Residuals of the untrained students of `config` (same init as a run).
pub fn stackelberg_residual_at_init(
    config: &TrainConfig,
    ds: &TwoViewDataset,
    opts: &StackelbergOptions,
) -> Result<StackelbergResidual> {
    let trainer = Trainer::new(config.clone(), ds, 0)?;
    stackelberg_residual_of(&trainer, ds, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pay(r_t: f64, r_s: f64, r_g: f64) -> Payoffs {
        Payoffs { r_t, r_s, r_g }
    }

    /// Teacher prefers matching the students; students prefer strategy 1
    /// when the teacher plays 1, otherwise 0.
    fn toy() -> TableGame {
        TableGame::new(
            [2, 2, 1],
            vec![
                pay(1.0, 0.2, 0.0),
                pay(0.0, 0.5, 0.0),
                pay(0.0, 0.6, 0.0),
                pay(2.0, 0.1, 0.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn residuals_match_hand_computation() {
        let mut g = toy();
        let r = nash_residual(&mut g, [0, 1, 0]).unwrap();
        assert_eq!(r.teacher, 2.0);
        assert!((r.students - 0.3).abs() < 1e-15);
        assert_eq!(r.generator, 0.0);
        let r = nash_residual(&mut g, [1, 1, 0]).unwrap();
        assert!(r.is_equilibrium(0.0));
    }

    #[test]
    fn ties_stay_at_incumbent() {
        let mut g = TableGame::new([3, 1, 1], vec![pay(1.0, 0.0, 0.0); 3]).unwrap();
        for i in 0..3 {
            assert_eq!(best_response(&mut g, Player::Teacher, [i, 0, 0]).unwrap().0, i);
        }
    }

    #[test]
    fn single_point_grid() {
        let mut g = TableGame::new([1, 1, 1], vec![pay(0.3, 0.2, 0.1)]).unwrap();
        assert_eq!(best_response(&mut g, Player::Generator, [0, 0, 0]).unwrap(), (0, 0.1));
        assert!(nash_residual(&mut g, [0, 0, 0]).unwrap().is_equilibrium(0.0));
    }

    #[test]
    fn table_shape_is_checked() {
        assert!(TableGame::new([2, 2, 1], vec![pay(0.0, 0.0, 0.0); 3]).is_err());
        assert!(TableGame::new([1, 1, 1], vec![pay(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn default_teacher_grid_is_feasible() {
        let g = StrategyGrid::default_teacher_grid();
        assert_eq!(g.len(), 4 * 11);
        assert!(g.iter().all(|t| t.is_feasible(0.0)));
    }
}
