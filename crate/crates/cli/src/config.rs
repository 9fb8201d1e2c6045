//! Flat `section.key = value` configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment; blank lines are
//! ignored. Command-line flags `--section.key value` (or `=value`) are
//! applied after the file. Every key has a default, see [`RunConfig::echo`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use trico_core::data::{LabelBudget, SplitPlan};
use trico_core::engine::{MetaTiming, PseudoFilter, StreamMode, TeacherMode};
use trico_core::{AscentRule, FilterDirection, TrainConfig};

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    File { path: PathBuf, line: usize },
    Flag(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag(flag) => write!(f, "flag {flag}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: Origin,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.origin {
            Origin::File { line, .. } => write!(f, "{}: line {line}: {}", self.origin, self.msg),
            _ => write!(f, "{}: {}", self.origin, self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub classes: usize,
    pub d1: usize,
    pub d2: usize,
    pub view_noise: f64,
    pub label_noise: f64,
    pub view1: Option<PathBuf>,
    pub view2: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Optional ground truth for evaluation when `labels` are noisy.
    pub truth: Option<PathBuf>,
    pub test_fraction: f64,
    pub labels_per_class: usize,
    /// Overrides `labels_per_class` when positive.
    pub labeled_fraction: f64,
    pub validation_fraction: f64,
    /// Seeds the synthetic generator and the split.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumConfig {
    /// Student training budget per grid point.
    pub epochs: usize,
    /// Number of student budgets (seeds) in the student grid.
    pub student_seeds: usize,
    pub probe_size: usize,
    pub max_rounds: usize,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub generator_step_size: Option<f64>,
    pub eval_epsilon: Option<f64>,
    pub equilibrium: EquilibriumConfig,
    pub gradcheck_instances: usize,
    pub gradcheck_seed: u64,
    pub cost_epochs: usize,
    pub out: PathBuf,
    origins: BTreeMap<String, Origin>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig {
                source: DataSource::Synthetic,
                n: 3040,
                classes: 4,
                d1: 16,
                d2: 16,
                view_noise: 0.6,
                label_noise: 0.0,
                view1: None,
                view2: None,
                labels: None,
                truth: None,
                test_fraction: 0.25,
                labels_per_class: 10,
                labeled_fraction: 0.0,
                validation_fraction: 0.1,
                seed: 0,
            },
            seeds: vec![0],
            generator_step_size: None,
            eval_epsilon: None,
            equilibrium: EquilibriumConfig {
                epochs: 2,
                student_seeds: 2,
                probe_size: 256,
                max_rounds: 10,
                pgd_steps: 50,
                pgd_step_size: 0.1,
                threshold: 1e-2,
            },
            gradcheck_instances: 100,
            gradcheck_seed: 0,
            cost_epochs: 1,
            out: PathBuf::from("out"),
            origins: BTreeMap::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("expected a number, got {v:?}"))
}

fn parse_real(v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got {v:?}"))
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_opt_real(v: &str) -> Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_real(v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn parse_choice<T: Copy>(v: &str, choices: &[(&str, T)]) -> Result<T, String> {
    choices.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got {v:?}", names.join(", "))
    })
}

const FILTERS: &[(&str, PseudoFilter)] =
    &[("mi", PseudoFilter::Mi), ("confidence", PseudoFilter::Confidence), ("off", PseudoFilter::Off)];
const DIRECTIONS: &[(&str, FilterDirection)] = &[("above", FilterDirection::Above), ("below", FilterDirection::Below)];
const RULES: &[(&str, AscentRule)] = &[("sign", AscentRule::Sign), ("gradient", AscentRule::Gradient)];
const MODES: &[(&str, TeacherMode)] = &[("learned", TeacherMode::Learned), ("fixed", TeacherMode::Fixed)];
const TIMINGS: &[(&str, MetaTiming)] = &[("pre", MetaTiming::PreStep), ("post", MetaTiming::PostStep)];
const STREAMS: &[(&str, StreamMode)] = &[("independent", StreamMode::Independent), ("shared", StreamMode::Shared)];
const SOURCES: &[(&str, DataSource)] = &[("synthetic", DataSource::Synthetic), ("files", DataSource::Files)];

fn name_of<T: PartialEq + Copy>(choices: &[(&'static str, T)], v: T) -> &'static str {
    choices.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("every variant is listed")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let d = &mut self.data;
        let e = &mut self.equilibrium;
        match key {
            "data.source" => d.source = parse_choice(value, SOURCES)?,
            "data.n" => d.n = parse_num(value)?,
            "data.classes" => d.classes = parse_num(value)?,
            "data.d1" => d.d1 = parse_num(value)?,
            "data.d2" => d.d2 = parse_num(value)?,
            "data.view_noise" => d.view_noise = parse_real(value)?,
            "data.label_noise" => d.label_noise = parse_real(value)?,
            "data.view1" => d.view1 = parse_path(value),
            "data.view2" => d.view2 = parse_path(value),
            "data.labels" => d.labels = parse_path(value),
            "data.truth" => d.truth = parse_path(value),
            "data.test_fraction" => d.test_fraction = parse_real(value)?,
            "data.labels_per_class" => d.labels_per_class = parse_num(value)?,
            "data.labeled_fraction" => d.labeled_fraction = parse_real(value)?,
            "data.validation_fraction" => d.validation_fraction = parse_real(value)?,
            "data.seed" => d.seed = parse_num(value)?,
            "data.labeled_batch" => t.labeled_batch = parse_num(value)?,
            "data.mu" => t.mu = parse_num(value)?,
            "data.validation_batch" => t.validation_batch = parse_num(value)?,
            "data.class_balanced" => t.class_balanced = parse_bool(value)?,
            "model.hidden" => t.hidden = parse_num(value)?,
            "model.dropout" => t.dropout = parse_real(value)?,
            "train.epochs" => t.epochs = parse_num(value)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse_num(value)?,
            "train.lr" => t.lr = parse_real(value)?,
            "train.momentum" => t.momentum = parse_real(value)?,
            "train.norm_bound" => t.norm_bound = parse_opt_real(value)?,
            "train.seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_num::<u64>(s.trim()))
                    .collect::<Result<_, _>>()?;
                if self.seeds.is_empty() {
                    return Err("need at least one seed".into());
                }
            }
            "train.streams" => t.streams = parse_choice(value, STREAMS)?,
            "uncertainty.k" => t.mc_passes = parse_num(value)?,
            "filter.kind" => t.filter = parse_choice(value, FILTERS)?,
            "filter.direction" => t.direction = parse_choice(value, DIRECTIONS)?,
            "filter.confidence_threshold" => t.confidence_threshold = parse_real(value)?,
            "generator.enabled" => t.generator_enabled = parse_bool(value)?,
            "generator.epsilon" => t.perturb.epsilon = parse_real(value)?,
            "generator.gamma" => t.perturb.gamma = parse_real(value)?,
            "generator.steps" => t.perturb.steps = parse_num(value)?,
            "generator.step_size" => self.generator_step_size = parse_opt_real(value)?,
            "generator.rule" => t.perturb.rule = parse_choice(value, RULES)?,
            "generator.mi_passes" => t.perturb.mi_passes = parse_num(value)?,
            "teacher.mode" => t.teacher.mode = parse_choice(value, MODES)?,
            "teacher.tau_mi" => t.teacher.init.tau_mi = parse_real(value)?,
            "teacher.lambda_u" => t.teacher.init.lambda_u = parse_real(value)?,
            "teacher.lambda_adv" => t.teacher.init.lambda_adv = parse_real(value)?,
            "teacher.eta_t" => t.teacher.lr = parse_real(value)?,
            "teacher.temperature" => t.teacher.gate_temperature = parse_real(value)?,
            "teacher.update_every" => t.teacher.update_every = parse_num(value)?,
            "teacher.timing" => t.teacher.timing = parse_choice(value, TIMINGS)?,
            "early_stop.enabled" => t.early_stop.enabled = parse_bool(value)?,
            "early_stop.eps_stop" => t.early_stop.eps_stop = parse_real(value)?,
            "early_stop.patience" => t.early_stop.patience = parse_num(value)?,
            "early_stop.window" => t.early_stop.window = parse_num(value)?,
            "early_stop.delta_h" => t.early_stop.delta_h = parse_opt_real(value)?,
            "early_stop.delta_a" => t.early_stop.delta_a = parse_opt_real(value)?,
            "eval.epsilon" => self.eval_epsilon = parse_opt_real(value)?,
            "eval.steps" => t.robust.steps = parse_num(value)?,
            "eval.step_size" => t.robust.step_size = parse_opt_real(value)?,
            "equilibrium.epochs" => e.epochs = parse_num(value)?,
            "equilibrium.student_seeds" => e.student_seeds = parse_num(value)?,
            "equilibrium.probe_size" => e.probe_size = parse_num(value)?,
            "equilibrium.max_rounds" => e.max_rounds = parse_num(value)?,
            "equilibrium.pgd_steps" => e.pgd_steps = parse_num(value)?,
            "equilibrium.pgd_step_size" => e.pgd_step_size = parse_real(value)?,
            "equilibrium.threshold" => e.threshold = parse_real(value)?,
            "gradcheck.instances" => self.gradcheck_instances = parse_num(value)?,
            "gradcheck.seed" => self.gradcheck_seed = parse_num(value)?,
            "cost.epochs" => self.cost_epochs = parse_num(value)?,
            "output.dir" => self.out = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn set_from(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|msg| ConfigError {
            origin: origin.clone(),
            msg: format!("{key}: {msg}"),
        })?;
        self.origins.insert(key.to_string(), origin);
        Ok(())
    }

    /// Parses file contents; `path` is only used in messages.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::File {
                path: path.to_path_buf(),
                line: i + 1,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    origin,
                    msg: format!("expected `section.key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            if !key.contains('.') || key.contains(char::is_whitespace) {
                return Err(ConfigError {
                    origin,
                    msg: format!("malformed key {key:?}"),
                });
            }
            self.set_from(key, value.trim(), origin)?;
        }
        Ok(())
    }

    /// Applies `--section.key value` / `--section.key=value` pairs. `--out`
    /// is shorthand for `--output.dir`.
    pub fn apply_flags(&mut self, flags: &[(String, String)]) -> Result<(), ConfigError> {
        for (key, value) in flags {
            let key = if key == "out" { "output.dir" } else { key.as_str() };
            self.set_from(key, value, Origin::Flag(format!("--{key}")))?;
        }
        Ok(())
    }

    fn origin(&self, key: &str) -> Origin {
        self.origins.get(key).cloned().unwrap_or(Origin::Default)
    }

    /// Origin of whichever of `keys` was set last (flags win over the file).
    fn latest(&self, keys: &[&str]) -> Origin {
        let rank = |o: &Origin| match o {
            Origin::Default => (0, 0),
            Origin::File { line, .. } => (1, *line),
            Origin::Flag(_) => (2, 0),
        };
        keys.iter().map(|k| self.origin(k)).max_by_key(rank).unwrap_or(Origin::Default)
    }

    /// Fills derived defaults and checks constraints.
    pub fn finish(mut self) -> Result<Self, ConfigError> {
        let eps = self.train.perturb.epsilon;
        let steps = self.train.perturb.steps.max(1);
        self.train.perturb.step_size = self
            .generator_step_size
            .unwrap_or(if steps == 1 { eps } else { 2.5 * eps / steps as f64 });
        self.train.robust.epsilon = self.eval_epsilon.unwrap_or(eps);
        self.train.robust.step_size = Some(self.train.robust.step());
        self.train.seed = self.seeds[0];

        let init = self.train.teacher.init;
        if init.lambda_u + init.lambda_adv > 1.0 {
            return Err(ConfigError {
                origin: self.latest(&["teacher.lambda_u", "teacher.lambda_adv"]),
                msg: format!(
                    "teacher.lambda_u + teacher.lambda_adv = {} exceeds 1",
                    init.lambda_u + init.lambda_adv
                ),
            });
        }
        let d = &self.data;
        let fraction_checks = [
            ("data.test_fraction", (0.0..1.0).contains(&d.test_fraction)),
            ("data.validation_fraction", d.validation_fraction > 0.0 && d.validation_fraction < 1.0),
            ("data.labeled_fraction", (0.0..=1.0).contains(&d.labeled_fraction)),
            ("data.label_noise", (0.0..=1.0).contains(&d.label_noise)),
            ("data.view_noise", d.view_noise >= 0.0),
        ];
        for (key, ok) in fraction_checks {
            if !ok {
                return Err(ConfigError {
                    origin: self.origin(key),
                    msg: format!("{key} is out of range"),
                });
            }
        }
        if d.source == DataSource::Files {
            for (key, p) in [("data.view1", &d.view1), ("data.view2", &d.view2), ("data.labels", &d.labels)] {
                if p.is_none() {
                    return Err(ConfigError {
                        origin: self.origin("data.source"),
                        msg: format!("data.source = files needs {key}"),
                    });
                }
            }
        }
        if self.equilibrium.student_seeds == 0 || self.equilibrium.probe_size == 0 {
            return Err(ConfigError {
                origin: self.latest(&["equilibrium.student_seeds", "equilibrium.probe_size"]),
                msg: "equilibrium.student_seeds and equilibrium.probe_size must be positive".into(),
            });
        }
        if let Err(e) = self.train.validate() {
            let msg = e.to_string();
            let key = self
                .echo()
                .into_keys()
                .filter(|k| msg.contains(k.as_str()))
                .max_by_key(|k| k.len());
            let origin = key.map_or(Origin::Default, |k| self.origin(&k));
            return Err(ConfigError { origin, msg });
        }
        Ok(self)
    }

    pub fn split_plan(&self) -> SplitPlan {
        let d = &self.data;
        SplitPlan {
            test_fraction: d.test_fraction,
            labeled: if d.labeled_fraction > 0.0 {
                LabelBudget::Fraction(d.labeled_fraction)
            } else {
                LabelBudget::PerClass(d.labels_per_class)
            },
            validation_fraction: d.validation_fraction,
            seed: d.seed,
        }
    }

    /// Training config for one seed of the seed list.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Every key with its resolved value. Feeding this back as a config
    /// file reproduces the run.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let d = &self.data;
        let e = &self.equilibrium;
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("data.source", name_of(SOURCES, d.source).into()),
            ("data.n", d.n.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.d1", d.d1.to_string()),
            ("data.d2", d.d2.to_string()),
            ("data.view_noise", d.view_noise.to_string()),
            ("data.label_noise", d.label_noise.to_string()),
            ("data.view1", fmt_path(&d.view1)),
            ("data.view2", fmt_path(&d.view2)),
            ("data.labels", fmt_path(&d.labels)),
            ("data.truth", fmt_path(&d.truth)),
            ("data.test_fraction", d.test_fraction.to_string()),
            ("data.labels_per_class", d.labels_per_class.to_string()),
            ("data.labeled_fraction", d.labeled_fraction.to_string()),
            ("data.validation_fraction", d.validation_fraction.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.labeled_batch", t.labeled_batch.to_string()),
            ("data.mu", t.mu.to_string()),
            ("data.validation_batch", t.validation_batch.to_string()),
            ("data.class_balanced", t.class_balanced.to_string()),
            ("model.hidden", t.hidden.to_string()),
            ("model.dropout", t.dropout.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.steps_per_epoch", t.steps_per_epoch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.norm_bound", fmt_opt(t.norm_bound)),
            ("train.seeds", seeds.join(",")),
            ("train.streams", name_of(STREAMS, t.streams).into()),
            ("uncertainty.k", t.mc_passes.to_string()),
            ("filter.kind", name_of(FILTERS, t.filter).into()),
            ("filter.direction", name_of(DIRECTIONS, t.direction).into()),
            ("filter.confidence_threshold", t.confidence_threshold.to_string()),
            ("generator.enabled", t.generator_enabled.to_string()),
            ("generator.epsilon", t.perturb.epsilon.to_string()),
            ("generator.gamma", t.perturb.gamma.to_string()),
            ("generator.steps", t.perturb.steps.to_string()),
            ("generator.step_size", t.perturb.step_size.to_string()),
            ("generator.rule", name_of(RULES, t.perturb.rule).into()),
            ("generator.mi_passes", t.perturb.mi_passes.to_string()),
            ("teacher.mode", name_of(MODES, t.teacher.mode).into()),
            ("teacher.tau_mi", t.teacher.init.tau_mi.to_string()),
            ("teacher.lambda_u", t.teacher.init.lambda_u.to_string()),
            ("teacher.lambda_adv", t.teacher.init.lambda_adv.to_string()),
            ("teacher.eta_t", t.teacher.lr.to_string()),
            ("teacher.temperature", t.teacher.gate_temperature.to_string()),
            ("teacher.update_every", t.teacher.update_every.to_string()),
            ("teacher.timing", name_of(TIMINGS, t.teacher.timing).into()),
            ("early_stop.enabled", t.early_stop.enabled.to_string()),
            ("early_stop.eps_stop", t.early_stop.eps_stop.to_string()),
            ("early_stop.patience", t.early_stop.patience.to_string()),
            ("early_stop.window", t.early_stop.window.to_string()),
            ("early_stop.delta_h", fmt_opt(t.early_stop.delta_h)),
            ("early_stop.delta_a", fmt_opt(t.early_stop.delta_a)),
            ("eval.epsilon", t.robust.epsilon.to_string()),
            ("eval.steps", t.robust.steps.to_string()),
            ("eval.step_size", t.robust.step().to_string()),
            ("equilibrium.epochs", e.epochs.to_string()),
            ("equilibrium.student_seeds", e.student_seeds.to_string()),
            ("equilibrium.probe_size", e.probe_size.to_string()),
            ("equilibrium.max_rounds", e.max_rounds.to_string()),
            ("equilibrium.pgd_steps", e.pgd_steps.to_string()),
            ("equilibrium.pgd_step_size", e.pgd_step_size.to_string()),
            ("equilibrium.threshold", e.threshold.to_string()),
            ("gradcheck.instances", self.gradcheck_instances.to_string()),
            ("gradcheck.seed", self.gradcheck_seed.to_string()),
            ("cost.epochs", self.cost_epochs.to_string()),
            ("output.dir", self.out.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The echo as config-file text.
    pub fn echo_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.echo() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Reads an optional config file and applies flag overrides.
pub fn parse_config(path: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: Origin::Flag("--config".into()),
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        cfg.apply_text(path, &text)?;
    }
    cfg.apply_flags(flags)?;
    cfg.finish()
}

/// Splits `--key value` / `--key=value` tokens into pairs.
pub fn parse_flags(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(body) = arg.strip_prefix("--") else {
            return Err(ConfigError {
                origin: Origin::Flag(arg.clone()),
                msg: "expected a `--section.key value` flag".into(),
            });
        };
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let value = args.get(i + 1).ok_or_else(|| ConfigError {
                origin: Origin::Flag(arg.clone()),
                msg: "missing value".into(),
            })?;
            out.push((body.to_string(), value.clone()));
            i += 2;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(Path::new("t.conf"), text)?;
        c.finish()
    }

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.train.mc_passes, 5);
        assert_eq!(c.train.perturb.epsilon, 1.0);
        assert_eq!(c.train.mu, 7);
        assert_eq!(c.train.lr, 0.03);
        assert_eq!(c.train.teacher.lr, 0.01);
        assert_eq!(c.train.teacher.init.as_array(), [0.05, 0.5, 0.5]);
        assert_eq!(c.train.robust.epsilon, 1.0);
        assert_eq!(c.train.perturb.step_size, 1.0);
    }

    #[test]
    fn comments_blank_lines_and_values() {
        let c = parse("# header\n\ntrain.epochs = 3   # short\nfilter.direction=below\ntrain.seeds = 1, 2,3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.direction, FilterDirection::Below);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.train.seed, 1);
    }

    #[test]
    fn errors_cite_line_numbers() {
        let e = parse("train.epochs = 3\nbogus.key = 1\n").unwrap_err();
        assert_eq!(e.origin, Origin::File { path: "t.conf".into(), line: 2 });
        assert!(e.msg.contains("unknown key"));

        let e = parse("\n\ntrain.lr = fast\n").unwrap_err();
        assert!(matches!(e.origin, Origin::File { line: 3, .. }));

        let e = parse("this is not a pair\n").unwrap_err();
        assert!(matches!(e.origin, Origin::File { line: 1, .. }));

        let e = parse("teacher.lambda_u = 0.7\n# x\nteacher.lambda_adv = 0.6\n").unwrap_err();
        assert!(matches!(e.origin, Origin::File { line: 3, .. }), "{e}");

        let e = parse("train.epochs = 2\ntrain.lr = -1\n").unwrap_err();
        assert!(matches!(e.origin, Origin::File { line: 2, .. }), "{e}");
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::default();
        c.apply_text(Path::new("t.conf"), "teacher.eta_t = 0.5\n").unwrap();
        let flags = parse_flags(&["--teacher.eta_t".into(), "0".into(), "--out=x".into()]).unwrap();
        c.apply_flags(&flags).unwrap();
        let c = c.finish().unwrap();
        assert_eq!(c.train.teacher.lr, 0.0);
        assert_eq!(c.out, PathBuf::from("x"));
    }

    #[test]
    fn echo_round_trips() {
        let c = parse("train.epochs = 4\ngenerator.epsilon = 0.3\ngenerator.steps = 3\nteacher.lambda_u = 0.1\nearly_stop.delta_h = 0.01\n")
            .unwrap();
        let back = parse(&c.echo_text()).unwrap();
        assert_eq!(back.echo(), c.echo());
        assert_eq!(back.train, c.train);
        assert!((c.train.perturb.step_size - 0.25).abs() < 1e-12);
        assert_eq!(c.train.robust.epsilon, 0.3);
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let mut c = RunConfig::default();
        for (k, v) in RunConfig::default().finish().unwrap().echo() {
            c.set(&k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
