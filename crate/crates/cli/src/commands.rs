use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use trico_core::data::format::{load_embedding_file, read_labels, write_embeddings, write_labels, encode_labels};
use trico_core::data::{gen_synthetic_two_view, make_splits_with, Split};
use trico_core::engine::{across_seeds, cost_counters, eval_rows, evaluate, run_training, CostSummary, StopReason};
use trico_core::game::{
    alternating_best_response, nash_residual, stackelberg_residual_of, Dynamics, NashResidual, Payoffs, Profile,
    StackelbergOptions, StackelbergResidual, StrategyGrid, StudentBudget, TricoGame,
};
use trico_core::gradcheck::{self, SuiteReport};
use trico_core::persist::{curves_csv, load_model, save_model, trace_csv, write_json, write_text, SavedModel};
use trico_core::{AscentRule, EvalMetrics, StrategyTriple, Trainer, TwoViewDataset};

use crate::config::{DataSource, RunConfig};
use crate::CliError;

type Echo = std::collections::BTreeMap<String, String>;

#[derive(Serialize)]
struct DatasetSummary {
    rows: usize,
    classes: usize,
    d1: usize,
    d2: usize,
    labeled: usize,
    validation: usize,
    unlabeled: usize,
    test: usize,
}

fn summarize(ds: &TwoViewDataset) -> DatasetSummary {
    let (d1, d2) = ds.dims();
    DatasetSummary {
        rows: ds.len(),
        classes: ds.classes(),
        d1,
        d2,
        labeled: ds.count(Split::LabeledTrain),
        validation: ds.count(Split::Validation),
        unlabeled: ds.count(Split::Unlabeled),
        test: ds.count(Split::Test),
    }
}

/// The unsplit dataset described by `cfg.data`.
fn raw_dataset(cfg: &RunConfig) -> Result<TwoViewDataset, CliError> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => Ok(gen_synthetic_two_view(
            d.n,
            d.classes,
            d.d1,
            d.d2,
            d.view_noise,
            d.label_noise,
            d.seed,
        )?),
        DataSource::Files => {
            let (v1, v2, labels) = (
                d.view1.as_deref().expect("checked in finish"),
                d.view2.as_deref().expect("checked in finish"),
                d.labels.as_deref().expect("checked in finish"),
            );
            match &d.truth {
                None => Ok(load_embedding_file(v1, v2, labels)?),
                Some(truth) => {
                    let ds = load_embedding_file(v1, v2, truth)?;
                    let observed = read_labels(labels)?
                        .into_iter()
                        .map(|y| usize::try_from(y).ok())
                        .collect();
                    Ok(ds.with_observed_labels(observed)?)
                }
            }
        }
    }
}

pub fn dataset(cfg: &RunConfig) -> Result<TwoViewDataset, CliError> {
    Ok(make_splits_with(&raw_dataset(cfg)?, &cfg.split_plan())?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn seed_dir(cfg: &RunConfig, out: &Path, seed: u64) -> PathBuf {
    if cfg.seeds.len() == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed-{seed}"))
    }
}

#[derive(Serialize)]
struct SeedResult {
    seed: u64,
    stop_reason: StopReason,
    epochs_run: usize,
    steps_run: usize,
    final_eval: EvalMetrics,
    final_strategy: StrategyTriple,
    cost: Option<CostSummary>,
}

#[derive(Serialize)]
struct Spread {
    mean: f64,
    sd: f64,
}

#[derive(Serialize)]
struct TrainReport {
    command: &'static str,
    config: Echo,
    dataset: DatasetSummary,
    seeds: Vec<SeedResult>,
    accuracy: Spread,
    pgd_robust_accuracy: Spread,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("resolved.conf"), &cfg.echo_text())?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let report = run_training(&cfg.train_for(seed), &ds)?;
        let dir = seed_dir(cfg, &cfg.out, seed);
        create_dir(&dir)?;
        write_text(&dir.join("curves.csv"), &curves_csv(&report))?;
        write_text(&dir.join("strategy_trace.csv"), &trace_csv(&report.trace))?;
        save_model(
            &dir.join("model.trcm"),
            &SavedModel {
                students: report.students.clone(),
                teacher: report.teacher.clone(),
            },
        )?;
        let cost = (!report.step_reports.is_empty())
            .then(|| cost_counters(&report.step_reports))
            .transpose()?;
        eprintln!(
            "seed {seed}: accuracy {:.4}, robust {:.4}, {} epochs",
            report.final_eval.accuracy,
            report.final_eval.pgd_robust_accuracy,
            report.epochs.len()
        );
        seeds.push(SeedResult {
            seed,
            stop_reason: report.stop_reason,
            epochs_run: report.epochs.len(),
            steps_run: report.steps_run,
            final_eval: report.final_eval.clone(),
            final_strategy: report.teacher.triple(),
            cost,
        });
    }
    let spread = |f: fn(&SeedResult) -> f64| {
        let xs: Vec<f64> = seeds.iter().map(f).collect();
        let (mean, sd) = across_seeds(&xs);
        Spread { mean, sd }
    };
    let out = TrainReport {
        command: "train",
        config: cfg.echo(),
        dataset: summarize(&ds),
        accuracy: spread(|s| s.final_eval.accuracy),
        pgd_robust_accuracy: spread(|s| s.final_eval.pgd_robust_accuracy),
        seeds,
    };
    write_json(&cfg.out.join("report.json"), &out)?;
    println!("{}", cfg.out.join("report.json").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    command: &'static str,
    config: Echo,
    model: String,
    strategy: StrategyTriple,
    metrics: EvalMetrics,
}

pub fn eval(cfg: &RunConfig, model: &Path) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let saved = load_model(model)?;
    for (v, s) in saved.students.iter().enumerate() {
        let d = if v == 0 { ds.dims().0 } else { ds.dims().1 };
        if s.d_in() != d || s.classes() != ds.classes() {
            return Err(CliError::Config(format!(
                "{}: student {v} expects {} inputs and {} classes, the dataset has {d} and {}",
                model.display(),
                s.d_in(),
                s.classes(),
                ds.classes()
            )));
        }
    }
    let metrics = evaluate(&saved.students, &ds, &eval_rows(&ds), &cfg.train.robust)?;
    create_dir(&cfg.out)?;
    let out = EvalReport {
        command: "eval",
        config: cfg.echo(),
        model: model.display().to_string(),
        strategy: saved.teacher.triple(),
        metrics,
    };
    write_json(&cfg.out.join("eval.json"), &out)?;
    println!("{}", serde_json::to_string_pretty(&out.metrics).map_err(trico_core::Error::from)?);
    Ok(())
}

#[derive(Serialize)]
struct Verdict {
    residual: f64,
    threshold: f64,
    within: bool,
}

fn verdict(residual: f64, threshold: f64) -> Verdict {
    Verdict {
        residual,
        threshold,
        within: residual <= threshold,
    }
}

#[derive(Serialize)]
struct EquilibriumReport {
    command: &'static str,
    config: Echo,
    run: String,
    seed: u64,
    grid: StrategyGrid,
    profile: Profile,
    nash: NashResidual,
    nash_verdict: Verdict,
    best_response: Dynamics,
    payoff_log: Vec<(Profile, Payoffs)>,
    stackelberg: StackelbergResidual,
    stackelberg_verdict: Verdict,
}

/// Nash residual of the run's strategies on a finite grid around them, and
/// first-order Stackelberg residuals of the saved model.
pub fn equilibrium(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let seed = cfg.seeds[0];
    let model_path = seed_dir(cfg, run, seed).join("model.trcm");
    let saved = load_model(&model_path)?;
    let train = cfg.train_for(seed);
    let e = &cfg.equilibrium;

    let trainer = Trainer::from_state(train.clone(), &ds, saved.students, saved.teacher.clone())?;
    let opts = StackelbergOptions {
        probe_size: e.probe_size,
        pgd_steps: e.pgd_steps,
        pgd_step_size: e.pgd_step_size,
        rule: AscentRule::Gradient,
        eta: None,
    };
    let stackelberg = stackelberg_residual_of(&trainer, &ds, &opts)?;

    let mut teacher = vec![saved.teacher.triple()];
    teacher.extend(StrategyGrid::default_teacher_grid());
    let grid = StrategyGrid {
        teacher,
        students: (0..e.student_seeds as u64)
            .map(|k| StudentBudget {
                epochs: e.epochs,
                seed: seed.wrapping_add(k),
            })
            .collect(),
        generator: vec![Some(train.perturb.clone()), None],
    };
    let mut game = TricoGame::new(&ds, train, grid.clone(), e.probe_size)?;
    let profile = [0, 0, 0];
    let nash = nash_residual(&mut game, profile)?;
    let best_response = alternating_best_response(&mut game, profile, e.max_rounds)?;

    let out_dir = &cfg.out;
    create_dir(out_dir)?;
    let report = EquilibriumReport {
        command: "equilibrium",
        config: cfg.echo(),
        run: run.display().to_string(),
        seed,
        grid,
        profile,
        nash_verdict: verdict(nash.max(), e.threshold),
        nash,
        best_response,
        payoff_log: game.payoff_log().to_vec(),
        stackelberg_verdict: verdict(stackelberg.max(), e.threshold),
        stackelberg,
    };
    write_json(&out_dir.join("equilibrium_report.json"), &report)?;
    println!(
        "nash residual {:.3e} (teacher {:.3e}, students {:.3e}, generator {:.3e})",
        report.nash.max(),
        report.nash.teacher,
        report.nash.students,
        report.nash.generator
    );
    println!(
        "stackelberg residual {:.3e} (teacher {:.3e}, students {:.3e}, generator {:.3e})",
        report.stackelberg.max(),
        report.stackelberg.teacher,
        report.stackelberg.students,
        report.stackelberg.generator
    );
    Ok(())
}

/// Returns whether every suite passed.
pub fn gradcheck(cfg: &RunConfig) -> Result<bool, CliError> {
    let suites: Vec<SuiteReport> = gradcheck::run_all(cfg.gradcheck_instances, cfg.gradcheck_seed)?;
    for s in &suites {
        println!(
            "{:<10} {} instances, max rel err {:.2e} (tol {:.0e}) {}",
            s.name,
            s.instances,
            s.max_rel_err,
            s.tolerance,
            if s.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(suites.iter().all(|s| s.passed))
}

/// Writes the synthetic dataset as `view1.trco`, `view2.trco`, observed
/// `labels.trcl`, ground-truth `truth.trcl` and a `data.conf` that points
/// `train` at them.
pub fn synth_data(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(CliError::Config("synth-data needs data.source = synthetic".into()));
    }
    let ds = raw_dataset(cfg)?;
    create_dir(&cfg.out)?;
    let files = ["view1.trco", "view2.trco", "labels.trcl", "truth.trcl"].map(|f| cfg.out.join(f));
    write_embeddings(&files[0], ds.view1())?;
    write_embeddings(&files[1], ds.view2())?;
    write_labels(&files[2], &encode_labels(ds.observed_labels()))?;
    write_labels(&files[3], &encode_labels(ds.true_labels()))?;
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string();
    let conf = format!(
        "data.source = files\ndata.view1 = {}\ndata.view2 = {}\ndata.labels = {}\ndata.truth = {}\ndata.seed = {}\n",
        abs(&files[0]),
        abs(&files[1]),
        abs(&files[2]),
        abs(&files[3]),
        cfg.data.seed
    );
    write_text(&cfg.out.join("data.conf"), &conf)?;
    println!("{} rows written to {}", ds.len(), cfg.out.display());
    Ok(())
}

#[derive(Serialize)]
struct CostReport {
    command: &'static str,
    config: Echo,
    epochs: usize,
    cost: CostSummary,
}

pub fn cost(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let mut train = cfg.train_for(cfg.seeds[0]);
    train.epochs = cfg.cost_epochs.max(1);
    train.early_stop.enabled = false;
    let report = run_training(&train, &ds)?;
    let cost = cost_counters(&report.step_reports)?;
    create_dir(&cfg.out)?;
    let out = CostReport {
        command: "cost",
        config: cfg.echo(),
        epochs: train.epochs,
        cost,
    };
    write_json(&cfg.out.join("cost.json"), &out)?;
    println!(
        "{} steps, {:.1} units/step, full/supervised ratio {:.3}",
        out.cost.steps, out.cost.mean_units, out.cost.ratio
    );
    Ok(())
}
