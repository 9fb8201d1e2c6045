use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng as _;
use std::hint::black_box;

use trico_core::data::{gen_synthetic_two_view, make_splits_with, BatchIter, LabelBudget, SplitPlan};
use trico_core::generator::pgd_perturb;
use trico_core::rng;
use trico_core::uncertainty::mutual_information;
use trico_core::{AscentRule, PerturbConfig, ProbVector, StudentParams, TrainConfig, Trainer, TwoViewDataset};

fn dataset() -> TwoViewDataset {
    let ds = gen_synthetic_two_view(3040, 4, 16, 16, 0.6, 0.0, 0).unwrap();
    make_splits_with(
        &ds,
        &SplitPlan {
            test_fraction: 0.25,
            labeled: LabelBudget::PerClass(10),
            validation_fraction: 0.1,
            seed: 0,
        },
    )
    .unwrap()
}

fn train_step(c: &mut Criterion) {
    let ds = dataset();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, cfg) in [
        ("full", TrainConfig::default()),
        ("supervised", TrainConfig::default().supervised_only()),
    ] {
        let mut batches = BatchIter::new(&ds, cfg.batch_plan()).unwrap();
        let trainer = Trainer::new(cfg, &ds, 1000).unwrap();
        group.bench_function(name, |b| {
            b.iter_batched(
                || (trainer.clone(), batches.next_batch()),
                |(mut t, batch)| black_box(t.train_step(&ds, &batch).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn mi(c: &mut Criterion) {
    let mut r = rng::seeded(1);
    let samples: Vec<ProbVector> = (0..5)
        .map(|_| {
            let w: Vec<f64> = (0..10).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            ProbVector::new(w.iter().map(|x| x / s).collect()).unwrap()
        })
        .collect();
    c.bench_function("mutual_information_k5_c10", |b| {
        b.iter(|| black_box(mutual_information(black_box(&samples)).unwrap()))
    });
}

fn pgd(c: &mut Criterion) {
    let mut r = rng::seeded(2);
    let params = StudentParams::init(16, 32, 4, 0.1, &mut r).unwrap();
    let x: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
    for (name, cfg) in [
        ("fgsm", PerturbConfig::fgsm(0.1)),
        ("pgd10", PerturbConfig::pgd(0.1, 10, 0.025, AscentRule::Sign)),
    ] {
        c.bench_function(&format!("perturb_{name}"), |b| {
            b.iter(|| black_box(pgd_perturb(&params, &x, &cfg, &mut rng::seeded(3)).unwrap()))
        });
    }
}

criterion_group!(benches, train_step, mi, pgd);
criterion_main!(benches);
