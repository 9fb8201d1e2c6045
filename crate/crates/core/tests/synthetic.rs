//! Statistical checks of the synthetic two-view generator at n = 10⁴.

use trico_core::data::gen_synthetic_two_view;
use trico_core::TwoViewDataset;

const N: usize = 10_000;
const CLASSES: usize = 4;

fn residuals(ds: &TwoViewDataset, view: usize, rows: &[usize]) -> Vec<Vec<f64>> {
    let d = if view == 0 { ds.dims().0 } else { ds.dims().1 };
    let mut mean = vec![0.0; d];
    for &i in rows {
        mean.iter_mut().zip(ds.x(view, i)).for_each(|(m, x)| *m += x / rows.len() as f64);
    }
    rows.iter()
        .map(|&i| ds.x(view, i).iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa * bb).sqrt()
}

/// `(Σ z², pair count)` of cross-view coordinate correlations over `rows`.
fn cross_view_chi2(ds: &TwoViewDataset, rows: &[usize]) -> (f64, usize) {
    let r1 = residuals(ds, 0, rows);
    let r2 = residuals(ds, 1, rows);
    let (d1, d2) = ds.dims();
    let n = rows.len() as f64;
    let mut chi2 = 0.0;
    for j in 0..d1 {
        let a: Vec<f64> = r1.iter().map(|r| r[j]).collect();
        for k in 0..d2 {
            let b: Vec<f64> = r2.iter().map(|r| r[k]).collect();
            chi2 += corr(&a, &b).powi(2) * n;
        }
    }
    (chi2, d1 * d2)
}

#[test]
fn views_are_conditionally_independent_given_the_label() {
    let ds = gen_synthetic_two_view(N, CLASSES, 16, 16, 0.6, 0.0, 11).unwrap();
    let (mut chi2, mut dof) = (0.0, 0);
    for c in 0..CLASSES {
        let rows: Vec<usize> = (0..N).filter(|&i| ds.true_label(i) == Some(c)).collect();
        let (x, k) = cross_view_chi2(&ds, &rows);
        chi2 += x;
        dof += k;
    }
    // Σ z² ~ χ²(dof) under independence: mean dof, sd √(2·dof).
    let z = (chi2 - dof as f64) / (2.0 * dof as f64).sqrt();
    assert!(z.abs() < 3.0, "chi2 {chi2:.1} on {dof} pairs, z = {z:.2}");

    // Without conditioning, the shared label makes the views dependent.
    let all: Vec<usize> = (0..N).collect();
    let (x, k) = cross_view_chi2(&ds, &all);
    let z = (x - k as f64) / (2.0 * k as f64).sqrt();
    assert!(z > 30.0, "marginal z = {z:.1}");
}

#[test]
fn classes_are_balanced_and_label_noise_hits_its_rate() {
    let ds = gen_synthetic_two_view(N, CLASSES, 4, 4, 0.6, 0.2, 3).unwrap();
    let mut counts = [0usize; CLASSES];
    let mut flipped = 0usize;
    for i in 0..N {
        let y = ds.true_label(i).unwrap();
        counts[y] += 1;
        flipped += (ds.label(i) != Some(y)) as usize;
    }
    assert!(counts.iter().all(|&c| c.abs_diff(N / CLASSES) <= 1), "{counts:?}");
    let rate = flipped as f64 / N as f64;
    let sd = (0.2 * 0.8 / N as f64).sqrt();
    assert!((rate - 0.2).abs() < 3.0 * sd, "flip rate {rate}");
}
