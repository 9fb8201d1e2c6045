//! Paired-view datasets, stratified splits and ratio-controlled batching.

pub mod format;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::DenseMatrix;
use crate::rng;
use crate::{Error, Result};

pub use format::load_embedding_file;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    LabeledTrain,
    Unlabeled,
    Validation,
    Test,
}

/// Two embeddings per row, the observed label (if any) and a split tag.
///
/// `true_labels` are private: they feed impurity and error metrics only.
/// Training code reads labels exclusively through [`TwoViewDataset::label`],
/// which refuses unlabeled and test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoViewDataset {
    view1: DenseMatrix,
    view2: DenseMatrix,
    labels: Vec<Option<usize>>,
    true_labels: Vec<Option<usize>>,
    split: Vec<Split>,
    classes: usize,
}

impl TwoViewDataset {
    /// Rows with a label start as labeled-train, the rest as unlabeled.
    pub fn new(
        view1: DenseMatrix,
        view2: DenseMatrix,
        labels: Vec<Option<usize>>,
        classes: usize,
    ) -> Result<Self> {
        let n = view1.rows();
        if view2.rows() != n || labels.len() != n {
            return Err(Error::invalid(format!(
                "row counts differ: view1 {n}, view2 {}, labels {}",
                view2.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        if let Some(y) = labels.iter().flatten().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} out of range {classes}")));
        }
        let split = labels
            .iter()
            .map(|l| if l.is_some() { Split::LabeledTrain } else { Split::Unlabeled })
            .collect();
        Ok(Self {
            view1,
            view2,
            true_labels: labels.clone(),
            labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.view1.cols(), self.view2.cols())
    }

    pub fn view1(&self) -> &DenseMatrix {
        &self.view1
    }

    pub fn view2(&self) -> &DenseMatrix {
        &self.view2
    }

    /// Row `i` of view `v` (0 or 1).
    #[inline]
    pub fn x(&self, view: usize, i: usize) -> &[f64] {
        if view == 0 {
            self.view1.row(i)
        } else {
            self.view2.row(i)
        }
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    /// Observed label of a labeled-train or validation row.
    pub fn label(&self, i: usize) -> Option<usize> {
        match self.split[i] {
            Split::LabeledTrain | Split::Validation => self.labels[i],
            Split::Unlabeled | Split::Test => None,
        }
    }

    /// Ground truth for metrics, regardless of split.
    pub fn true_label(&self, i: usize) -> Option<usize> {
        self.true_labels[i]
    }

    pub fn true_labels(&self) -> &[Option<usize>] {
        &self.true_labels
    }

    /// Observed labels for every row, `None` where unknown.
    pub fn observed_labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }

    /// Replaces observed labels, keeping the ground truth.
    pub fn with_observed_labels(mut self, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid("label count mismatch"));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Checks the split invariants.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            if self.split[i] == Split::Validation && self.labels[i].is_none() {
                return Err(Error::invalid(format!("validation row {i} has no label")));
            }
            if self.split[i] == Split::LabeledTrain && self.labels[i].is_none() {
                return Err(Error::invalid(format!("labeled row {i} has no label")));
            }
        }
        Ok(())
    }
}

/// Class-balanced synthetic two-view data.
///
/// Each view has its own class means on the unit sphere; a sample's view
/// is its class mean plus isotropic Gaussian noise drawn independently per
/// view, so the views are conditionally independent given the label.
/// Features are rounded to single precision so that the on-disk formats
/// reproduce them exactly.
pub fn gen_synthetic_two_view(
    n: usize,
    classes: usize,
    d1: usize,
    d2: usize,
    view_noise: f64,
    label_noise: f64,
    seed: u64,
) -> Result<TwoViewDataset> {
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!("n = {n} is smaller than classes = {classes}")));
    }
    if !(view_noise >= 0.0) || !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::invalid("noise levels must be non-negative (label noise ≤ 1)"));
    }
    if d1 == 0 || d2 == 0 {
        return Err(Error::invalid("view dimensions must be positive"));
    }
    let sphere = |d: usize, r: &mut rng::Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    };
    let mut mean_rng = rng::substream(seed, &[1]);
    let means1: Vec<Vec<f64>> = (0..classes).map(|_| sphere(d1, &mut mean_rng)).collect();
    let means2: Vec<Vec<f64>> = (0..classes).map(|_| sphere(d2, &mut mean_rng)).collect();

    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut noise1 = rng::substream(seed, &[2]);
    let mut noise2 = rng::substream(seed, &[3]);
    let draw = |means: &[Vec<f64>], r: &mut rng::Rng, y: usize| -> Vec<f64> {
        means[y]
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(r);
                (m + view_noise * e) as f32 as f64
            })
            .collect()
    };
    let mut v1 = Vec::with_capacity(n * d1);
    let mut v2 = Vec::with_capacity(n * d2);
    for &y in &labels {
        v1.extend(draw(&means1, &mut noise1, y));
        v2.extend(draw(&means2, &mut noise2, y));
    }

    let mut observed: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    let flips = (label_noise * n as f64).round() as usize;
    if flips > 0 {
        let mut r = rng::substream(seed, &[4]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        for &i in &order[..flips] {
            let shift = r.random_range(1..classes);
            observed[i] = Some((labels[i] + shift) % classes);
        }
    }

    let mut ds = TwoViewDataset::new(
        DenseMatrix::from_vec(n, d1, v1)?,
        DenseMatrix::from_vec(n, d2, v2)?,
        observed,
        classes,
    )?;
    ds.true_labels = labels.into_iter().map(Some).collect();
    Ok(ds)
}

/// How many rows per class receive a label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelBudget {
    /// Fraction of the non-test rows of each class.
    Fraction(f64),
    /// Fixed count per class.
    PerClass(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub labeled: LabelBudget,
    /// Share of each class's labeled rows held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

/// Stratified labeled/validation/unlabeled assignment with no test split.
pub fn make_splits(
    ds: &TwoViewDataset,
    labeled_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<TwoViewDataset> {
    make_splits_with(
        ds,
        &SplitPlan {
            test_fraction: 0.0,
            labeled: LabelBudget::Fraction(labeled_fraction),
            validation_fraction,
            seed,
        },
    )
}

/// Stratified split; rows without an observed label stay unlabeled.
///
/// Per class: a shuffled share goes to test, then the label budget is taken
/// from the remainder, of which `max(1, round(validation_fraction · n))`
/// rows become validation. Everything else is unlabeled.
pub fn make_splits_with(ds: &TwoViewDataset, plan: &SplitPlan) -> Result<TwoViewDataset> {
    if !(0.0..1.0).contains(&plan.test_fraction) {
        return Err(Error::invalid("test fraction must lie in [0, 1)"));
    }
    if !(plan.validation_fraction > 0.0 && plan.validation_fraction < 1.0) {
        return Err(Error::invalid("validation fraction must lie in (0, 1)"));
    }
    if let LabelBudget::Fraction(f) = plan.labeled {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid("labeled fraction must lie in (0, 1]"));
        }
    }
    let mut out = ds.clone();
    for (i, s) in out.split.iter_mut().enumerate() {
        *s = if ds.labels[i].is_some() { Split::LabeledTrain } else { Split::Unlabeled };
    }
    for c in 0..ds.classes {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == Some(c)).collect();
        rows.shuffle(&mut rng::substream(plan.seed, &[0x5EED, c as u64]));
        let n_test = (plan.test_fraction * rows.len() as f64).round() as usize;
        let rest = rows.len() - n_test;
        let n_lab = match plan.labeled {
            LabelBudget::Fraction(f) => (f * rest as f64).round() as usize,
            LabelBudget::PerClass(k) => k.min(rest),
        };
        if n_lab == 0 {
            return Err(Error::invalid(format!("class {c} has no labeled rows")));
        }
        let n_val = ((plan.validation_fraction * n_lab as f64).round() as usize).clamp(1, n_lab);
        for (k, &i) in rows.iter().enumerate() {
            out.split[i] = if k < n_test {
                Split::Test
            } else if k < n_test + n_val {
                Split::Validation
            } else if k < n_test + n_lab {
                Split::LabeledTrain
            } else {
                Split::Unlabeled
            };
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub labeled_batch: usize,
    /// Unlabeled rows per labeled row.
    pub mu: usize,
    /// Cap on validation rows handed to the teacher each step.
    pub validation_batch: usize,
    /// Interleave per-class permutations so labeled batches are balanced.
    pub class_balanced: bool,
    pub seed: u64,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            labeled_batch: 64,
            mu: 7,
            validation_batch: 64,
            class_balanced: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Epoch-based iterator: an epoch is one pass over the unlabeled rows,
/// reshuffled per epoch; labeled rows cycle through their own permutations.
#[derive(Clone, Debug)]
pub struct BatchIter {
    plan: BatchPlan,
    labeled: Vec<usize>,
    labeled_by_class: Vec<Vec<usize>>,
    unlabeled: Vec<usize>,
    validation: Vec<usize>,
    epoch: usize,
    step_in_epoch: usize,
    global_step: u64,
    epoch_perm: Vec<usize>,
    lab_perm: Vec<usize>,
    lab_cycle: u64,
    lab_pos: usize,
}

const TAG_EPOCH: u64 = 0xE0;
const TAG_LABELED: u64 = 0x1A;
const TAG_VALIDATION: u64 = 0x7A;

impl BatchIter {
    pub fn new(ds: &TwoViewDataset, plan: BatchPlan) -> Result<Self> {
        if plan.labeled_batch == 0 || plan.mu == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        let labeled = ds.rows(Split::LabeledTrain);
        let unlabeled = ds.rows(Split::Unlabeled);
        let validation = ds.rows(Split::Validation);
        if labeled.is_empty() || unlabeled.is_empty() {
            return Err(Error::invalid("labeled and unlabeled splits must be nonempty"));
        }
        let mut labeled_by_class = vec![Vec::new(); ds.classes()];
        for &i in &labeled {
            if let Some(y) = ds.label(i) {
                labeled_by_class[y].push(i);
            }
        }
        let mut it = Self {
            plan,
            labeled,
            labeled_by_class,
            unlabeled,
            validation,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            epoch_perm: Vec::new(),
            lab_perm: Vec::new(),
            lab_cycle: 0,
            lab_pos: 0,
        };
        it.reshuffle_epoch();
        it.reshuffle_labeled();
        Ok(it)
    }

    fn reshuffle_epoch(&mut self) {
        self.epoch_perm = self.unlabeled.clone();
        self.epoch_perm
            .shuffle(&mut rng::substream(self.plan.seed, &[TAG_EPOCH, self.epoch as u64]));
    }

    fn reshuffle_labeled(&mut self) {
        self.lab_pos = 0;
        if !self.plan.class_balanced {
            self.lab_perm = self.labeled.clone();
            self.lab_perm
                .shuffle(&mut rng::substream(self.plan.seed, &[TAG_LABELED, self.lab_cycle]));
            return;
        }
        let per_class: Vec<Vec<usize>> = self
            .labeled_by_class
            .iter()
            .enumerate()
            .map(|(c, rows)| {
                let mut rows = rows.clone();
                rows.shuffle(&mut rng::substream(self.plan.seed, &[TAG_LABELED, self.lab_cycle, c as u64]));
                rows
            })
            .collect();
        let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
        self.lab_perm = (0..longest)
            .flat_map(|k| per_class.iter().filter_map(move |rows| rows.get(k).copied()))
            .collect();
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.plan.labeled_batch * self.plan.mu
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.unlabeled.len().div_ceil(self.unlabeled_batch())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next step's batches. The final step of an epoch may be short, in
    /// which case the labeled batch shrinks to keep the ratio at `μ`.
    pub fn next_batch(&mut self) -> Batch {
        let nu = self.unlabeled_batch();
        let start = self.step_in_epoch * nu;
        let end = (start + nu).min(self.epoch_perm.len());
        let unlabeled = self.epoch_perm[start..end].to_vec();
        let n_lab = if unlabeled.len() == nu {
            self.plan.labeled_batch
        } else {
            unlabeled.len().div_ceil(self.plan.mu)
        };
        let mut labeled = Vec::with_capacity(n_lab);
        while labeled.len() < n_lab {
            if self.lab_pos == self.lab_perm.len() {
                self.lab_cycle += 1;
                self.reshuffle_labeled();
            }
            labeled.push(self.lab_perm[self.lab_pos]);
            self.lab_pos += 1;
        }
        let validation = if self.validation.len() <= self.plan.validation_batch {
            self.validation.clone()
        } else {
            let mut v = self.validation.clone();
            v.shuffle(&mut rng::substream(self.plan.seed, &[TAG_VALIDATION, self.global_step]));
            v.truncate(self.plan.validation_batch);
            v.sort_unstable();
            v
        };
        let batch = Batch {
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            labeled,
            unlabeled,
            validation,
        };
        self.global_step += 1;
        self.step_in_epoch += 1;
        if end == self.epoch_perm.len() {
            self.epoch += 1;
            self.step_in_epoch = 0;
            self.reshuffle_epoch();
        }
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_views_equal_class_means() {
        let ds = gen_synthetic_two_view(40, 4, 5, 3, 0.0, 0.0, 1).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                if ds.true_label(i) == ds.true_label(j) {
                    assert_eq!(ds.x(0, i), ds.x(0, j));
                    assert_eq!(ds.x(1, i), ds.x(1, j));
                }
            }
        }
        let norm: f64 = ds.x(0, 0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic_two_view(100, 3, 4, 4, 0.5, 0.1, 9).unwrap();
        let b = gen_synthetic_two_view(100, 3, 4, 4, 0.5, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_two_view(100, 3, 4, 4, 0.5, 0.1, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_noise_flips_exact_fraction() {
        let ds = gen_synthetic_two_view(200, 4, 2, 2, 0.3, 0.2, 5).unwrap();
        let flipped = (0..200)
            .filter(|&i| ds.observed_labels()[i] != ds.true_label(i))
            .count();
        assert_eq!(flipped, 40);
    }

    #[test]
    fn synthetic_rejects_bad_args() {
        assert!(gen_synthetic_two_view(3, 4, 2, 2, 0.1, 0.0, 0).is_err());
        assert!(gen_synthetic_two_view(10, 1, 2, 2, 0.1, 0.0, 0).is_err());
        assert!(gen_synthetic_two_view(10, 2, 2, 2, -0.1, 0.0, 0).is_err());
    }

    #[test]
    fn full_label_fraction_leaves_nothing_unlabeled() {
        let ds = gen_synthetic_two_view(100, 4, 3, 3, 0.5, 0.0, 2).unwrap();
        let s = make_splits(&ds, 1.0, 0.1, 3).unwrap();
        assert_eq!(s.count(Split::Unlabeled), 0);
        assert!(s.count(Split::Validation) >= 4);
    }

    #[test]
    fn validation_is_stratified() {
        let ds = gen_synthetic_two_view(400, 4, 3, 3, 0.5, 0.0, 2).unwrap();
        let s = make_splits(&ds, 0.5, 0.1, 3).unwrap();
        for c in 0..4 {
            let lab = (0..400)
                .filter(|&i| s.true_label(i) == Some(c))
                .filter(|&i| matches!(s.split_of(i), Split::LabeledTrain | Split::Validation))
                .count();
            let val = (0..400)
                .filter(|&i| s.true_label(i) == Some(c) && s.split_of(i) == Split::Validation)
                .count();
            assert!((val as f64 - 0.1 * lab as f64).abs() <= 1.0);
        }
        assert_eq!(s, make_splits(&ds, 0.5, 0.1, 3).unwrap());
    }

    #[test]
    fn per_class_budget_with_test_split() {
        let ds = gen_synthetic_two_view(3040, 4, 3, 3, 0.5, 0.0, 2).unwrap();
        let plan = SplitPlan {
            test_fraction: 1000.0 / 3040.0,
            labeled: LabelBudget::PerClass(10),
            validation_fraction: 0.1,
            seed: 1,
        };
        let s = make_splits_with(&ds, &plan).unwrap();
        assert_eq!(s.count(Split::LabeledTrain) + s.count(Split::Validation), 40);
        assert_eq!(s.count(Split::Validation), 4);
        assert_eq!(s.count(Split::Test), 1000);
        assert_eq!(s.count(Split::Unlabeled), 2000);
        for i in s.rows(Split::Unlabeled) {
            assert_eq!(s.label(i), None);
            assert!(s.true_label(i).is_some());
        }
    }

    #[test]
    fn class_without_labels_is_an_error() {
        let ds = gen_synthetic_two_view(8, 4, 2, 2, 0.1, 0.0, 0).unwrap();
        assert!(make_splits(&ds, 0.1, 0.1, 0).is_err());
    }

    #[test]
    fn batches_follow_the_plan() {
        let ds = gen_synthetic_two_view(1000, 4, 3, 3, 0.5, 0.0, 2).unwrap();
        let s = make_splits(&ds, 0.2, 0.1, 3).unwrap();
        let plan = BatchPlan { labeled_batch: 8, mu: 7, validation_batch: 10, class_balanced: false, seed: 4 };
        let mut it = BatchIter::new(&s, plan.clone()).unwrap();
        let nu = s.count(Split::Unlabeled);
        let mut seen = vec![0usize; s.len()];
        let steps = it.steps_per_epoch();
        for k in 0..steps {
            let b = it.next_batch();
            assert_eq!(b.epoch, 0);
            assert_eq!(b.step_in_epoch, k);
            assert!(b.unlabeled.len() <= 56);
            assert_eq!(b.labeled.len(), b.unlabeled.len().div_ceil(7));
            for &i in &b.unlabeled {
                seen[i] += 1;
                assert_eq!(s.split_of(i), Split::Unlabeled);
            }
            for &i in b.labeled.iter().chain(&b.unlabeled) {
                assert_ne!(s.split_of(i), Split::Validation);
            }
            assert!(b.validation.len() <= 10);
        }
        assert_eq!(seen.iter().sum::<usize>(), nu);
        assert!(s.rows(Split::Unlabeled).iter().all(|&i| seen[i] == 1));
        assert_eq!(it.epoch(), 1);

        let mut a = BatchIter::new(&s, plan.clone()).unwrap();
        let mut b = BatchIter::new(&s, plan).unwrap();
        for _ in 0..3 * steps {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn default_plan_ratio() {
        let ds = gen_synthetic_two_view(3000, 4, 3, 3, 0.5, 0.0, 2).unwrap();
        let s = make_splits(&ds, 0.1, 0.1, 3).unwrap();
        let mut it = BatchIter::new(&s, BatchPlan::default()).unwrap();
        let b = it.next_batch();
        assert_eq!(b.labeled.len(), 64);
        assert_eq!(b.unlabeled.len(), 448);
    }

    #[test]
    fn class_balanced_batches_cycle_through_classes() {
        let ds = gen_synthetic_two_view(800, 4, 3, 3, 0.5, 0.0, 5).unwrap();
        let s = make_splits_with(
            &ds,
            &SplitPlan {
                test_fraction: 0.0,
                labeled: LabelBudget::PerClass(12),
                validation_fraction: 0.1,
                seed: 1,
            },
        )
        .unwrap();
        let plan = BatchPlan { labeled_batch: 8, mu: 7, validation_batch: 4, class_balanced: true, seed: 2 };
        let mut it = BatchIter::new(&s, plan).unwrap();
        for _ in 0..20 {
            let b = it.next_batch();
            if b.labeled.len() < 8 {
                continue;
            }
            let mut counts = [0usize; 4];
            b.labeled.iter().for_each(|&i| counts[s.label(i).unwrap()] += 1);
            assert_eq!(counts, [2; 4], "{:?}", b.labeled);
        }
    }
}
