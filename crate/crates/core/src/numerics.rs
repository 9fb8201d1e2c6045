//! Dense linear algebra and probability primitives.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the unit-sum check of a [`ProbVector`].
pub const SUM_TOL: f64 = 1e-9;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out[c] = bias[c] + Σ_r x[r] · M[r, c]`, i.e. `xᵀM + b`.
    pub fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(bias.len(), self.cols);
        let mut out = bias.to_vec();
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        out
    }

    /// `out[r] = Σ_c M[r, c] · y[c]`, i.e. `My`.
    pub fn mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), y)).collect()
    }

    /// `M += alpha · x yᵀ`.
    pub fn add_outer(&mut self, alpha: f64, x: &[f64], y: &[f64]) {
        for (r, &xr) in x.iter().enumerate() {
            let s = alpha * xr;
            if s == 0.0 {
                continue;
            }
            for (m, &yc) in self.row_mut(r).iter_mut().zip(y) {
                *m += s * yc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Categorical distribution over at least two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("a distribution needs at least 2 classes"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, at: usize) -> Result<Self> {
        if at >= classes {
            return Err(Error::invalid(format!("class {at} out of range {classes}")));
        }
        let mut p = vec![0.0; classes];
        p[at] = 1.0;
        Self::new(p)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.0)
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax without input validation.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(ProbVector(softmax_unchecked(logits)))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Entropy of a raw probability slice; rejects entries outside `[0, 1]`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(q) = p.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::invalid(format!("probability {q} outside [0, 1]")));
    }
    Ok(entropy_unchecked(p))
}

/// `-ln p[y]` with `p[y]` floored at [`PROB_FLOOR`].
pub fn cross_entropy(p: &ProbVector, y: usize) -> Result<f64> {
    let py = p
        .as_slice()
        .get(y)
        .ok_or_else(|| Error::invalid(format!("label {y} out of range {}", p.len())))?;
    Ok(-py.max(PROB_FLOOR).ln())
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::OracleFailure(format!(
                "non-finite evaluation along coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Logistic sigmoid, stable for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mean and sum of squared deviations, shifted by the first element so a
/// constant sequence gives exactly zero spread.
fn shifted_moments(xs: &[f64]) -> (f64, f64) {
    let x0 = xs[0];
    let n = xs.len() as f64;
    let dmean = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - x0 - dmean).powi(2)).sum::<f64>();
    (x0 + dmean, ss)
}

/// Population mean and variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (mean, ss) = shifted_moments(xs);
    (mean, ss / xs.len() as f64)
}

/// Sample mean and standard deviation (n − 1 denominator).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let (mean, ss) = shifted_moments(xs);
    if n == 1 {
        return (mean, 0.0);
    }
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_saturated() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.as_slice().iter().all(|&q| q == 0.25));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!(p.as_slice()[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // 40-digit evaluation of e^z / Σ e^z at z = (1, 2, 3)
        let want = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let u = ProbVector::uniform(4).unwrap();
        assert!((u.entropy() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(ProbVector::one_hot(3, 0).unwrap().entropy(), 0.0);
        let h = entropy(&[0.7, 0.3]).unwrap();
        assert!((h - 0.610_864_302_054_893_5).abs() < 1e-15);
        assert!(entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = ProbVector::one_hot(3, 1).unwrap();
        assert_eq!(cross_entropy(&p, 1).unwrap(), 0.0);
        assert!((cross_entropy(&p, 0).unwrap() - 27.631_021_115_928_547).abs() < 1e-9);
        let u = ProbVector::uniform(4).unwrap();
        for y in 0..4 {
            assert!((cross_entropy(&u, y).unwrap() - 4f64.ln()).abs() < 1e-15);
        }
        assert!(cross_entropy(&u, 4).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(
            finite_diff_grad(|x| 1.0 / x[0], &[0.0], 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-3),
            Err(Error::OracleFailure(_))
        ));
    }

    #[test]
    fn finite_diff_exact_on_quadratics() {
        // f(x) = 3x0² − 2x0x1 + x1 + 5
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1] + 5.0;
        let x = [0.7, -1.3];
        let g = finite_diff_grad(f, &x, 1e-3).unwrap();
        assert!((g[0] - (6.0 * 0.7 + 2.0 * 1.3)).abs() < 1e-9);
        assert!((g[1] - (-2.0 * 0.7 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.affine(&[1.0, 1.0], &[0.5, 0.5]), vec![4.5, 6.5]);
        assert_eq!(m.mul_vec(&[1.0, 0.0]), vec![1.0, 3.0]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                z in prop::collection::vec(-50.0f64..50.0, 2..8),
                c in -100.0f64..100.0,
            ) {
                let p = softmax(&z).unwrap();
                let s: f64 = p.as_slice().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let q = softmax(&shifted).unwrap();
                for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                prop_assert_eq!(p.argmax(), argmax(&z));
            }

            #[test]
            fn entropy_is_bounded(z in prop::collection::vec(-20.0f64..20.0, 2..10)) {
                let p = softmax(&z).unwrap();
                let h = p.entropy();
                prop_assert!(h >= 0.0);
                prop_assert!(h <= (z.len() as f64).ln() + 1e-12);
            }
        }
    }
}
