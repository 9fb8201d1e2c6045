//! Predictive statistics from MC-dropout samples and pseudo-label filters.

use serde::{Deserialize, Serialize};

use crate::numerics::{entropy_unchecked, ProbVector};
use crate::{Error, Result};

/// Summary of `K` stochastic predictions for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub mean: ProbVector,
    /// `H[p̄]`
    pub predictive_entropy: f64,
    /// `(1/K) Σ H[p_k]`
    pub expected_entropy: f64,
    /// Clamped at zero.
    pub mi: f64,
    pub pseudo_label: usize,
}

fn check_samples(samples: &[ProbVector]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("need at least one sample"))?;
    let c = first.len();
    if samples.iter().any(|s| s.len() != c) {
        return Err(Error::invalid("samples have inconsistent class counts"));
    }
    Ok(c)
}

/// Elementwise mean of the sampled distributions, accumulated as offsets
/// from the first sample so identical samples reproduce it exactly.
pub fn predictive_mean(samples: &[ProbVector]) -> Result<ProbVector> {
    check_samples(samples)?;
    let k = samples.len() as f64;
    let first = samples[0].as_slice();
    let mut offset = vec![0.0; first.len()];
    for s in &samples[1..] {
        offset
            .iter_mut()
            .zip(s.as_slice().iter().zip(first))
            .for_each(|(o, (p, f))| *o += p - f);
    }
    let mean = first.iter().zip(&offset).map(|(f, o)| f + o / k).collect();
    ProbVector::new(mean)
}

/// Predictive entropy minus expected per-sample entropy.
pub fn mutual_information(samples: &[ProbVector]) -> Result<UncertaintyEstimate> {
    let mean = predictive_mean(samples)?;
    let predictive_entropy = mean.entropy();
    let expected_entropy = samples
        .iter()
        .map(|s| entropy_unchecked(s.as_slice()))
        .sum::<f64>()
        / samples.len() as f64;
    let mi = (predictive_entropy - expected_entropy).max(0.0);
    let pseudo_label = mean.argmax();
    Ok(UncertaintyEstimate {
        mean,
        predictive_entropy,
        expected_entropy,
        mi,
        pseudo_label,
    })
}

/// Which side of `τ_MI` a pseudo-label must fall on to be accepted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterDirection {
    /// Accept `mi > τ`.
    #[default]
    Above,
    /// Accept `mi < τ`.
    Below,
}

impl FilterDirection {
    /// Strict comparison; ties at `τ` are rejected either way.
    #[inline]
    pub fn accepts(self, mi: f64, tau: f64) -> bool {
        match self {
            FilterDirection::Above => mi > tau,
            FilterDirection::Below => mi < tau,
        }
    }

    /// Signed margin, positive on the accepting side.
    #[inline]
    pub fn margin(self, mi: f64, tau: f64) -> f64 {
        match self {
            FilterDirection::Above => mi - tau,
            FilterDirection::Below => tau - mi,
        }
    }
}

impl std::str::FromStr for FilterDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "above" => Ok(Self::Above),
            "below" => Ok(Self::Below),
            other => Err(Error::invalid(format!("unknown filter direction {other:?}"))),
        }
    }
}

/// Accepted indices plus the rejected fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub accepted: Vec<usize>,
    pub mask_rate: f64,
}

impl FilterResult {
    fn from_accepted(accepted: Vec<usize>, n: usize) -> Self {
        let mask_rate = if n == 0 {
            0.0
        } else {
            1.0 - accepted.len() as f64 / n as f64
        };
        Self {
            accepted,
            mask_rate,
        }
    }
}

pub fn mi_filter(
    estimates: &[UncertaintyEstimate],
    tau_mi: f64,
    direction: FilterDirection,
) -> FilterResult {
    let accepted = estimates
        .iter()
        .enumerate()
        .filter(|(_, e)| direction.accepts(e.mi, tau_mi))
        .map(|(i, _)| i)
        .collect();
    FilterResult::from_accepted(accepted, estimates.len())
}

/// Confidence-threshold baseline: accept when `max p̄ ≥ τ_conf`.
pub fn confidence_filter(estimates: &[UncertaintyEstimate], tau_conf: f64) -> FilterResult {
    let accepted = estimates
        .iter()
        .enumerate()
        .filter(|(_, e)| e.mean.max() >= tau_conf)
        .map(|(i, _)| i)
        .collect();
    FilterResult::from_accepted(accepted, estimates.len())
}

/// Fraction of accepted pseudo-labels that disagree with the true label.
///
/// Rows without a known label are skipped; `None` when nothing is left.
pub fn impurity(
    accepted: &[usize],
    pseudo_labels: &[usize],
    true_labels: &[Option<usize>],
) -> Option<f64> {
    let (wrong, seen) = accepted
        .iter()
        .filter_map(|&i| true_labels[i].map(|t| (pseudo_labels[i] != t) as usize))
        .fold((0usize, 0usize), |(w, n), bad| (w + bad, n + 1));
    (seen > 0).then(|| wrong as f64 / seen as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use crate::rng;
    use rand::Rng as _;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn est_with_mi(mi: f64) -> UncertaintyEstimate {
        UncertaintyEstimate {
            mean: pv(&[0.5, 0.5]),
            predictive_entropy: mi,
            expected_entropy: 0.0,
            mi,
            pseudo_label: 0,
        }
    }

    #[test]
    fn mean_examples() {
        let a = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(predictive_mean(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let m = predictive_mean(&[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]).unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.5]);
        assert!(predictive_mean(&[]).is_err());
        assert!(predictive_mean(&[pv(&[0.5, 0.5]), pv(&[0.2, 0.3, 0.5])]).is_err());
    }

    #[test]
    fn mean_matches_compensated_recompute() {
        let mut r = rng::seeded(3);
        let samples: Vec<ProbVector> = (0..5)
            .map(|_| softmax(&(0..4).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let m = predictive_mean(&samples).unwrap();
        for c in 0..4 {
            // Neumaier summation as the higher-precision reference
            let (mut s, mut comp) = (0.0f64, 0.0f64);
            for p in &samples {
                let v = p.as_slice()[c];
                let t = s + v;
                comp += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
                s = t;
            }
            assert!((m.as_slice()[c] - (s + comp) / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mi_examples() {
        let a = pv(&[0.1, 0.6, 0.3]);
        let e = mutual_information(&vec![a; 5]).unwrap();
        assert!(e.mi.abs() < 1e-12);
        assert_eq!(e.pseudo_label, 1);

        let e = mutual_information(&[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]).unwrap();
        assert!((e.mi - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(e.pseudo_label, 0, "ties break to the lowest index");
    }

    #[test]
    fn filter_examples() {
        let ests: Vec<_> = [0.0, 0.01, 0.05, 0.2, 0.3].iter().map(|&m| est_with_mi(m)).collect();
        let f = mi_filter(&ests, 0.0, FilterDirection::Above);
        assert_eq!(f.accepted, vec![1, 2, 3, 4]);
        let f = mi_filter(&ests, 0.05, FilterDirection::Above);
        assert_eq!(f.accepted, vec![3, 4], "tie at τ rejected");
        assert!((f.mask_rate - 0.6).abs() < 1e-15);
        let f = mi_filter(&ests, 0.05, FilterDirection::Below);
        assert_eq!(f.accepted, vec![0, 1]);
    }

    #[test]
    fn confidence_filter_examples() {
        let mut u = est_with_mi(0.0);
        u.mean = ProbVector::uniform(4).unwrap();
        assert!(confidence_filter(&[u], 0.5).accepted.is_empty());
        let mut h = est_with_mi(0.0);
        h.mean = ProbVector::one_hot(4, 2).unwrap();
        for tau in [0.5, 0.95, 0.99, 1.0] {
            assert_eq!(confidence_filter(&[h.clone()], tau).accepted, vec![0]);
        }
    }

    #[test]
    fn impurity_counts_known_labels_only() {
        let acc = [0, 1, 2];
        let pseudo = [1, 2, 0, 3];
        let truth = [Some(1), Some(0), None, Some(3)];
        assert_eq!(impurity(&acc, &pseudo, &truth), Some(0.5));
        assert_eq!(impurity(&[2], &pseudo, &truth), None);
    }

    mod props {
        use super::super::*;
        use crate::numerics::softmax;
        use proptest::prelude::*;

        fn sample_set() -> impl Strategy<Value = Vec<ProbVector>> {
            (2usize..6, 1usize..8).prop_flat_map(|(c, k)| {
                prop::collection::vec(prop::collection::vec(-8.0f64..8.0, c), k)
                    .prop_map(|zs| zs.iter().map(|z| softmax(z).unwrap()).collect())
            })
        }

        proptest! {
            #[test]
            fn mi_is_bounded(samples in sample_set()) {
                let e = mutual_information(&samples).unwrap();
                let c = samples[0].len() as f64;
                prop_assert!(e.predictive_entropy >= e.expected_entropy - 1e-9);
                prop_assert!(e.mi >= 0.0 && e.mi <= c.ln() + 1e-12);
                prop_assert!(e.mi <= e.predictive_entropy + 1e-9);
            }

            #[test]
            fn raising_tau_shrinks_accepted_set(
                mis in prop::collection::vec(0.0f64..1.0, 0..40),
                t1 in 0.0f64..1.0,
                dt in 0.0f64..0.5,
            ) {
                let ests: Vec<_> = mis.iter().map(|&m| super::est_with_mi(m)).collect();
                let lo = mi_filter(&ests, t1, FilterDirection::Above).accepted;
                let hi = mi_filter(&ests, t1 + dt, FilterDirection::Above).accepted;
                prop_assert!(hi.iter().all(|i| lo.contains(i)));
                let brute: Vec<usize> = (0..mis.len()).filter(|&i| mis[i] > t1).collect();
                prop_assert_eq!(lo, brute);
            }
        }
    }
}
