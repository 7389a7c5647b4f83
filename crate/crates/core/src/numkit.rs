//! Numeric kernels shared by the decoding pipeline.
//!
//! Everything here is a pure function over slices. Entropy and divergences
//! are measured in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a [`ProbDist`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A normalized probability vector over the vocabulary, with its entropy cached.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
    entropy: f64,
}

impl ProbDist {
    /// Validates `probs` (non-empty, finite, non-negative, sums to 1).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::invalid(format!("bad probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self::from_normalized(probs))
    }

    /// Uniform distribution over `len` entries.
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("empty distribution"));
        }
        Ok(Self::from_normalized(vec![1.0 / len as f64; len]))
    }

    /// Rescales non-negative weights so they sum to one.
    pub fn normalize(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("weights cannot be normalized"));
        }
        Ok(Self::from_normalized(
            weights.into_iter().map(|w| w / total).collect(),
        ))
    }

    fn from_normalized(probs: Vec<f64>) -> Self {
        let entropy = entropy_of(&probs);
        Self { probs, entropy }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probs[index]
    }

    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    /// Largest probability in the distribution.
    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Straight-line least-squares fit `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

fn check_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logits"));
    }
    let mut max = f64::NEG_INFINITY;
    for &x in logits {
        if !x.is_finite() {
            return Err(Error::invalid(format!("non-finite logit {x}")));
        }
        max = max.max(x);
    }
    Ok(max)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbDist> {
    let max = check_logits(logits)?;
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbDist::from_normalized(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// Softmax of single-precision logits, widened to f64 before any arithmetic.
pub fn softmax_f32(logits: &[f32]) -> Result<ProbDist> {
    let wide: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
    softmax(&wide)
}

/// `x - logsumexp(x)` for each entry.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = check_logits(logits)?;
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|x| x - lse).collect())
}

fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    // rounding can leave a tiny negative value for one-hot inputs
    h.max(0.0)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(d: &ProbDist) -> f64 {
    d.entropy
}

/// KL(p || q) in nats. Terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}

fn jsd_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?;
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Jensen-Shannon divergence over the full vocabulary.
pub fn jsd(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    jsd_slices(&p.probs, &q.probs)
}

/// Jensen-Shannon divergence restricted to the union of the top-`k` supports
/// of `p` and `q`, each renormalized over that support.
pub fn jsd_truncated(p: &ProbDist, q: &ProbDist, k: usize) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let k = k.min(p.len());
    let mut support = top_k_indices(p, k)?;
    support.extend(top_k_indices(q, k)?);
    support.sort_unstable();
    support.dedup();
    let restrict = |d: &ProbDist| -> Vec<f64> {
        let sub: Vec<f64> = support.iter().map(|&i| d.probs[i]).collect();
        let total: f64 = sub.iter().sum();
        sub.into_iter().map(|x| x / total).collect()
    };
    jsd_slices(&restrict(p), &restrict(q))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The `k` most probable indices in descending probability, ties broken by
/// ascending index.
pub fn top_k_indices(d: &ProbDist, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > d.len() {
        return Err(Error::invalid(format!(
            "top-k of {k} out of range for vocabulary {}",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d.probs[b].total_cmp(&d.probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// True when the series never decreases or never increases. Ties count as
/// monotone.
pub fn is_monotonic(series: &[f64]) -> Result<bool> {
    if series.len() < 2 {
        return Err(Error::invalid("monotonicity needs at least two points"));
    }
    let non_decreasing = series.windows(2).all(|w| w[0] <= w[1]);
    let non_increasing = series.windows(2).all(|w| w[0] >= w[1]);
    Ok(non_decreasing || non_increasing)
}

/// Closed-form ordinary least squares on mean-centred data.
pub fn ols_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("regression needs at least two points"));
    }
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit);
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: y_mean - slope * x_mean,
    })
}

pub fn ols_predict(fit: &LinearFit, x: f64) -> f64 {
    fit.slope * x + fit.intercept
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn dist(p: &[f64]) -> ProbDist {
        ProbDist::new(p.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap().probs(), &[0.25; 4]);

        let sat = softmax(&[1000.0, 0.0]).unwrap();
        assert!(close(sat.get(0), 1.0, 1e-12));
        assert!(close(sat.get(1), 0.0, 1e-12));

        let two = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(two.get(0), 2.0 / 3.0, 1e-15));
        assert!(close(two.get(1), 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[f64::NEG_INFINITY, 0.0]).is_err());
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let logits = [1.5, -0.25, 3.0, 0.0];
        let p = softmax(&logits).unwrap();
        for (lp, q) in log_softmax(&logits).unwrap().iter().zip(p.probs()) {
            assert!(close(lp.exp(), *q, 1e-15));
        }
    }

    #[test]
    fn entropy_examples() {
        assert!(close(entropy(&dist(&[0.25; 4])), 4f64.ln(), 1e-15));
        assert_eq!(entropy(&dist(&[0.0, 1.0, 0.0])), 0.0);
        assert!(close(entropy(&dist(&[0.5, 0.5, 0.0, 0.0])), LN_2, 1e-15));
    }

    #[test]
    fn jsd_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        assert!(close(jsd(&a, &b).unwrap(), LN_2, 1e-15));
        // ½[½ln(2/3) + ½ln 2] + ½ln(4/3)
        let v = jsd(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap();
        assert!(close(v, 0.215_762_4, 1e-6), "{v}");
    }

    #[test]
    fn jsd_length_mismatch() {
        let e = jsd(&dist(&[1.0]), &dist(&[0.5, 0.5])).unwrap_err();
        assert!(matches!(e, Error::InvalidInput(_)));
    }

    #[test]
    fn truncated_jsd_full_support_matches_full() {
        let p = dist(&[0.1, 0.2, 0.3, 0.4]);
        let q = dist(&[0.4, 0.3, 0.2, 0.1]);
        let full = jsd(&p, &q).unwrap();
        assert!(close(jsd_truncated(&p, &q, 4).unwrap(), full, 1e-15));
        assert!(jsd_truncated(&p, &q, 1).unwrap() > 0.0);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&dist(&[0.1, 0.7, 0.2]), 2).unwrap(), [1, 2]);
        assert_eq!(top_k_indices(&dist(&[0.25; 4]), 2).unwrap(), [0, 1]);
        assert_eq!(top_k_indices(&dist(&[0.0, 0.0, 0.0, 1.0]), 1).unwrap(), [3]);
        assert!(top_k_indices(&dist(&[0.5, 0.5]), 0).is_err());
        assert!(top_k_indices(&dist(&[0.5, 0.5]), 3).is_err());
    }

    #[test]
    fn monotonic_examples() {
        assert!(is_monotonic(&[0.1, 0.2, 0.3]).unwrap());
        assert!(!is_monotonic(&[0.1, 0.3, 0.2]).unwrap());
        assert!(is_monotonic(&[0.3, 0.3, 0.2]).unwrap());
        assert!(is_monotonic(&[0.4, 0.4]).unwrap());
        assert!(is_monotonic(&[0.1]).is_err());
    }

    #[test]
    fn ols_examples() {
        let xs = [1.0, 2.0, 3.0];
        let fit = ols_fit(&xs, &[0.1, 0.2, 0.3]).unwrap();
        assert!(close(fit.slope, 0.1, 1e-12) && close(fit.intercept, 0.0, 1e-12));

        let flat = ols_fit(&xs, &[0.2, 0.2, 0.2]).unwrap();
        assert!(close(flat.slope, 0.0, 1e-15) && close(flat.intercept, 0.2, 1e-15));

        // cov(x, y) / var(x) = 0.3 / 2; intercept = 0.4/3 - 2 * 0.15
        let bent = ols_fit(&xs, &[0.0, 0.1, 0.3]).unwrap();
        assert!(close(bent.slope, 0.15, 1e-12));
        assert!(close(bent.intercept, -1.0 / 6.0, 1e-12));
        assert!(close(ols_predict(&bent, 4.0), 0.6 - 1.0 / 6.0, 1e-12));
    }

    #[test]
    fn ols_predict_examples() {
        let a = LinearFit {
            slope: 0.1,
            intercept: 0.0,
        };
        assert!(close(ols_predict(&a, 5.0), 0.5, 1e-15));
        let b = LinearFit {
            slope: 0.0,
            intercept: 0.2,
        };
        assert_eq!(ols_predict(&b, 100.0), 0.2);
    }

    #[test]
    fn ols_errors() {
        assert!(matches!(
            ols_fit(&[2.0, 2.0, 2.0], &[0.1, 0.2, 0.3]),
            Err(Error::DegenerateFit)
        ));
        assert!(ols_fit(&[1.0], &[0.1]).is_err());
        assert!(ols_fit(&[1.0, 2.0], &[0.1]).is_err());
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
        assert!(ProbDist::new(vec![0.5, 0.5 + 5e-7]).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-50.0f64..50.0, 1..max_len)
        }

        fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..40).prop_flat_map(|n| {
                (
                    prop::collection::vec(-20.0f64..20.0, n),
                    prop::collection::vec(-20.0f64..20.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn softmax_is_a_distribution(l in logits(200)) {
                let d = softmax(&l).unwrap();
                prop_assert!(d.probs().iter().all(|p| *p >= 0.0));
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
            }

            #[test]
            fn constant_logits_have_max_entropy(c in -100.0f64..100.0, n in 1usize..300) {
                let d = softmax(&vec![c; n]).unwrap();
                prop_assert!((entropy(&d) - (n as f64).ln()).abs() < 1e-9);
            }

            #[test]
            fn jsd_symmetric_and_bounded((a, b) in pair()) {
                let p = softmax(&a).unwrap();
                let q = softmax(&b).unwrap();
                let pq = jsd(&p, &q).unwrap();
                prop_assert_eq!(pq, jsd(&q, &p).unwrap());
                prop_assert!((0.0..=LN_2).contains(&pq));
                prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
            }

            #[test]
            fn ols_recovers_exact_lines(
                slope in -1.0f64..1.0,
                intercept in -1.0f64..1.0,
                start in 0i32..40,
                len in 2usize..12,
            ) {
                let xs: Vec<f64> = (0..len).map(|i| f64::from(start) + i as f64).collect();
                let ys: Vec<f64> = xs.iter().map(|x| slope * x + intercept).collect();
                let fit = ols_fit(&xs, &ys).unwrap();
                prop_assert!((fit.slope - slope).abs() < 1e-9);
                prop_assert!((fit.intercept - intercept).abs() < 1e-9);
            }

            #[test]
            fn top_k_matches_brute_force(l in logits(60), k_frac in 0.0f64..1.0) {
                let d = softmax(&l).unwrap();
                let k = 1 + ((d.len() - 1) as f64 * k_frac) as usize;
                let top = top_k_indices(&d, k).unwrap();
                prop_assert!(top.windows(2).all(|w| d.get(w[0]) >= d.get(w[1])));
                // every excluded index is no more probable than the weakest kept one
                let weakest = d.get(*top.last().unwrap());
                for i in (0..d.len()).filter(|i| !top.contains(i)) {
                    prop_assert!(d.get(i) <= weakest);
                }
            }
        }
    }
}
