//! Numerically stable probability kernels.
//!
//! All temperature-scaled softmax variants subtract the running maximum
//! before exponentiating, so raw values of any magnitude are safe.

use std::ops::Deref;

use crate::error::{invalid, Result};
use crate::scalar::{sum_tolerance, Scalar};

/// Floor applied to the student probability inside `ln(p / q)`.
pub const KL_FLOOR: f64 = 1e-12;

/// A normalized discrete distribution: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<S>(Vec<S>);

impl<S: Scalar> ProbVector<S> {
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("probability vector must be non-empty"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= S::zero() && **p <= S::one())) {
            return Err(invalid(format!("probability {p} outside [0, 1]")));
        }
        let total: S = probs.iter().copied().sum();
        if (total - S::one()).abs() > sum_tolerance(probs.len()) {
            return Err(invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    /// Wraps values already known to be normalized (produced by a softmax).
    pub(crate) fn from_normalized(probs: Vec<S>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }
}

impl<S> Deref for ProbVector<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.0
    }
}

pub(crate) fn check_values<S: Scalar>(f: &[S]) -> Result<()> {
    if f.is_empty() {
        return Err(invalid("input must be non-empty"));
    }
    if let Some(i) = f.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite value at index {i}")));
    }
    Ok(())
}

pub(crate) fn check_temperature<S: Scalar>(t: S) -> Result<()> {
    if !(t.is_finite() && t > S::zero()) {
        return Err(invalid(format!("temperature must be positive and finite, got {t}")));
    }
    Ok(())
}

/// `ln Σ exp(x_i / t)` over the given indices, with max-subtraction.
///
/// Returns negative infinity when `indices` is empty.
pub fn log_sum_exp_over<S: Scalar>(f: &[S], indices: impl Iterator<Item = usize> + Clone, t: S) -> S {
    let max = indices
        .clone()
        .map(|i| f[i] / t)
        .fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = indices.map(|i| (f[i] / t - max).exp()).sum();
    max + sum.ln()
}

/// `ln Σ exp(x_i / t)` over the whole slice.
pub fn log_sum_exp<S: Scalar>(f: &[S], t: S) -> S {
    log_sum_exp_over(f, 0..f.len(), t)
}

pub(crate) fn softmax_unchecked<S: Scalar>(f: &[S], t: S) -> Vec<S> {
    let max = f.iter().map(|&v| v / t).fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = f.iter().map(|&v| (v / t - max).exp()).collect();
    let sum: S = out.iter().copied().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub(crate) fn log_softmax_unchecked<S: Scalar>(f: &[S], t: S) -> Vec<S> {
    let lse = log_sum_exp(f, t);
    f.iter().map(|&v| v / t - lse).collect()
}

/// Temperature softmax `exp(f_i/T) / Σ_k exp(f_k/T)`.
pub fn softmax<S: Scalar>(f: &[S], t: S) -> Result<ProbVector<S>> {
    check_values(f)?;
    check_temperature(t)?;
    Ok(ProbVector::from_normalized(softmax_unchecked(f, t)))
}

/// Element-wise log of [`softmax`], evaluated as `f_i/T - logsumexp(f/T)`.
pub fn log_softmax<S: Scalar>(f: &[S], t: S) -> Result<Vec<S>> {
    check_values(f)?;
    check_temperature(t)?;
    Ok(log_softmax_unchecked(f, t))
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)`.
///
/// Terms with `p_i = 0` contribute nothing; `q_i` is floored at [`KL_FLOOR`].
pub fn kl_divergence<S: Scalar>(p: &ProbVector<S>, q: &ProbVector<S>) -> Result<S> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "length mismatch: teacher {} vs student {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_floored(p, q))
}

pub(crate) fn kl_floored<S: Scalar>(p: &[S], q: &[S]) -> S {
    let floor = S::lit(KL_FLOOR);
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > S::zero())
        .map(|(&pi, &qi)| pi * (pi / qi.max(floor)).ln())
        .sum()
}

/// KL divergence from log-probabilities, `Σ exp(lp_i)(lp_i - lq_i)`.
///
/// Exact for any finite log-probabilities; no flooring is needed.
pub fn kl_from_log_probs<S: Scalar>(log_p: &[S], log_q: &[S]) -> S {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > S::zero() {
                p * (lp - lq)
            } else {
                S::zero()
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &x in p.iter() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[0.0, 2f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p.as_slice(), &[0.25, 0.5, 0.25][..], epsilon = 1e-15);
        let p = softmax(&[1000.0, 1000.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax::<f64>(&[], 1.0).is_err());
        assert!(softmax(&[0.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[0.0, f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[0.0, 1.0], 0.0).is_err());
        assert!(softmax(&[0.0, 1.0], -2.0).is_err());
        assert!(log_softmax(&[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let l = log_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(l[0], -(2f64.ln()), epsilon = 1e-15);
        let l = log_softmax(&[0.0, 2f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(l[0], 0.25f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(l[1], 0.5f64.ln(), epsilon = 1e-15);
        let l = log_softmax(&[-1000.0, 0.0], 1.0).unwrap();
        assert!(l.iter().all(|v: &f64| v.is_finite()));
        assert_abs_diff_eq!(l[0], -1000.0 - (-1000f64).exp().ln_1p(), epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], 0.0, epsilon = 1e-300);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&pv(&[0.5, 0.3, 0.2]), &pv(&[0.5, 0.3, 0.2])).unwrap(), 0.0);
        let v = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.25, 0.75])).unwrap();
        assert_abs_diff_eq!(v, 0.14384103622589042, epsilon = 1e-12);
        let v = kl_divergence(&pv(&[0.5, 0.3, 0.2]), &pv(&[0.4, 0.4, 0.2])).unwrap();
        assert_abs_diff_eq!(v, 0.02526715392157057, epsilon = 1e-12);
    }

    #[test]
    fn kl_handles_zero_mass() {
        // 0 · ln(0 / q) = 0
        let v = kl_divergence(&pv(&[0.0, 1.0]), &pv(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-15);
        // teacher mass where the student has none stays finite
        let v = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, 0.5 * (0.5 / KL_FLOOR).ln() + 0.5 * 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_length_mismatch() {
        assert!(kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::<f64>::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.25f32; 4]).is_ok());
    }

    #[test]
    fn temperature_limit_is_uniform() {
        let f: Vec<f64> = (0..10).map(|i| (i as f64) * 3.7 - 12.0).collect();
        let p = softmax(&f, 1e6).unwrap();
        for &x in p.iter() {
            assert_abs_diff_eq!(x, 0.1, epsilon = 1e-4);
        }
    }

    #[test]
    fn f32_kernels() {
        let p = softmax(&[0.0f32, 2f32.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-6);
        let kl = kl_from_log_probs(&log_softmax(&[1.0f32, 2.0], 1.0).unwrap(), &log_softmax(&[1.0f32, 2.0], 1.0).unwrap());
        assert_eq!(kl, 0.0);
    }
}
