//! Strong/weak correlation clusters and the probabilities derived from them.
//!
//! A [`Partition`] splits the indices `0..C` into a strong cluster `S` and
//! its complement `W`. Partitions are always built from teacher values and
//! then applied unchanged to the student.

use crate::error::{invalid, Error, Result};
use crate::prob::{check_temperature, check_values, log_sum_exp, log_sum_exp_over, softmax_unchecked, ProbVector};
use crate::scalar::Scalar;

/// Tolerance of [`product_identity_check`].
pub const PRODUCT_IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    strong: Vec<usize>,
    weak: Vec<usize>,
    in_strong: Vec<bool>,
}

impl Partition {
    /// Builds a partition of `0..total` from a strong-cluster index set.
    pub fn from_strong(strong: impl IntoIterator<Item = usize>, total: usize) -> Result<Self> {
        let mut in_strong = vec![false; total];
        for i in strong {
            if i >= total {
                return Err(invalid(format!("index {i} out of range for {total} entries")));
            }
            in_strong[i] = true;
        }
        Ok(Self::from_mask(in_strong))
    }

    fn from_mask(in_strong: Vec<bool>) -> Self {
        let (strong, weak): (Vec<usize>, Vec<usize>) =
            (0..in_strong.len()).partition(|&i| in_strong[i]);
        Self { strong, weak, in_strong }
    }

    /// `S = {target}`, `W` = every other class.
    pub fn single_label(classes: usize, target: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {classes}")));
        }
        if target >= classes {
            return Err(invalid(format!("target {target} out of range for {classes} classes")));
        }
        Self::from_strong([target], classes)
    }

    /// `S` = indices of the `k` largest values; ties go to the lower index.
    pub fn top_k<S: Scalar>(values: &[S], k: usize) -> Result<Self> {
        check_values(values)?;
        let c = values.len();
        if k == 0 || k >= c {
            return Err(invalid(format!("k must lie in [1, {}], got {k}", c.saturating_sub(1))));
        }
        let mut order: Vec<usize> = (0..c).collect();
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite values"));
        Self::from_strong(order[..k].iter().copied(), c)
    }

    pub fn strong(&self) -> &[usize] {
        &self.strong
    }

    pub fn weak(&self) -> &[usize] {
        &self.weak
    }

    pub fn total(&self) -> usize {
        self.in_strong.len()
    }

    pub fn is_strong(&self, i: usize) -> bool {
        self.in_strong[i]
    }

    pub fn is_two_sided(&self) -> bool {
        !self.strong.is_empty() && !self.weak.is_empty()
    }

    pub(crate) fn require_two_sided(&self) -> Result<()> {
        if self.is_two_sided() {
            Ok(())
        } else {
            Err(Error::DegeneratePartition(format!(
                "strong cluster has {} and weak cluster {} entries; both must be non-empty",
                self.strong.len(),
                self.weak.len()
            )))
        }
    }

    pub(crate) fn require_covers<S>(&self, f: &[S]) -> Result<()> {
        if f.len() != self.total() {
            return Err(invalid(format!(
                "partition covers {} entries but input has {}",
                self.total(),
                f.len()
            )));
        }
        Ok(())
    }
}

/// Mass on the strong and weak clusters, `b = [p_s, p_w]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryProb<S> {
    pub strong: S,
    pub weak: S,
}

impl<S: Scalar> BinaryProb<S> {
    pub fn new(strong: S, weak: S) -> Result<Self> {
        ProbVector::new(vec![strong, weak])?;
        Ok(Self { strong, weak })
    }
}

/// Distributions renormalized within each cluster; `None` for an empty cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProbs<S> {
    pub strong: Option<ProbVector<S>>,
    pub weak: Option<ProbVector<S>>,
}

/// Log-domain view of one value vector under a partition.
///
/// `log_mass_*` are `ln p_s`, `ln p_w`; `log_within[i]` is `ln p̂_i` relative
/// to the cluster of `i`.
#[derive(Debug, Clone)]
pub(crate) struct ClusterLogs<S> {
    pub log_mass_strong: S,
    pub log_mass_weak: S,
    pub log_within: Vec<S>,
}

impl<S: Scalar> ClusterLogs<S> {
    pub fn compute(f: &[S], part: &Partition, t: S) -> Self {
        let lse_all = log_sum_exp(f, t);
        let lse_s = log_sum_exp_over(f, part.strong.iter().copied(), t);
        let lse_w = log_sum_exp_over(f, part.weak.iter().copied(), t);
        let log_within = f
            .iter()
            .enumerate()
            .map(|(i, &v)| v / t - if part.is_strong(i) { lse_s } else { lse_w })
            .collect();
        Self {
            log_mass_strong: lse_s - lse_all,
            log_mass_weak: lse_w - lse_all,
            log_within,
        }
    }

    pub fn mass_strong(&self) -> S {
        self.log_mass_strong.exp()
    }

    pub fn mass_weak(&self) -> S {
        self.log_mass_weak.exp()
    }
}

fn check_inputs<S: Scalar>(f: &[S], part: &Partition, t: S) -> Result<()> {
    check_values(f)?;
    check_temperature(t)?;
    part.require_covers(f)
}

/// Binary cluster probabilities `p_s`, `p_w` of `softmax(f / T)`.
pub fn binary_probs<S: Scalar>(f: &[S], part: &Partition, t: S) -> Result<BinaryProb<S>> {
    check_inputs(f, part, t)?;
    part.require_two_sided()?;
    let logs = ClusterLogs::compute(f, part, t);
    Ok(BinaryProb {
        strong: logs.mass_strong(),
        weak: logs.mass_weak(),
    })
}

/// Softmax of `f / T` restricted to and renormalized within each cluster.
pub fn within_cluster_probs<S: Scalar>(f: &[S], part: &Partition, t: S) -> Result<ClusterProbs<S>> {
    check_inputs(f, part, t)?;
    let sub = |idx: &[usize]| {
        (!idx.is_empty()).then(|| {
            let vals: Vec<S> = idx.iter().map(|&i| f[i]).collect();
            ProbVector::from_normalized(softmax_unchecked(&vals, t))
        })
    };
    Ok(ClusterProbs {
        strong: sub(&part.strong),
        weak: sub(&part.weak),
    })
}

/// Checks `p_i = b_cluster(i) · p̂_i` for every `i` from precomputed pieces.
pub fn product_identity_holds<S: Scalar>(
    full: &[S],
    binary: &BinaryProb<S>,
    clusters: &ClusterProbs<S>,
    part: &Partition,
) -> bool {
    let tol = S::lit(PRODUCT_IDENTITY_TOL);
    let side_ok = |idx: &[usize], mass: S, within: &Option<ProbVector<S>>| match within {
        None => idx.is_empty(),
        Some(p) => {
            p.len() == idx.len()
                && idx
                    .iter()
                    .zip(p.iter())
                    .all(|(&i, &ph)| (full[i] - mass * ph).abs() <= tol)
        }
    };
    full.len() == part.total()
        && side_ok(&part.strong, binary.strong, &clusters.strong)
        && side_ok(&part.weak, binary.weak, &clusters.weak)
}

/// Diagnostic: does `softmax(f/T)` factor into cluster mass times within-cluster probability?
pub fn product_identity_check<S: Scalar>(f: &[S], part: &Partition, t: S) -> bool {
    let Ok(()) = check_inputs(f, part, t) else {
        return false;
    };
    let full = softmax_unchecked(f, t);
    let logs = ClusterLogs::compute(f, part, t);
    let binary = BinaryProb {
        strong: logs.mass_strong(),
        weak: logs.mass_weak(),
    };
    let Ok(clusters) = within_cluster_probs(f, part, t) else {
        return false;
    };
    product_identity_holds(&full, &binary, &clusters, part)
}

/// Confidence ratio `p_s / p_w = Σ_S exp(f/T) / Σ_W exp(f/T)`.
pub fn confidence_ratio<S: Scalar>(f: &[S], part: &Partition, t: S) -> Result<S> {
    check_inputs(f, part, t)?;
    if part.weak.is_empty() {
        return Err(Error::DegeneratePartition("weak cluster is empty".into()));
    }
    let logs = ClusterLogs::compute(f, part, t);
    Ok((logs.log_mass_strong - logs.log_mass_weak).exp())
}

/// Mean of [`confidence_ratio`] over `(values, partition)` samples.
pub fn mean_confidence_ratio<'a, S: Scalar>(
    samples: impl IntoIterator<Item = (&'a [S], &'a Partition)>,
    t: S,
) -> Result<S> {
    let mut sum = S::zero();
    let mut n = 0usize;
    for (f, part) in samples {
        sum += confidence_ratio(f, part, t)?;
        n += 1;
    }
    if n == 0 {
        return Err(invalid("no samples"));
    }
    Ok(sum / S::lit(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_label_examples() {
        let p = Partition::single_label(3, 0).unwrap();
        assert_eq!((p.strong(), p.weak()), (&[0][..], &[1, 2][..]));
        let p = Partition::single_label(100, 99).unwrap();
        assert_eq!(p.strong(), &[99]);
        assert_eq!(p.weak().len(), 99);
        let p = Partition::single_label(2, 1).unwrap();
        assert_eq!((p.strong(), p.weak()), (&[1][..], &[0][..]));
        assert!(Partition::single_label(3, 3).is_err());
        assert!(Partition::single_label(1, 0).is_err());
    }

    #[test]
    fn top_k_examples() {
        let p = Partition::top_k(&[0.1, 0.9, 0.5, 0.9], 2).unwrap();
        assert_eq!(p.strong(), &[1, 3]);
        let p = Partition::top_k(&[3.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(p.strong(), &[0]);
        let p = Partition::top_k(&[1.0; 4], 2).unwrap();
        assert_eq!(p.strong(), &[0, 1]);
        // tie straddling the cut: lower index wins
        let p = Partition::top_k(&[0.9, 0.5, 0.9, 0.9], 2).unwrap();
        assert_eq!(p.strong(), &[0, 2]);
    }

    #[test]
    fn top_k_rejects_bad_k() {
        assert!(Partition::top_k(&[1.0, 2.0, 3.0], 0).is_err());
        assert!(Partition::top_k(&[1.0, 2.0, 3.0], 3).is_err());
    }

    #[test]
    fn binary_probs_examples() {
        let b = binary_probs(&[0.0; 4], &Partition::from_strong([0, 1], 4).unwrap(), 1.0).unwrap();
        assert_abs_diff_eq!(b.strong, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.weak, 0.5, epsilon = 1e-15);
        let f = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let s0 = Partition::from_strong([0], 3).unwrap();
        let b = binary_probs(&f, &s0, 1.0).unwrap();
        assert_abs_diff_eq!(b.strong, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.weak, 0.5, epsilon = 1e-15);
        let b = binary_probs(&[2f64.ln(), 0.0, 0.0], &s0, 1.0).unwrap();
        assert_abs_diff_eq!(b.strong, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn binary_probs_requires_two_sides() {
        let all = Partition::from_strong(0..3, 3).unwrap();
        assert!(matches!(
            binary_probs(&[0.0, 1.0, 2.0], &all, 1.0),
            Err(Error::DegeneratePartition(_))
        ));
        let none = Partition::from_strong([], 3).unwrap();
        assert!(matches!(
            binary_probs(&[0.0, 1.0, 2.0], &none, 1.0),
            Err(Error::DegeneratePartition(_))
        ));
    }

    #[test]
    fn within_cluster_examples() {
        let f = [0.4f64.ln(), 0.2f64.ln()];
        let weak_only = Partition::from_strong([], 2).unwrap();
        let c = within_cluster_probs(&f, &weak_only, 1.0).unwrap();
        assert!(c.strong.is_none());
        let w = c.weak.unwrap();
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);

        let c = within_cluster_probs(&[1.0, 2.0, 3.0], &Partition::from_strong([2], 3).unwrap(), 1.0).unwrap();
        assert_eq!(c.strong.unwrap().as_slice(), &[1.0]);

        let c = within_cluster_probs(&[5.0, 0.3, 0.3, 0.3, 0.3], &Partition::from_strong([0], 5).unwrap(), 2.0).unwrap();
        for &p in c.weak.unwrap().iter() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        assert!(within_cluster_probs(&[1.0, 2.0], &Partition::from_strong([0], 3).unwrap(), 1.0).is_err());
    }

    #[test]
    fn product_identity_examples() {
        let s0 = Partition::from_strong([0], 2).unwrap();
        assert!(product_identity_check(&[0.0, 0.0], &s0, 1.0));

        let f = [0.3, -1.2, 2.2, 0.0, 0.7];
        let part = Partition::from_strong([1, 2], 5).unwrap();
        assert!(product_identity_check(&f, &part, 4.0));

        let full = softmax_unchecked(&f, 4.0);
        let binary = binary_probs(&f, &part, 4.0).unwrap();
        let mut clusters = within_cluster_probs(&f, &part, 4.0).unwrap();
        assert!(product_identity_holds(&full, &binary, &clusters, &part));
        let corrupted: Vec<f64> = clusters.weak.as_ref().unwrap().iter().map(|p| p * 1.01).collect();
        clusters.weak = Some(ProbVector::from_normalized(corrupted));
        assert!(!product_identity_holds(&full, &binary, &clusters, &part));
    }

    #[test]
    fn confidence_ratio_examples() {
        let s0 = Partition::from_strong([0], 3).unwrap();
        assert_abs_diff_eq!(confidence_ratio(&[2f64.ln(), 0.0, 0.0], &s0, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        let half = Partition::from_strong([1, 3], 4).unwrap();
        assert_abs_diff_eq!(confidence_ratio(&[0.7; 4], &half, 3.0).unwrap(), 1.0, epsilon = 1e-14);
        let all = Partition::from_strong(0..3, 3).unwrap();
        assert!(confidence_ratio(&[0.0; 3], &all, 1.0).is_err());
    }

    #[test]
    fn mean_ratio() {
        let s0 = Partition::from_strong([0], 3).unwrap();
        let a = [2f64.ln(), 0.0, 0.0];
        let b = [6f64.ln(), 0.0, 0.0];
        let m = mean_confidence_ratio([(&a[..], &s0), (&b[..], &s0)], 1.0).unwrap();
        assert_abs_diff_eq!(m, 2.0, epsilon = 1e-14);
    }
}
