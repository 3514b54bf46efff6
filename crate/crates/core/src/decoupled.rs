//! Decoupled KL distillation loss.
//!
//! `KL(p^T ‖ p^S)` over a [`Partition`] splits exactly into
//!
//! ```text
//! KL = BCD + p_s^T · SCD + p_w^T · WCD
//! ```
//!
//! where BCD is the KL between the binary cluster masses and SCD / WCD are
//! the KLs between the within-cluster renormalized distributions. The CAKD
//! loss replaces the teacher-mass coefficients with constants `α`, `β` so the
//! within-cluster terms are no longer suppressed by a confident teacher.
//!
//! Everything here is evaluated in the log domain; the probability-level
//! helpers [`bcd`], [`scd`], [`wcd`] use the floored KL from [`crate::prob`].

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::partition::{BinaryProb, ClusterLogs, Partition};
use crate::prob::{check_temperature, check_values, kl_divergence, kl_floored, kl_from_log_probs, log_softmax_unchecked, ProbVector};
use crate::scalar::Scalar;

/// Coefficients applied to SCD and WCD in the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentWeights<S> {
    /// Global constants `α` (SCD) and `β` (WCD).
    Fixed { alpha: S, beta: S },
    /// Per-sample teacher masses `p_s^T`, `p_w^T`; recovers plain KL.
    TeacherMass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<S> {
    pub weights: ComponentWeights<S>,
    pub temperature: S,
    pub hard_label_weight: S,
    pub gamma_logit: S,
    /// Per feature tap; taps beyond the end of the list get weight 0.
    pub gamma_feature: Vec<S>,
    /// Per feature tap strong-cluster size; missing entries use [`default_feature_k`].
    pub feature_k: Vec<usize>,
    /// Multiply distillation terms by `T²`.
    pub scale_by_t_squared: bool,
}

impl<S: Scalar> Default for LossConfig<S> {
    fn default() -> Self {
        Self {
            weights: ComponentWeights::Fixed {
                alpha: S::lit(8.0),
                beta: S::lit(2.0),
            },
            temperature: S::lit(4.0),
            hard_label_weight: S::one(),
            gamma_logit: S::one(),
            gamma_feature: Vec::new(),
            feature_k: Vec::new(),
            scale_by_t_squared: true,
        }
    }
}

/// `⌈width / 4⌉`, clamped into the valid range `[1, width - 1]`.
pub fn default_feature_k(width: usize) -> usize {
    width.div_ceil(4).clamp(1, width.saturating_sub(1).max(1))
}

impl<S: Scalar> LossConfig<S> {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        let ok = |v: S| v.is_finite() && v >= S::zero();
        if let ComponentWeights::Fixed { alpha, beta } = self.weights {
            if !ok(alpha) || !ok(beta) {
                return Err(invalid(format!("alpha/beta must be finite and >= 0, got {alpha}/{beta}")));
            }
        }
        for (name, v) in [("hard_label_weight", self.hard_label_weight), ("gamma_logit", self.gamma_logit)] {
            if !ok(v) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(g) = self.gamma_feature.iter().find(|g| !ok(**g)) {
            return Err(invalid(format!("gamma_feature must be finite and >= 0, got {g}")));
        }
        Ok(())
    }

    pub fn gamma_for_tap(&self, tap: usize) -> S {
        self.gamma_feature.get(tap).copied().unwrap_or_else(S::zero)
    }

    pub fn k_for_tap(&self, tap: usize, width: usize) -> usize {
        self.feature_k
            .get(tap)
            .copied()
            .unwrap_or_else(|| default_feature_k(width))
    }

    /// Factor applied to every distillation term: `T²` or 1.
    pub fn distill_scale(&self) -> S {
        if self.scale_by_t_squared {
            self.temperature * self.temperature
        } else {
            S::one()
        }
    }

    fn coefficients(&self, p_s: S, p_w: S) -> (S, S) {
        match self.weights {
            ComponentWeights::Fixed { alpha, beta } => (alpha, beta),
            ComponentWeights::TeacherMass => (p_s, p_w),
        }
    }
}

/// Component breakdown of one teacher/student pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecoupledKl<S> {
    pub bcd: S,
    pub scd: S,
    pub wcd: S,
    pub p_s_teacher: S,
    pub p_w_teacher: S,
    /// Teacher `p_s / p_w`.
    pub confidence_ratio: S,
    /// `KL(p^T ‖ p^S)` evaluated directly on the full distributions.
    pub plain_kl: S,
    /// `bcd + a·scd + b·wcd` with the configured coefficients.
    pub weighted_total: S,
}

impl<S: Scalar> DecoupledKl<S> {
    /// `bcd + p_s^T·scd + p_w^T·wcd`, which equals `plain_kl` up to rounding.
    pub fn recomposed(&self) -> S {
        self.bcd + self.p_s_teacher * self.scd + self.p_w_teacher * self.wcd
    }

    /// Componentwise mean.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Self>) -> Self
    where
        S: 'a,
    {
        let mut acc = Self::default();
        let mut n = 0usize;
        for d in items {
            acc.bcd += d.bcd;
            acc.scd += d.scd;
            acc.wcd += d.wcd;
            acc.p_s_teacher += d.p_s_teacher;
            acc.p_w_teacher += d.p_w_teacher;
            acc.confidence_ratio += d.confidence_ratio;
            acc.plain_kl += d.plain_kl;
            acc.weighted_total += d.weighted_total;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let inv = S::one() / S::lit(n as f64);
        Self {
            bcd: acc.bcd * inv,
            scd: acc.scd * inv,
            wcd: acc.wcd * inv,
            p_s_teacher: acc.p_s_teacher * inv,
            p_w_teacher: acc.p_w_teacher * inv,
            confidence_ratio: acc.confidence_ratio * inv,
            plain_kl: acc.plain_kl * inv,
            weighted_total: acc.weighted_total * inv,
        }
    }
}

/// Binary classification divergence `KL(b^T ‖ b^S)`.
pub fn bcd<S: Scalar>(teacher: &BinaryProb<S>, student: &BinaryProb<S>) -> S {
    kl_floored(&[teacher.strong, teacher.weak], &[student.strong, student.weak])
}

/// Strong correlation divergence: KL between within-`S` distributions.
pub fn scd<S: Scalar>(teacher: &ProbVector<S>, student: &ProbVector<S>) -> Result<S> {
    kl_divergence(teacher, student)
}

/// Weak correlation divergence: KL between within-`W` distributions.
pub fn wcd<S: Scalar>(teacher: &ProbVector<S>, student: &ProbVector<S>) -> Result<S> {
    kl_divergence(teacher, student)
}

fn check_pair<S: Scalar>(teacher: &[S], student: &[S], t: S) -> Result<()> {
    check_values(teacher)?;
    check_values(student)?;
    check_temperature(t)?;
    if teacher.len() != student.len() {
        return Err(invalid(format!(
            "teacher has {} values but student has {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(())
}

/// `p · (ln p − ln q)` for a mass given by its log, zero when the mass is zero.
fn log_term<S: Scalar>(log_p: S, log_q: S) -> S {
    let p = log_p.exp();
    if p > S::zero() {
        p * (log_p - log_q)
    } else {
        S::zero()
    }
}

fn within_kl<S: Scalar>(t: &ClusterLogs<S>, s: &ClusterLogs<S>, idx: &[usize]) -> S {
    idx.iter()
        .map(|&i| log_term(t.log_within[i], s.log_within[i]))
        .sum()
}

fn decouple_unchecked<S: Scalar>(
    teacher: &[S],
    student: &[S],
    part: &Partition,
    cfg: &LossConfig<S>,
    single_label: bool,
) -> DecoupledKl<S> {
    let t = cfg.temperature;
    let tl = ClusterLogs::compute(teacher, part, t);
    let sl = ClusterLogs::compute(student, part, t);
    let bcd = log_term(tl.log_mass_strong, sl.log_mass_strong) + log_term(tl.log_mass_weak, sl.log_mass_weak);
    let scd = if single_label {
        S::zero()
    } else {
        within_kl(&tl, &sl, part.strong())
    };
    let wcd = within_kl(&tl, &sl, part.weak());
    let plain_kl = kl_from_log_probs(&log_softmax_unchecked(teacher, t), &log_softmax_unchecked(student, t));
    let (p_s, p_w) = (tl.mass_strong(), tl.mass_weak());
    let (a, b) = cfg.coefficients(p_s, p_w);
    DecoupledKl {
        bcd,
        scd,
        wcd,
        p_s_teacher: p_s,
        p_w_teacher: p_w,
        confidence_ratio: (tl.log_mass_strong - tl.log_mass_weak).exp(),
        plain_kl,
        weighted_total: bcd + a * scd + b * wcd,
    }
}

/// Decomposes `KL(softmax(teacher/T) ‖ softmax(student/T))` over `part`.
pub fn decouple<S: Scalar>(
    teacher: &[S],
    student: &[S],
    part: &Partition,
    cfg: &LossConfig<S>,
) -> Result<DecoupledKl<S>> {
    check_pair(teacher, student, cfg.temperature)?;
    part.require_covers(teacher)?;
    part.require_two_sided()?;
    Ok(decouple_unchecked(teacher, student, part, cfg, false))
}

/// Logit-level decomposition with `S = {target}`; SCD is identically zero.
pub fn decouple_single_label<S: Scalar>(
    teacher: &[S],
    student: &[S],
    target: usize,
    cfg: &LossConfig<S>,
) -> Result<DecoupledKl<S>> {
    check_pair(teacher, student, cfg.temperature)?;
    let part = Partition::single_label(teacher.len(), target)?;
    Ok(decouple_unchecked(teacher, student, &part, cfg, true))
}

fn grad_unchecked<S: Scalar>(teacher: &[S], student: &[S], part: &Partition, cfg: &LossConfig<S>) -> Vec<S> {
    // d/dz_j [bcd + a·scd + b·wcd] with z = f/T:
    //   q_j − P_c q̂_j + w_c (q̂_j − p̂_j),  c = cluster(j)
    let t = cfg.temperature;
    let tl = ClusterLogs::compute(teacher, part, t);
    let sl = ClusterLogs::compute(student, part, t);
    let (p_s, p_w) = (tl.mass_strong(), tl.mass_weak());
    let (a, b) = cfg.coefficients(p_s, p_w);
    let log_q = log_softmax_unchecked(student, t);
    (0..student.len())
        .map(|j| {
            let (mass, w) = if part.is_strong(j) { (p_s, a) } else { (p_w, b) };
            let q_hat = sl.log_within[j].exp();
            let p_hat = tl.log_within[j].exp();
            (log_q[j].exp() - mass * q_hat + w * (q_hat - p_hat)) / t
        })
        .collect()
}

/// Analytic `∂ weighted_total / ∂ student_i`.
pub fn grad_student<S: Scalar>(
    teacher: &[S],
    student: &[S],
    part: &Partition,
    cfg: &LossConfig<S>,
) -> Result<Vec<S>> {
    check_pair(teacher, student, cfg.temperature)?;
    part.require_covers(teacher)?;
    part.require_two_sided()?;
    Ok(grad_unchecked(teacher, student, part, cfg))
}

/// Classical soft-target KD: `KL(softmax(t/T) ‖ softmax(s/T))` and its
/// gradient `(q − p) / T` with respect to the student values.
pub fn plain_kl_with_grad<S: Scalar>(teacher: &[S], student: &[S], t: S) -> Result<(S, Vec<S>)> {
    check_pair(teacher, student, t)?;
    let lp = log_softmax_unchecked(teacher, t);
    let lq = log_softmax_unchecked(student, t);
    let grad = lp.iter().zip(&lq).map(|(&p, &q)| (q.exp() - p.exp()) / t).collect();
    Ok((kl_from_log_probs(&lp, &lq), grad))
}

/// Per-sample raw values at every distillation site for one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TapActivations<S> {
    /// `[sample][class]`
    pub logits: Vec<Vec<S>>,
    /// `[tap][sample][unit]`
    pub features: Vec<Vec<Vec<S>>>,
}

impl<S: Scalar> TapActivations<S> {
    pub fn batch_size(&self) -> usize {
        self.logits.len()
    }

    pub fn site_count(&self) -> usize {
        self.features.len() + 1
    }

    /// Zero-filled activations with the same layout.
    pub fn zeros_like(&self) -> Self {
        let z = |rows: &Vec<Vec<S>>| rows.iter().map(|r| vec![S::zero(); r.len()]).collect();
        Self {
            logits: z(&self.logits),
            features: self.features.iter().map(z).collect(),
        }
    }

    fn check_shape(&self) -> Result<()> {
        let b = self.batch_size();
        let uniform = |rows: &[Vec<S>], what: &str| -> Result<()> {
            if rows.len() != b {
                return Err(invalid(format!("{what}: {} samples, expected {b}", rows.len())));
            }
            if let Some(w) = rows.first().map(Vec::len) {
                if rows.iter().any(|r| r.len() != w) {
                    return Err(invalid(format!("{what}: ragged widths within batch")));
                }
            }
            Ok(())
        };
        uniform(&self.logits, "logits")?;
        for (k, f) in self.features.iter().enumerate() {
            uniform(f, &format!("feature tap {k}"))?;
        }
        Ok(())
    }

    fn width(rows: &[Vec<S>]) -> usize {
        rows.first().map_or(0, Vec::len)
    }

    pub(crate) fn check_aligned(&self, other: &Self) -> Result<()> {
        self.check_shape()?;
        other.check_shape()?;
        if self.batch_size() != other.batch_size() {
            return Err(invalid(format!(
                "teacher batch {} vs student batch {}",
                self.batch_size(),
                other.batch_size()
            )));
        }
        if self.features.len() != other.features.len() {
            return Err(invalid(format!(
                "teacher has {} feature taps, student {}",
                self.features.len(),
                other.features.len()
            )));
        }
        if Self::width(&self.logits) != Self::width(&other.logits) {
            return Err(invalid("teacher and student logit widths differ"));
        }
        for (k, (a, b)) in self.features.iter().zip(&other.features).enumerate() {
            if Self::width(a) != Self::width(b) {
                return Err(invalid(format!("feature tap {k}: teacher and student widths differ")));
            }
        }
        Ok(())
    }
}

/// A distillation site: the logits or one feature tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Logit,
    Feature(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Logit => f.write_str("logit"),
            Site::Feature(k) => write!(f, "feature{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteLoss<S> {
    pub site: Site,
    /// Batch-mean component breakdown.
    pub mean: DecoupledKl<S>,
    /// Contribution to the total: `γ · scale · mean.weighted_total`.
    pub contribution: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CakdLoss<S> {
    pub total: S,
    /// Mean hard-label cross-entropy at `T = 1`, before weighting.
    pub ce: S,
    pub breakdown: Vec<SiteLoss<S>>,
}

impl<S: Scalar> CakdLoss<S> {
    pub fn site(&self, site: Site) -> Option<&SiteLoss<S>> {
        self.breakdown.iter().find(|s| s.site == site)
    }

    /// Sum of all feature-site contributions.
    pub fn feature_loss(&self) -> S {
        self.breakdown
            .iter()
            .filter(|s| matches!(s.site, Site::Feature(_)))
            .map(|s| s.contribution)
            .sum()
    }

    pub fn logit_loss(&self) -> S {
        self.site(Site::Logit).map_or_else(S::zero, |s| s.contribution)
    }
}

/// How the logit site is distilled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LogitRoute {
    Decoupled,
    Plain,
}

/// Mean cross-entropy and, optionally, its gradient w.r.t. the logits.
fn cross_entropy<S: Scalar>(logits: &[Vec<S>], targets: &[usize], grad: Option<(&mut [Vec<S>], S)>) -> S {
    let n = S::lit(logits.len() as f64);
    let mut total = S::zero();
    let mut grad = grad;
    for (b, (z, &y)) in logits.iter().zip(targets).enumerate() {
        let lq = log_softmax_unchecked(z, S::one());
        total -= lq[y];
        if let Some((g, w)) = grad.as_mut() {
            for (j, gj) in g[b].iter_mut().enumerate() {
                let onehot = if j == y { S::one() } else { S::zero() };
                *gj += *w * (lq[j].exp() - onehot) / n;
            }
        }
    }
    total / n
}

/// Mean hard-label cross-entropy at `T = 1` and its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad<S: Scalar>(logits: &[Vec<S>], targets: &[usize]) -> Result<(S, Vec<Vec<S>>)> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(invalid(format!("{} logit rows for {} targets", logits.len(), targets.len())));
    }
    for (z, &y) in logits.iter().zip(targets) {
        check_values(z)?;
        if y >= z.len() {
            return Err(invalid(format!("target {y} out of range for {} classes", z.len())));
        }
    }
    let mut grad: Vec<Vec<S>> = logits.iter().map(|z| vec![S::zero(); z.len()]).collect();
    let ce = cross_entropy(logits, targets, Some((grad.as_mut_slice(), S::one())));
    Ok((ce, grad))
}

fn evaluate<S: Scalar>(
    teacher: &TapActivations<S>,
    student: &TapActivations<S>,
    targets: &[usize],
    cfg: &LossConfig<S>,
    route: LogitRoute,
    want_grad: bool,
) -> Result<(CakdLoss<S>, Option<TapActivations<S>>)> {
    cfg.validate()?;
    teacher.check_aligned(student)?;
    let batch = student.batch_size();
    if batch == 0 {
        return Err(invalid("empty batch"));
    }
    if targets.len() != batch {
        return Err(invalid(format!("{} targets for batch of {batch}", targets.len())));
    }
    if cfg.gamma_feature.len() > student.features.len() {
        return Err(invalid(format!(
            "{} feature gammas for {} taps",
            cfg.gamma_feature.len(),
            student.features.len()
        )));
    }
    let classes = TapActivations::width(&student.logits);
    if let Some(&y) = targets.iter().find(|&&y| y >= classes) {
        return Err(invalid(format!("target {y} out of range for {classes} classes")));
    }
    for rows in std::iter::once(&student.logits)
        .chain(&student.features)
        .chain(std::iter::once(&teacher.logits))
        .chain(&teacher.features)
    {
        rows.iter().try_for_each(|r| check_values(r))?;
    }

    let mut grads = want_grad.then(|| student.zeros_like());
    let inv_batch = S::one() / S::lit(batch as f64);
    let scale = cfg.distill_scale();
    let t = cfg.temperature;

    let ce = cross_entropy(
        &student.logits,
        targets,
        grads.as_mut().map(|g| (g.logits.as_mut_slice(), cfg.hard_label_weight)),
    );
    let mut breakdown = Vec::with_capacity(student.site_count());

    // logit site
    let mut per_sample = Vec::with_capacity(batch);
    let logit_weight = cfg.gamma_logit * scale * inv_batch;
    for (b, ((tz, sz), &y)) in teacher.logits.iter().zip(&student.logits).zip(targets).enumerate() {
        let part = Partition::single_label(classes, y)?;
        let mut d = decouple_unchecked(tz, sz, &part, cfg, true);
        let grad_active = cfg.gamma_logit > S::zero();
        match route {
            LogitRoute::Decoupled => {
                if let (Some(g), true) = (grads.as_mut(), grad_active) {
                    for (gj, dj) in g.logits[b].iter_mut().zip(grad_unchecked(tz, sz, &part, cfg)) {
                        *gj += logit_weight * dj;
                    }
                }
            }
            LogitRoute::Plain => {
                d.weighted_total = d.plain_kl;
                if let (Some(g), true) = (grads.as_mut(), grad_active) {
                    let (_, dz) = plain_kl_with_grad(tz, sz, t)?;
                    for (gj, dj) in g.logits[b].iter_mut().zip(dz) {
                        *gj += logit_weight * dj;
                    }
                }
            }
        }
        per_sample.push(d);
    }
    let mean = DecoupledKl::mean(&per_sample);
    breakdown.push(SiteLoss {
        site: Site::Logit,
        mean,
        contribution: cfg.gamma_logit * scale * mean.weighted_total,
    });

    for tap in 0..student.features.len() {
        let width = TapActivations::width(&student.features[tap]);
        let k = cfg.k_for_tap(tap, width);
        let gamma = cfg.gamma_for_tap(tap);
        let weight = gamma * scale * inv_batch;
        per_sample.clear();
        for b in 0..batch {
            let (tf, sf) = (&teacher.features[tap][b], &student.features[tap][b]);
            let part = Partition::top_k(tf, k)?;
            per_sample.push(decouple_unchecked(tf, sf, &part, cfg, false));
            if let (Some(g), true) = (grads.as_mut(), gamma > S::zero()) {
                for (gj, dj) in g.features[tap][b].iter_mut().zip(grad_unchecked(tf, sf, &part, cfg)) {
                    *gj += weight * dj;
                }
            }
        }
        let mean = DecoupledKl::mean(&per_sample);
        breakdown.push(SiteLoss {
            site: Site::Feature(tap),
            mean,
            contribution: gamma * scale * mean.weighted_total,
        });
    }

    let total = cfg.hard_label_weight * ce + breakdown.iter().map(|s| s.contribution).sum::<S>();
    Ok((CakdLoss { total, ce, breakdown }, grads))
}

/// Full CAKD objective for one batch:
///
/// `w_hard·CE + γ_logit·s·mean(logit decoupled) + Σ_taps γ_k·s·mean(feature decoupled)`
///
/// with `s = T²` when [`LossConfig::scale_by_t_squared`] is set. Logits use the
/// single-label partition; feature taps use the teacher's top-k units.
pub fn cakd_total<S: Scalar>(
    teacher: &TapActivations<S>,
    student: &TapActivations<S>,
    targets: &[usize],
    cfg: &LossConfig<S>,
) -> Result<CakdLoss<S>> {
    evaluate(teacher, student, targets, cfg, LogitRoute::Decoupled, false).map(|(l, _)| l)
}

/// [`cakd_total`] together with its gradient w.r.t. every student site value.
pub fn cakd_total_with_grad<S: Scalar>(
    teacher: &TapActivations<S>,
    student: &TapActivations<S>,
    targets: &[usize],
    cfg: &LossConfig<S>,
) -> Result<(CakdLoss<S>, TapActivations<S>)> {
    let (loss, grad) = evaluate(teacher, student, targets, cfg, LogitRoute::Decoupled, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Plain-KD baseline: the logit site uses `KL(p^T ‖ p^S)` directly; feature
/// taps behave as in [`cakd_total`].
pub fn kd_total_with_grad<S: Scalar>(
    teacher: &TapActivations<S>,
    student: &TapActivations<S>,
    targets: &[usize],
    cfg: &LossConfig<S>,
) -> Result<(CakdLoss<S>, TapActivations<S>)> {
    let (loss, grad) = evaluate(teacher, student, targets, cfg, LogitRoute::Plain, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Fails with [`Error::DegeneratePartition`] when a feature tap is too narrow to split.
pub fn check_feature_width(width: usize) -> Result<()> {
    if width < 2 {
        return Err(Error::DegeneratePartition(format!(
            "feature tap of width {width} cannot be split into two clusters"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logits(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    fn cfg(t: f64) -> LossConfig<f64> {
        LossConfig {
            temperature: t,
            ..LossConfig::default()
        }
    }

    fn bp(s: f64, w: f64) -> BinaryProb<f64> {
        BinaryProb::new(s, w).unwrap()
    }

    fn pv(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn bcd_examples() {
        assert_eq!(bcd(&bp(0.3, 0.7), &bp(0.3, 0.7)), 0.0);
        assert_abs_diff_eq!(bcd(&bp(0.5, 0.5), &bp(0.4, 0.6)), 0.020410997260127586, epsilon = 1e-12);
        assert_abs_diff_eq!(bcd(&bp(0.9, 0.1), &bp(0.5, 0.5)), 0.3680642071684971, epsilon = 1e-12);
    }

    #[test]
    fn scd_wcd_examples() {
        assert_eq!(scd(&pv(&[1.0]), &pv(&[1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(scd(&pv(&[0.6, 0.4]), &pv(&[0.5, 0.5])).unwrap(), 0.020135513550688863, epsilon = 1e-12);
        assert_eq!(scd(&pv(&[0.2, 0.8]), &pv(&[0.2, 0.8])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            wcd(&pv(&[0.6, 0.4]), &pv(&[2.0 / 3.0, 1.0 / 3.0])).unwrap(),
            0.009712313322885996,
            epsilon = 1e-12
        );
        assert_eq!(wcd(&pv(&[0.2; 5]), &pv(&[0.2; 5])).unwrap(), 0.0);
        assert!(scd(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn worked_example() {
        let ft = logits(&[0.5, 0.3, 0.2]);
        let fs = logits(&[0.4, 0.4, 0.2]);
        let part = Partition::from_strong([0], 3).unwrap();
        let d = decouple(&ft, &fs, &part, &cfg(1.0)).unwrap();
        assert_abs_diff_eq!(d.bcd, 0.020410997260127586, epsilon = 1e-12);
        assert_abs_diff_eq!(d.scd, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.wcd, 0.009712313322885996, epsilon = 1e-12);
        assert_abs_diff_eq!(d.plain_kl, 0.02526715392157057, epsilon = 1e-12);
        assert_abs_diff_eq!(d.recomposed(), d.plain_kl, epsilon = 1e-15);

        let single = decouple_single_label(&ft, &fs, 0, &cfg(1.0)).unwrap();
        assert_eq!(single.scd, 0.0);
        assert_abs_diff_eq!(single.bcd, d.bcd, epsilon = 1e-15);
        assert_abs_diff_eq!(single.wcd, d.wcd, epsilon = 1e-15);
        // α = 8, β = 2
        assert_abs_diff_eq!(single.weighted_total, d.bcd + 2.0 * d.wcd, epsilon = 1e-15);
    }

    #[test]
    fn agreement_is_zero() {
        let f = [0.3, -2.0, 1.1, 4.0, 0.0];
        let part = Partition::from_strong([1, 3], 5).unwrap();
        let d = decouple(&f, &f, &part, &cfg(2.0)).unwrap();
        assert_eq!((d.bcd, d.scd, d.wcd, d.plain_kl), (0.0, 0.0, 0.0, 0.0));
        let shifted: Vec<f64> = f.iter().map(|v| v + 3.5).collect();
        let d = decouple(&f, &shifted, &part, &cfg(2.0)).unwrap();
        for v in [d.bcd, d.scd, d.wcd, d.plain_kl] {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-14);
        }
        for g in grad_student(&f, &shifted, &part, &cfg(2.0)).unwrap() {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-10);
        }
        let d = decouple_single_label(&f, &f, 2, &cfg(4.0)).unwrap();
        assert_eq!((d.bcd, d.scd, d.wcd), (0.0, 0.0, 0.0));
    }

    #[test]
    fn teacher_mass_weights_recover_plain_kl() {
        let ft = [1.0, -0.5, 2.0, 0.3];
        let fs = [0.2, 0.1, -1.0, 1.5];
        let part = Partition::from_strong([0, 2], 4).unwrap();
        let c = LossConfig {
            weights: ComponentWeights::TeacherMass,
            ..cfg(3.0)
        };
        let d = decouple(&ft, &fs, &part, &c).unwrap();
        assert_abs_diff_eq!(d.weighted_total, d.plain_kl, epsilon = 1e-12);
        let fixed = LossConfig {
            weights: ComponentWeights::Fixed {
                alpha: d.p_s_teacher,
                beta: d.p_w_teacher,
            },
            ..cfg(3.0)
        };
        assert_abs_diff_eq!(decouple(&ft, &fs, &part, &fixed).unwrap().weighted_total, d.plain_kl, epsilon = 1e-12);
    }

    #[test]
    fn two_class_single_label() {
        let d = decouple_single_label(&[0.4, -1.0], &[2.0, 0.5], 1, &cfg(1.5)).unwrap();
        assert_eq!(d.wcd, 0.0);
        assert_eq!(d.scd, 0.0);
        assert_abs_diff_eq!(d.plain_kl, d.bcd, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_partition_errors() {
        let all = Partition::from_strong(0..3, 3).unwrap();
        assert!(matches!(
            decouple(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &all, &cfg(1.0)),
            Err(Error::DegeneratePartition(_))
        ));
        assert!(matches!(
            grad_student(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &all, &cfg(1.0)),
            Err(Error::DegeneratePartition(_))
        ));
        assert!(decouple(&[0.0, 1.0], &[0.0, 1.0, 2.0], &all, &cfg(1.0)).is_err());
    }

    #[test]
    fn gradient_matches_classical_kd_under_recovery() {
        let ft = [0.5, 1.5, -0.7, 0.0, 2.2, -1.1];
        let fs = [1.0, -0.3, 0.4, 0.9, 0.1, 0.0];
        let part = Partition::from_strong([1, 4], 6).unwrap();
        let c = LossConfig {
            weights: ComponentWeights::TeacherMass,
            ..cfg(4.0)
        };
        let g = grad_student(&ft, &fs, &part, &c).unwrap();
        let (_, kd) = plain_kl_with_grad(&ft, &fs, 4.0).unwrap();
        for (a, b) in g.iter().zip(&kd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    fn taps(logits: Vec<Vec<f64>>, features: Vec<Vec<Vec<f64>>>) -> TapActivations<f64> {
        TapActivations { logits, features }
    }

    #[test]
    fn zero_gamma_is_cross_entropy() {
        let t = taps(vec![vec![1.0, 0.0, -1.0], vec![0.0, 2.0, 0.5]], vec![vec![vec![0.1, 0.9, 0.3], vec![1.0, 0.0, 0.2]]]);
        let s = taps(vec![vec![0.0, 0.3, 0.1], vec![1.0, -1.0, 0.5]], vec![vec![vec![0.5, 0.5, 0.1], vec![0.0, 0.3, 0.2]]]);
        let c = LossConfig {
            gamma_logit: 0.0,
            gamma_feature: vec![0.0],
            ..cfg(4.0)
        };
        let loss = cakd_total(&t, &s, &[2, 1], &c).unwrap();
        let ce = -(log_softmax_unchecked(&s.logits[0], 1.0)[2] + log_softmax_unchecked(&s.logits[1], 1.0)[1]) / 2.0;
        assert_abs_diff_eq!(loss.total, ce, epsilon = 1e-14);
        assert_abs_diff_eq!(loss.ce, ce, epsilon = 1e-14);
        assert_eq!(loss.breakdown.len(), 2);
    }

    #[test]
    fn identical_taps_give_pure_cross_entropy() {
        let t = taps(vec![vec![1.0, 0.0, -1.0]], vec![vec![vec![0.1, 0.9, 0.3, 0.0]]]);
        let c = LossConfig {
            gamma_feature: vec![2.0],
            ..cfg(4.0)
        };
        let (loss, grad) = cakd_total_with_grad(&t, &t, &[0], &c).unwrap();
        assert_abs_diff_eq!(loss.total, loss.ce, epsilon = 1e-15);
        for g in &grad.features[0][0] {
            assert_abs_diff_eq!(*g, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn misaligned_taps_rejected() {
        let t = taps(vec![vec![1.0, 0.0]], vec![vec![vec![0.1, 0.9, 0.3]]]);
        let s = taps(vec![vec![1.0, 0.0]], vec![vec![vec![0.1, 0.9]]]);
        assert!(cakd_total(&t, &s, &[0], &cfg(1.0)).is_err());
        let s2 = taps(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![vec![vec![0.1, 0.9, 0.3]; 2]]);
        assert!(cakd_total(&t, &s2, &[0, 1], &cfg(1.0)).is_err());
        assert!(cakd_total(&t, &t, &[0, 1], &cfg(1.0)).is_err());
        assert!(cakd_total(&t, &t, &[2], &cfg(1.0)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1.0);
        c.gamma_logit = -1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(0.0);
        assert!(c.validate().is_err());
        c.temperature = 1.0;
        c.weights = ComponentWeights::Fixed { alpha: f64::NAN, beta: 1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_k() {
        assert_eq!(default_feature_k(64), 16);
        assert_eq!(default_feature_k(10), 3);
        assert_eq!(default_feature_k(2), 1);
        assert_eq!(default_feature_k(3), 1);
    }
}
