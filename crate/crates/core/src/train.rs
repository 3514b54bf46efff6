//! Teacher and student training loops.

use std::str::FromStr;

use crate::data::{batches, Dataset};
use crate::decoupled::{cakd_total, cakd_total_with_grad, cross_entropy_with_grad, kd_total_with_grad, CakdLoss, LossConfig, TapActivations};
use crate::error::{invalid, Error, Result};
use crate::metrics::{MetricsRecord, SiteMetrics};
use crate::nn::{argmax, Mlp, MlpSpec};
use crate::sgd::{Schedule, Sgd};

/// Which distillation sites are active for a student run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistillMode {
    /// Hard labels only, no teacher.
    CeOnly,
    /// Plain KL at the logits.
    Kd,
    CakdLogit,
    CakdFeature,
    CakdFull,
}

impl DistillMode {
    pub const ALL: [DistillMode; 5] = [
        DistillMode::CeOnly,
        DistillMode::Kd,
        DistillMode::CakdLogit,
        DistillMode::CakdFeature,
        DistillMode::CakdFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::CeOnly => "ce",
            DistillMode::Kd => "kd",
            DistillMode::CakdLogit => "cakd-logit",
            DistillMode::CakdFeature => "cakd-feature",
            DistillMode::CakdFull => "cakd-full",
        }
    }

    /// The loss this mode trains with, derived from the configured one.
    pub fn objective(self, base: &LossConfig<f64>) -> Objective {
        let mut cfg = base.clone();
        match self {
            DistillMode::CeOnly => Objective::CrossEntropy,
            DistillMode::Kd => {
                cfg.gamma_feature.clear();
                Objective::Kd(cfg)
            }
            DistillMode::CakdLogit => {
                cfg.gamma_feature.clear();
                Objective::Cakd(cfg)
            }
            DistillMode::CakdFeature => {
                cfg.gamma_logit = 0.0;
                Objective::Cakd(cfg)
            }
            DistillMode::CakdFull => Objective::Cakd(cfg),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown mode `{s}` (expected ce, kd, cakd-logit, cakd-feature, cakd-full)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    CrossEntropy,
    Kd(LossConfig<f64>),
    Cakd(LossConfig<f64>),
}

impl Objective {
    fn needs_teacher(&self) -> bool {
        !matches!(self, Objective::CrossEntropy)
    }

    fn config(&self) -> Option<&LossConfig<f64>> {
        match self {
            Objective::CrossEntropy => None,
            Objective::Kd(c) | Objective::Cakd(c) => Some(c),
        }
    }

    /// Loss and `∂loss/∂(student site values)` for one batch.
    pub fn loss_and_grad(
        &self,
        teacher: Option<&TapActivations<f64>>,
        student: &TapActivations<f64>,
        targets: &[usize],
    ) -> Result<(f64, TapActivations<f64>)> {
        match (self, teacher) {
            (Objective::CrossEntropy, _) => {
                let (ce, dz) = cross_entropy_with_grad(&student.logits, targets)?;
                let mut g = student.zeros_like();
                g.logits = dz;
                Ok((ce, g))
            }
            (Objective::Kd(cfg), Some(t)) => kd_total_with_grad(t, student, targets, cfg).map(|(l, g)| (l.total, g)),
            (Objective::Cakd(cfg), Some(t)) => cakd_total_with_grad(t, student, targets, cfg).map(|(l, g)| (l.total, g)),
            _ => Err(Error::Precondition("distillation objective needs teacher activations".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainConfig {
    /// SGD recipe (momentum 0.9, weight decay 5e-4, batch 128) at `epochs`
    /// with proportionally scaled warmup and milestones.
    pub fn recipe(base_lr: f64, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::scaled(base_lr, epochs),
            seed,
        }
    }
}

pub struct TrainOutcome {
    pub model: Mlp,
    pub metrics: Vec<MetricsRecord>,
}

fn gather(data: &Dataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.inputs[i].clone()).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

// separates the shuffle stream from weight initialization
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Trains `spec` from a seeded initialization. A teacher is required for
/// every objective except plain cross-entropy and is never updated.
pub fn train(
    spec: &MlpSpec,
    objective: &Objective,
    teacher: Option<&Mlp>,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<TrainOutcome> {
    let model = Mlp::init(spec.clone(), cfg.seed)?;
    train_from(model, objective, teacher, train_data, test_data, cfg, run_id)
}

/// As [`train`], starting from the given weights.
pub fn train_from(
    mut model: Mlp,
    objective: &Objective,
    teacher: Option<&Mlp>,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<TrainOutcome> {
    let teacher = if objective.needs_teacher() {
        Some(teacher.ok_or_else(|| Error::Precondition("a teacher checkpoint is required for distillation".into()))?)
    } else {
        None
    };
    check_compatible(model.spec(), teacher.map(Mlp::spec), train_data)?;
    check_compatible(model.spec(), teacher.map(Mlp::spec), test_data)?;
    if let Some(c) = objective.config() {
        c.validate()?;
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, cfg.schedule.clone())?;
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        for idx in batches(train_data.len(), cfg.batch_size, cfg.seed ^ SHUFFLE_SALT, epoch as u64) {
            let (x, y) = gather(train_data, &idx);
            let pass = model.forward(&x)?;
            let teacher_taps = teacher.map(|t| t.forward_with_taps(&x)).transpose()?;
            let (_, upstream) = objective.loss_and_grad(teacher_taps.as_ref(), pass.taps(), &y)?;
            let grads = model.backward(&pass, &upstream)?;
            opt.step(&mut model, &grads, epoch)?;
        }
        for (split, data) in [("train", train_data), ("test", test_data)] {
            let summary = evaluate(&model, teacher, objective.config(), data, cfg.batch_size)?;
            metrics.push(summary.into_record(run_id, cfg.seed, epoch, split));
        }
    }
    Ok(TrainOutcome { model, metrics })
}

/// Checks class counts and, for distillation, that teacher sites line up with the student's.
pub fn check_compatible(student: &MlpSpec, teacher: Option<&MlpSpec>, data: &Dataset) -> Result<()> {
    if student.input_width() != data.width() {
        return Err(invalid(format!(
            "student input width {} but data width {}",
            student.input_width(),
            data.width()
        )));
    }
    if student.output_width() != data.class_count {
        return Err(invalid(format!(
            "student has {} outputs but data has {} classes",
            student.output_width(),
            data.class_count
        )));
    }
    if let Some(t) = teacher {
        if t.input_width() != data.width() || t.output_width() != data.class_count {
            return Err(crate::error::format_err(format!(
                "teacher expects {} inputs / {} classes, data has {} / {}",
                t.input_width(),
                t.output_width(),
                data.width(),
                data.class_count
            )));
        }
        if t.tap_widths() != student.tap_widths() {
            return Err(crate::error::format_err(format!(
                "teacher tap widths {:?} do not match student tap widths {:?}",
                t.tap_widths(),
                student.tap_widths()
            )));
        }
        for w in student.tap_widths() {
            crate::decoupled::check_feature_width(w)?;
        }
    }
    Ok(())
}

/// Accuracy, cross-entropy and (with a teacher) per-site component means over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ce: f64,
    pub sites: Vec<SiteMetrics>,
}

impl EvalSummary {
    fn into_record(self, run_id: &str, seed: u64, epoch: usize, split: &str) -> MetricsRecord {
        MetricsRecord {
            run_id: run_id.into(),
            seed,
            epoch,
            split: split.into(),
            accuracy: self.accuracy,
            ce: self.ce,
            sites: self.sites,
        }
    }
}

pub fn evaluate(
    model: &Mlp,
    teacher: Option<&Mlp>,
    loss: Option<&LossConfig<f64>>,
    data: &Dataset,
    chunk: usize,
) -> Result<EvalSummary> {
    let n = data.len() as f64;
    let mut correct = 0usize;
    let mut ce = 0.0;
    let mut sites: Vec<SiteMetrics> = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let (x, y) = gather(data, idx);
        let taps = model.forward_with_taps(&x)?;
        correct += taps.logits.iter().zip(&y).filter(|(z, &t)| argmax(z) == t).count();
        let w = idx.len() as f64 / n;
        match (teacher, loss) {
            (Some(t), Some(cfg)) => {
                let tt = t.forward_with_taps(&x)?;
                let l: CakdLoss<f64> = cakd_total(&tt, &taps, &y, cfg)?;
                ce += w * l.ce;
                if sites.is_empty() {
                    sites = l
                        .breakdown
                        .iter()
                        .map(|s| SiteMetrics {
                            site: s.site.to_string(),
                            bcd: 0.0,
                            scd: 0.0,
                            wcd: 0.0,
                            plain_kl: 0.0,
                            ps_pw: 0.0,
                        })
                        .collect();
                }
                for (acc, s) in sites.iter_mut().zip(&l.breakdown) {
                    acc.bcd += w * s.mean.bcd;
                    acc.scd += w * s.mean.scd;
                    acc.wcd += w * s.mean.wcd;
                    acc.plain_kl += w * s.mean.plain_kl;
                    acc.ps_pw += w * s.mean.confidence_ratio;
                }
            }
            _ => {
                ce += w * cross_entropy_with_grad(&taps.logits, &y)?.0;
            }
        }
    }
    Ok(EvalSummary {
        accuracy: correct as f64 / n,
        ce,
        sites,
    })
}

pub fn accuracy(model: &Mlp, data: &Dataset) -> Result<f64> {
    let pred = model.predict(&data.inputs)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64)
}
