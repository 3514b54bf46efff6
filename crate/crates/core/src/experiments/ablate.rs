//! Ablation sweeps over component weights, loss proportions and active sites.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{mean_sd, ExperimentConfig};
use crate::data::Dataset;
use crate::decoupled::{cakd_total, ComponentWeights, LossConfig};
use crate::error::{format_err, invalid, Error, Result};
use crate::nn::Mlp;
use crate::train::{train, Objective};

/// `(α, β)` settings of the weighting sweep.
pub const ALPHA_BETA_GRID: [(f64, f64); 5] = [(2.0, 2.0), (4.0, 4.0), (8.0, 4.0), (8.0, 2.0), (8.0, 1.0)];
/// Target `L_feature / L_logit` values of the loss-ratio sweep.
pub const LOSS_RATIO_TARGETS: [f64; 5] = [0.2, 0.5, 1.0, 2.0, 5.0];
/// Samples in the held-out calibration batch.
pub const CALIBRATION_SIZE: usize = 128;
/// Calibrated ratios must reproduce their target to this relative error.
pub const CALIBRATION_TOL: f64 = 0.05;
pub const ABLATION_HEADER: [&str; 5] = ["sweep", "setting", "seed", "accuracy", "ps_pw"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    AlphaBeta,
    LossRatio,
    Components,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::AlphaBeta => "alpha-beta",
            Sweep::LossRatio => "loss-ratio",
            Sweep::Components => "components",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Sweep::AlphaBeta, Sweep::LossRatio, Sweep::Components]
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| invalid(format!("unknown sweep `{s}` (expected alpha-beta, loss-ratio, components)")))
    }
}

/// One output row; `seed == None` marks the per-setting mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub seed: Option<u64>,
    /// Final-epoch test accuracy.
    pub accuracy: f64,
    /// Mean teacher `p_s / p_w` at the logits on the test split.
    pub ps_pw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub sweep: Sweep,
    pub rows: Vec<AblationRow>,
    /// Loss-ratio sweep only: `(setting, seed, target, measured)` after calibration.
    pub calibration: Vec<(String, u64, f64, f64)>,
}

impl AblationTable {
    pub fn means(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| r.seed.is_none())
    }

    pub fn mean_of(&self, setting: &str) -> Option<f64> {
        self.means().find(|r| r.setting == setting).map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(ABLATION_HEADER).expect("in-memory write");
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            w.write_record([
                self.sweep.name(),
                &r.setting,
                &seed,
                &format!("{:?}", r.accuracy),
                &format!("{:?}", r.ps_pw),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Writes `ablate-<sweep>.csv` into the output directory.
    pub fn write(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        fs::create_dir_all(&cfg.output_dir)?;
        let path = cfg.output_dir.join(format!("ablate-{}.csv", self.sweep.name()));
        fs::write(&path, self.to_csv())?;
        Ok(path)
    }
}

/// A named loss configuration to train every seed with.
struct Setting {
    label: String,
    loss: LossConfig<f64>,
}

fn alpha_beta_settings(base: &LossConfig<f64>, grid: &[(f64, f64)]) -> Vec<Setting> {
    grid.iter()
        .map(|&(alpha, beta)| Setting {
            label: format!("alpha={alpha};beta={beta}"),
            loss: LossConfig {
                weights: ComponentWeights::Fixed { alpha, beta },
                ..base.clone()
            },
        })
        .collect()
}

fn component_settings(base: &LossConfig<f64>, taps: usize) -> Result<Vec<Setting>> {
    if taps < 2 {
        return Err(invalid("the components sweep needs at least two student taps"));
    }
    let gamma = |tap: usize| {
        let g = base.gamma_for_tap(tap);
        if g > 0.0 {
            g
        } else {
            1.0
        }
    };
    let only = |active: &[usize]| -> Vec<f64> {
        (0..taps).map(|t| if active.contains(&t) { gamma(t) } else { 0.0 }).collect()
    };
    let (last, prev) = (taps - 1, taps - 2);
    let make = |label: &str, logit: bool, active: &[usize]| Setting {
        label: label.into(),
        loss: LossConfig {
            gamma_logit: if logit { base.gamma_logit } else { 0.0 },
            gamma_feature: only(active),
            ..base.clone()
        },
    };
    Ok(vec![
        make("logit", true, &[]),
        make("single-feature", false, &[last]),
        make("logit+single", true, &[last]),
        make("logit+double", true, &[prev, last]),
    ])
}

/// A fixed held-out batch: the first [`CALIBRATION_SIZE`] samples of a
/// seeded permutation of the test split.
pub fn calibration_batch(test: &Dataset, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(CALIBRATION_SIZE);
    test.subset(&idx)
}

/// `(L_feature, L_logit)` of the untrained student on the batch.
pub fn loss_split(student: &Mlp, teacher: &Mlp, batch: &Dataset, cfg: &LossConfig<f64>) -> Result<(f64, f64)> {
    let s = student.forward_with_taps(&batch.inputs)?;
    let t = teacher.forward_with_taps(&batch.inputs)?;
    let l = cakd_total(&t, &s, &batch.labels, cfg)?;
    Ok((l.feature_loss(), l.logit_loss()))
}

/// Scales the configured feature weights so the measured
/// `L_feature / L_logit` at initialization equals `target`. Returns the
/// calibrated config and the re-measured ratio.
pub fn calibrate_ratio(
    student: &Mlp,
    teacher: &Mlp,
    batch: &Dataset,
    base: &LossConfig<f64>,
    target: f64,
) -> Result<(LossConfig<f64>, f64)> {
    if !(target.is_finite() && target > 0.0) {
        return Err(invalid(format!("loss ratio target must be positive, got {target}")));
    }
    let (feature, logit) = loss_split(student, teacher, batch, base)?;
    if !(feature > 0.0 && logit > 0.0) {
        return Err(invalid(format!(
            "cannot calibrate: feature loss {feature}, logit loss {logit} on the calibration batch"
        )));
    }
    // every term is linear in the feature weights
    let scale = target * logit / feature;
    let cfg = LossConfig {
        gamma_feature: base.gamma_feature.iter().map(|g| g * scale).collect(),
        ..base.clone()
    };
    let (f2, l2) = loss_split(student, teacher, batch, &cfg)?;
    Ok((cfg, f2 / l2))
}

fn logit_ratio(run: &[crate::metrics::MetricsRecord]) -> f64 {
    run.iter()
        .rev()
        .find(|r| r.split == "test")
        .and_then(|r| r.site("logit"))
        .map_or(f64::NAN, |s| s.ps_pw)
}

fn final_accuracy(run: &[crate::metrics::MetricsRecord]) -> f64 {
    run.iter().rev().find(|r| r.split == "test").map_or(f64::NAN, |r| r.accuracy)
}

/// One training run: setting label, seed and loss.
type Job = (String, u64, LossConfig<f64>);

/// Trains every `(setting, seed)` pair in parallel and adds mean rows.
fn run_settings(
    cfg: &ExperimentConfig,
    teacher: &Mlp,
    train_data: &Dataset,
    test_data: &Dataset,
    jobs: Vec<Job>,
    order: &[String],
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|(label, seed, loss)| {
            let out = train(
                &cfg.student,
                &Objective::Cakd(loss.clone()),
                Some(teacher),
                train_data,
                test_data,
                &cfg.student_train(*seed),
                label,
            )?;
            Ok(AblationRow {
                setting: label.clone(),
                seed: Some(*seed),
                accuracy: final_accuracy(&out.metrics),
                ps_pw: logit_ratio(&out.metrics),
            })
        })
        .collect::<Result<_>>()?;
    let rank = |s: &str| order.iter().position(|o| o == s).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (rank(&r.setting), r.seed));
    let mut out = Vec::with_capacity(rows.len() + order.len());
    for label in order {
        let group: Vec<&AblationRow> = rows.iter().filter(|r| &r.setting == label).collect();
        let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
        let ratio: Vec<f64> = group.iter().map(|r| r.ps_pw).collect();
        out.extend(group.iter().map(|r| (*r).clone()));
        out.push(AblationRow {
            setting: label.clone(),
            seed: None,
            accuracy: mean_sd(&acc).0,
            ps_pw: mean_sd(&ratio).0,
        });
    }
    Ok(out)
}

fn fixed_jobs(cfg: &ExperimentConfig, settings: Vec<Setting>) -> (Vec<Job>, Vec<String>) {
    let order = settings.iter().map(|s| s.label.clone()).collect();
    let jobs = settings
        .into_iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s.label.clone(), seed, s.loss.clone())))
        .collect();
    (jobs, order)
}

/// The `(α, β)` sweep over an arbitrary grid.
pub fn ablate_alpha_beta(
    cfg: &ExperimentConfig,
    teacher: &Mlp,
    train_data: &Dataset,
    test_data: &Dataset,
    grid: &[(f64, f64)],
) -> Result<AblationTable> {
    let (jobs, order) = fixed_jobs(cfg, alpha_beta_settings(&cfg.loss, grid));
    Ok(AblationTable {
        sweep: Sweep::AlphaBeta,
        rows: run_settings(cfg, teacher, train_data, test_data, jobs, &order)?,
        calibration: Vec::new(),
    })
}

/// Runs `sweep` with the configured students against `teacher`.
pub fn ablate(cfg: &ExperimentConfig, teacher: &Mlp, sweep: Sweep) -> Result<AblationTable> {
    let (train_data, test_data) = cfg.data.load()?;
    crate::train::check_compatible(&cfg.student, Some(teacher.spec()), &test_data)?;
    match sweep {
        Sweep::AlphaBeta => ablate_alpha_beta(cfg, teacher, &train_data, &test_data, &ALPHA_BETA_GRID),
        Sweep::Components => {
            let settings = component_settings(&cfg.loss, cfg.student.tap_layers.len())?;
            let (jobs, order) = fixed_jobs(cfg, settings);
            Ok(AblationTable {
                sweep,
                rows: run_settings(cfg, teacher, &train_data, &test_data, jobs, &order)?,
                calibration: Vec::new(),
            })
        }
        Sweep::LossRatio => {
            let batch = calibration_batch(&test_data, cfg.data_seed());
            let mut jobs = Vec::new();
            let mut calibration = Vec::new();
            let order: Vec<String> = LOSS_RATIO_TARGETS.iter().map(|t| format!("ratio={t}")).collect();
            for (target, label) in LOSS_RATIO_TARGETS.iter().zip(&order) {
                for &seed in &cfg.seeds {
                    let student = Mlp::init(cfg.student.clone(), seed)?;
                    let (loss, measured) = calibrate_ratio(&student, teacher, &batch, &cfg.loss, *target)?;
                    if ((measured - target) / target).abs() > CALIBRATION_TOL {
                        return Err(format_err(format!(
                            "calibrated ratio {measured} misses target {target}"
                        )));
                    }
                    calibration.push((label.clone(), seed, *target, measured));
                    jobs.push((label.clone(), seed, loss));
                }
            }
            Ok(AblationTable {
                sweep,
                rows: run_settings(cfg, teacher, &train_data, &test_data, jobs, &order)?,
                calibration,
            })
        }
    }
}
