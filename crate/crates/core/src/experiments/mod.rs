//! Experiment drivers behind the command-line tool.
//!
//! Every driver is deterministic: the same config and seeds produce
//! byte-identical checkpoints and CSV files. Independent student runs execute
//! in parallel and are collected in seed order.

pub mod ablate;
pub mod config;
pub mod report;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{write_metrics, MetricsRecord};
use crate::nn::Mlp;
use crate::train::{train, DistillMode, Objective};

pub use ablate::{ablate, ablate_alpha_beta, AblationRow, AblationTable, Sweep, ALPHA_BETA_GRID, LOSS_RATIO_TARGETS};
pub use config::{DataSpec, ExperimentConfig};
pub use report::{report, Report};
pub use verify::{verify, VerifyOptions, VerifyReport};

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.csv";

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub model: Mlp,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// One trained student.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub seed: u64,
    pub model: Mlp,
    pub metrics: Vec<MetricsRecord>,
}

impl StudentRun {
    /// Test accuracy after the last epoch (initial weights if no epochs ran).
    pub fn final_record(&self, split: &str) -> Option<&MetricsRecord> {
        self.metrics.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub mode: DistillMode,
    pub students: Vec<StudentRun>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Trains the teacher with cross-entropy only, without writing anything.
pub fn fit_teacher(cfg: &ExperimentConfig, train_data: &Dataset, test_data: &Dataset) -> Result<(Mlp, Vec<MetricsRecord>)> {
    let pool = cfg.data.teacher_train(train_data)?;
    let out = train(
        &cfg.teacher,
        &Objective::CrossEntropy,
        None,
        &pool,
        test_data,
        &cfg.teacher_train,
        "teacher",
    )?;
    Ok((out.model, out.metrics))
}

/// Loads the data, trains the teacher and writes its checkpoint and metrics
/// into the output directory.
pub fn train_teacher(cfg: &ExperimentConfig) -> Result<TeacherRun> {
    let (train_data, test_data) = cfg.data.load()?;
    let (model, metrics) = fit_teacher(cfg, &train_data, &test_data)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let checkpoint = cfg.output_dir.join(TEACHER_CHECKPOINT);
    let metrics_path = cfg.output_dir.join(TEACHER_METRICS);
    model.save(&checkpoint)?;
    write_csv(&metrics_path, &metrics)?;
    Ok(TeacherRun {
        model,
        metrics,
        checkpoint,
        metrics_path,
    })
}

/// Trains one student per configured seed under `objective`, in parallel.
pub fn fit_students(
    cfg: &ExperimentConfig,
    objective: &Objective,
    teacher: Option<&Mlp>,
    train_data: &Dataset,
    test_data: &Dataset,
    run_id: &str,
) -> Result<Vec<StudentRun>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let out = train(
                &cfg.student,
                objective,
                teacher,
                train_data,
                test_data,
                &cfg.student_train(seed),
                run_id,
            )?;
            Ok(StudentRun {
                seed,
                model: out.model,
                metrics: out.metrics,
            })
        })
        .collect()
}

/// Distills one student per seed in `mode` and writes
/// `student-<mode>-seed<s>.ckpt` plus `distill-<mode>.csv`.
pub fn distill(cfg: &ExperimentConfig, teacher: &Mlp, mode: DistillMode) -> Result<DistillRun> {
    let (train_data, test_data) = cfg.data.load()?;
    let students = fit_students(
        cfg,
        &mode.objective(&cfg.loss),
        Some(teacher),
        &train_data,
        &test_data,
        mode.name(),
    )?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut checkpoints = Vec::with_capacity(students.len());
    for s in &students {
        let path = cfg.output_dir.join(format!("student-{}-seed{}.ckpt", mode.name(), s.seed));
        s.model.save(&path)?;
        checkpoints.push(path);
    }
    let all: Vec<MetricsRecord> = students.iter().flat_map(|s| s.metrics.iter().cloned()).collect();
    let metrics_path = cfg.output_dir.join(format!("distill-{}.csv", mode.name()));
    write_csv(&metrics_path, &all)?;
    Ok(DistillRun {
        mode,
        students,
        checkpoints,
        metrics_path,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_examples() {
        let (m, s) = mean_sd(&[0.90, 0.92]);
        assert!((m - 0.91).abs() < 1e-12);
        assert!((s - 0.014142135623730963).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.5]), (0.5, 0.0));
    }
}
