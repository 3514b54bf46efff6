//! Flat `key = value` experiment configuration.
//!
//! Blank lines and everything after `#` are ignored. Unknown keys are
//! rejected. Relative paths are resolved against the config file's directory.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | `blobs` | `blobs`, `idx` or `csv` |
//! | `blobs.classes` / `blobs.dim` | 4 / 8 | class count and input dimension |
//! | `blobs.train_per_class` / `blobs.test_per_class` | 3 / 250 | samples per class |
//! | `blobs.teacher_extra_per_class` | 200 | additional samples per class used only to train the teacher |
//! | `blobs.spread` | 0.22 | Gaussian standard deviation around unit-spaced centers |
//! | `blobs.seed` | 7 | data seed |
//! | `idx.train_images`, `idx.train_labels`, `idx.test_images`, `idx.test_labels` | | IDX file paths |
//! | `idx.train_limit` / `idx.test_limit` | all | keep the first N samples |
//! | `csv.train` / `csv.test` / `csv.classes` | | CSV paths, optional class count |
//! | `teacher.widths` / `student.widths` | `8,128,64,32,4` / `8,64,32,4` | layer widths |
//! | `teacher.activation` / `student.activation` | `relu` | `relu` or `tanh` |
//! | `teacher.taps` / `student.taps` | `1,2` / `0,1` | tapped hidden layers (widths must match pairwise) |
//! | `teacher.seed` | 0 | teacher initialization/shuffle seed |
//! | `teacher.epochs` / `teacher.lr` | `train.*` | teacher overrides |
//! | `loss.weighting` | `fixed` | `fixed` (α/β) or `teacher-mass` |
//! | `loss.alpha` / `loss.beta` | 8 / 2 | SCD / WCD weights |
//! | `loss.temperature` | 4 | softmax temperature |
//! | `loss.hard_label_weight` | 1 | cross-entropy weight |
//! | `loss.gamma_logit` | 1 | logit-site weight |
//! | `loss.gamma_feature` | `0.1,0.1` | per-tap weights |
//! | `loss.feature_k` | `⌈width/4⌉` | per-tap strong-cluster size |
//! | `loss.t_squared` | `true` | scale distillation terms by `T²` |
//! | `train.epochs` | 60 | epochs |
//! | `train.batch_size` | 16 | batch size |
//! | `train.lr` | 0.05 | base learning rate |
//! | `train.momentum` / `train.weight_decay` | 0.9 / 5e-4 | SGD |
//! | `train.warmup_epochs` / `train.milestones` / `train.decay` | scaled from 20 / 150,180,210 of 240 / 0.1 | schedule |
//! | `seeds` | `1,2,3,4,5` | student seeds |
//! | `output_dir` | `runs` | output directory |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{generate_blob_split, generate_blobs, load_csv, load_idx, Dataset};
use crate::decoupled::{ComponentWeights, LossConfig};
use crate::error::{invalid, Result};
use crate::nn::{Activation, MlpSpec};
use crate::sgd::Schedule;
use crate::train::TrainConfig;

const TEST_STREAM: u64 = 1;
const TEACHER_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        /// Extra samples per class seen only by the teacher.
        teacher_extra_per_class: usize,
        spread: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        classes: Option<usize>,
    },
}

impl DataSpec {
    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
                seed,
                ..
            } => {
                // same centers, independent noise for the test split
                let train = generate_blobs(*seed, *classes, *train_per_class, *dim, *spread)?;
                let test = generate_blob_split(*seed, TEST_STREAM, *classes, *test_per_class, *dim, *spread)?;
                Ok((train, test))
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                let classes = train.class_count.max(test.class_count);
                train.class_count = classes;
                test.class_count = classes;
                if let Some(n) = train_limit {
                    train = train.truncate(*n);
                }
                if let Some(n) = test_limit {
                    test = test.truncate(*n);
                }
                train.validate()?;
                test.validate()?;
                Ok((train, test))
            }
            DataSpec::Csv { train, test, classes } => {
                let mut tr = load_csv(train, *classes)?;
                let mut te = load_csv(test, *classes)?;
                let c = tr.class_count.max(te.class_count);
                tr.class_count = c;
                te.class_count = c;
                Ok((tr, te))
            }
        }
    }

    /// The teacher's training set: the student training set plus any
    /// teacher-only samples.
    pub fn teacher_train(&self, train: &Dataset) -> Result<Dataset> {
        match self {
            DataSpec::Blobs {
                classes,
                dim,
                teacher_extra_per_class,
                spread,
                seed,
                ..
            } if *teacher_extra_per_class > 0 => {
                let extra =
                    generate_blob_split(*seed, TEACHER_STREAM, *classes, *teacher_extra_per_class, *dim, *spread)?;
                train.clone().concat(&extra)
            }
            _ => Ok(train.clone()),
        }
    }

    /// Files this data source reads.
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DataSpec::Blobs { .. } => Vec::new(),
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DataSpec::Csv { train, test, .. } => vec![train, test],
        }
    }

    pub fn class_count(&self) -> Option<usize> {
        match self {
            DataSpec::Blobs { classes, .. } => Some(*classes),
            DataSpec::Csv { classes, .. } => *classes,
            DataSpec::Idx { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub teacher: MlpSpec,
    pub student: MlpSpec,
    pub loss: LossConfig<f64>,
    pub train: TrainConfig,
    pub teacher_train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale blobs task.
    fn default() -> Self {
        let train = TrainConfig {
            batch_size: 16,
            ..TrainConfig::recipe(0.05, 60, 0)
        };
        Self {
            data: DataSpec::Blobs {
                classes: 4,
                dim: 8,
                train_per_class: 3,
                test_per_class: 250,
                teacher_extra_per_class: 200,
                spread: 0.22,
                seed: 7,
            },
            teacher: MlpSpec {
                layer_widths: vec![8, 128, 64, 32, 4],
                activation: Activation::Relu,
                tap_layers: vec![1, 2],
            },
            student: MlpSpec {
                layer_widths: vec![8, 64, 32, 4],
                activation: Activation::Relu,
                tap_layers: vec![0, 1],
            },
            loss: LossConfig {
                gamma_feature: vec![0.1, 0.1],
                ..LossConfig::default()
            },
            teacher_train: train.clone(),
            train,
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| invalid(format!("{key}: cannot parse `{}`", s.trim())))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: cannot parse `{v}`")))
}

/// Parses `key = value` lines into an ordered map; duplicate keys are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("config line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(invalid(format!("config line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv = parse_pairs(text)?;
        let mut cfg = Self::default();
        let mut take = |k: &str| kv.remove(k);
        let path = |v: String| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };

        let dataset = take("dataset").unwrap_or_else(|| "blobs".into());
        cfg.data = match dataset.as_str() {
            "blobs" => {
                let DataSpec::Blobs {
                    mut classes,
                    mut dim,
                    mut train_per_class,
                    mut test_per_class,
                    mut teacher_extra_per_class,
                    mut spread,
                    mut seed,
                } = cfg.data.clone()
                else {
                    unreachable!("default is blobs")
                };
                if let Some(v) = take("blobs.classes") {
                    classes = parse_one("blobs.classes", &v)?;
                }
                if let Some(v) = take("blobs.dim") {
                    dim = parse_one("blobs.dim", &v)?;
                }
                if let Some(v) = take("blobs.train_per_class") {
                    train_per_class = parse_one("blobs.train_per_class", &v)?;
                }
                if let Some(v) = take("blobs.test_per_class") {
                    test_per_class = parse_one("blobs.test_per_class", &v)?;
                }
                if let Some(v) = take("blobs.teacher_extra_per_class") {
                    teacher_extra_per_class = parse_one("blobs.teacher_extra_per_class", &v)?;
                }
                if let Some(v) = take("blobs.spread") {
                    spread = parse_one("blobs.spread", &v)?;
                }
                if let Some(v) = take("blobs.seed") {
                    seed = parse_one("blobs.seed", &v)?;
                }
                DataSpec::Blobs {
                    classes,
                    dim,
                    train_per_class,
                    test_per_class,
                    teacher_extra_per_class,
                    spread,
                    seed,
                }
            }
            "idx" => {
                let mut req = |k: &str| take(k).map(path).ok_or_else(|| invalid(format!("missing key `{k}`")));
                let (train_images, train_labels) = (req("idx.train_images")?, req("idx.train_labels")?);
                let (test_images, test_labels) = (req("idx.test_images")?, req("idx.test_labels")?);
                DataSpec::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                    train_limit: take("idx.train_limit").map(|v| parse_one("idx.train_limit", &v)).transpose()?,
                    test_limit: take("idx.test_limit").map(|v| parse_one("idx.test_limit", &v)).transpose()?,
                }
            }
            "csv" => DataSpec::Csv {
                train: take("csv.train").map(path).ok_or_else(|| invalid("missing key `csv.train`"))?,
                test: take("csv.test").map(path).ok_or_else(|| invalid("missing key `csv.test`"))?,
                classes: take("csv.classes").map(|v| parse_one("csv.classes", &v)).transpose()?,
            },
            other => return Err(invalid(format!("unknown dataset `{other}`"))),
        };

        for (prefix, spec) in [("teacher", &mut cfg.teacher), ("student", &mut cfg.student)] {
            if let Some(v) = take(&format!("{prefix}.widths")) {
                spec.layer_widths = parse_list(&format!("{prefix}.widths"), &v)?;
            }
            if let Some(v) = take(&format!("{prefix}.activation")) {
                spec.activation = v.parse()?;
            }
            if let Some(v) = take(&format!("{prefix}.taps")) {
                spec.tap_layers = parse_list(&format!("{prefix}.taps"), &v)?;
            }
        }

        let loss = &mut cfg.loss;
        let weighting = take("loss.weighting").unwrap_or_else(|| "fixed".into());
        let alpha = take("loss.alpha").map(|v| parse_one("loss.alpha", &v)).transpose()?.unwrap_or(8.0);
        let beta = take("loss.beta").map(|v| parse_one("loss.beta", &v)).transpose()?.unwrap_or(2.0);
        loss.weights = match weighting.as_str() {
            "fixed" => ComponentWeights::Fixed { alpha, beta },
            "teacher-mass" => ComponentWeights::TeacherMass,
            other => return Err(invalid(format!("unknown loss.weighting `{other}`"))),
        };
        if let Some(v) = take("loss.temperature") {
            loss.temperature = parse_one("loss.temperature", &v)?;
        }
        if let Some(v) = take("loss.hard_label_weight") {
            loss.hard_label_weight = parse_one("loss.hard_label_weight", &v)?;
        }
        if let Some(v) = take("loss.gamma_logit") {
            loss.gamma_logit = parse_one("loss.gamma_logit", &v)?;
        }
        if let Some(v) = take("loss.gamma_feature") {
            loss.gamma_feature = parse_list("loss.gamma_feature", &v)?;
        }
        if let Some(v) = take("loss.feature_k") {
            loss.feature_k = parse_list("loss.feature_k", &v)?;
        }
        if let Some(v) = take("loss.t_squared") {
            loss.scale_by_t_squared = parse_one("loss.t_squared", &v)?;
        }

        let tr = &mut cfg.train;
        if let Some(v) = take("train.epochs") {
            tr.epochs = parse_one("train.epochs", &v)?;
        }
        if let Some(v) = take("train.lr") {
            tr.schedule.base_lr = parse_one("train.lr", &v)?;
        }
        let scaled = Schedule::scaled(tr.schedule.base_lr, tr.epochs);
        tr.schedule.warmup_epochs = scaled.warmup_epochs;
        tr.schedule.milestones = scaled.milestones;
        if let Some(v) = take("train.batch_size") {
            tr.batch_size = parse_one("train.batch_size", &v)?;
        }
        if let Some(v) = take("train.momentum") {
            tr.momentum = parse_one("train.momentum", &v)?;
        }
        if let Some(v) = take("train.weight_decay") {
            tr.weight_decay = parse_one("train.weight_decay", &v)?;
        }
        if let Some(v) = take("train.warmup_epochs") {
            tr.schedule.warmup_epochs = parse_one("train.warmup_epochs", &v)?;
        }
        if let Some(v) = take("train.milestones") {
            tr.schedule.milestones = parse_list("train.milestones", &v)?;
        }
        if let Some(v) = take("train.decay") {
            tr.schedule.decay_factor = parse_one("train.decay", &v)?;
        }

        cfg.teacher_train = cfg.train.clone();
        let tt = &mut cfg.teacher_train;
        let teacher_epochs = take("teacher.epochs").map(|v| parse_one("teacher.epochs", &v)).transpose()?;
        let teacher_lr = take("teacher.lr").map(|v| parse_one("teacher.lr", &v)).transpose()?;
        if teacher_epochs.is_some() || teacher_lr.is_some() {
            tt.epochs = teacher_epochs.unwrap_or(tt.epochs);
            let lr = teacher_lr.unwrap_or(tt.schedule.base_lr);
            tt.schedule = Schedule {
                decay_factor: tt.schedule.decay_factor,
                ..Schedule::scaled(lr, tt.epochs)
            };
        }
        tt.seed = take("teacher.seed").map(|v| parse_one("teacher.seed", &v)).transpose()?.unwrap_or(0);

        if let Some(v) = take("seeds") {
            cfg.seeds = parse_list("seeds", &v)?;
        }
        if let Some(v) = take("output_dir") {
            cfg.output_dir = path(v);
        }

        if let Some(k) = kv.keys().next() {
            return Err(invalid(format!("unknown config key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for path in self.data.paths() {
            if !path.is_file() {
                return Err(invalid(format!("data file {} does not exist", path.display())));
            }
        }
        self.teacher.validate()?;
        self.student.validate()?;
        self.loss.validate()?;
        self.train.schedule.validate()?;
        self.teacher_train.schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.teacher.output_width() != self.student.output_width() {
            return Err(invalid("teacher and student class counts differ"));
        }
        if let Some(c) = self.data.class_count() {
            if self.student.output_width() != c {
                return Err(invalid(format!(
                    "models have {} outputs but the dataset has {c} classes",
                    self.student.output_width()
                )));
            }
        }
        if self.teacher.tap_widths() != self.student.tap_widths() {
            return Err(invalid(format!(
                "teacher tap widths {:?} must match student tap widths {:?}",
                self.teacher.tap_widths(),
                self.student.tap_widths()
            )));
        }
        if self.loss.gamma_feature.len() > self.student.tap_layers.len() {
            return Err(invalid("more feature gammas than student taps"));
        }
        for (tap, w) in self.student.tap_widths().into_iter().enumerate() {
            let k = self.loss.k_for_tap(tap, w);
            if k == 0 || k >= w {
                return Err(invalid(format!("feature_k {k} invalid for tap {tap} of width {w}")));
            }
        }
        Ok(())
    }

    /// Seed for data-dependent choices such as the calibration batch.
    pub fn data_seed(&self) -> u64 {
        match self.data {
            DataSpec::Blobs { seed, .. } => seed,
            _ => self.teacher_train.seed,
        }
    }

    /// The student's training config for one seed.
    pub fn student_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}
