//! Randomized self-check of the loss identities and gradients.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::decoupled::{
    cakd_total_with_grad, decouple, decouple_single_label, grad_student, plain_kl_with_grad, ComponentWeights,
    LossConfig,
};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::oracle::{self, Dd};
use crate::partition::{product_identity_check, Partition};

/// Loss identities must hold to `IDENTITY_TOL · max(1, KL)`.
pub const IDENTITY_TOL: f64 = 1e-9;
pub const RECOVERY_LOSS_TOL: f64 = 1e-9;
pub const RECOVERY_GRAD_TOL: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance of analytic vs central-difference gradients of the decoupled loss.
pub const LOSS_GRAD_TOL: f64 = 1e-5;
/// Relative tolerance for the full training loss w.r.t. network parameters.
pub const NET_GRAD_TOL: f64 = 1e-4;
/// Coordinates with smaller analytic and numeric gradients are not compared.
pub const GRAD_SKIP: f64 = 1e-8;
/// Size of the corruption added by [`VerifyOptions::inject_fault`].
pub const FAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Draws for each identity property.
    pub identity_draws: usize,
    pub product_draws: usize,
    pub gradient_draws: usize,
    pub network_draws: usize,
    /// Adds [`FAULT_EPSILON`] to the recomposed KL, which must make the
    /// identity checks fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            identity_draws: 10_000,
            product_draws: 1_000,
            gradient_draws: 100,
            network_draws: 5,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Largest error measure seen, in the property's own units.
    pub worst: f64,
}

impl PropertyResult {
    pub fn ok(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::ok)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.properties {
            let status = if p.ok() { "PASS" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{status} {:<22} {:>6}/{:<6} worst {:.3e}",
                p.name, p.passed, p.total, p.worst
            );
        }
        let _ = writeln!(out, "overall: {}", if self.all_passed() { "PASS" } else { "FAIL" });
        out
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            total: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, ok: bool, err: f64) {
        self.total += 1;
        if ok {
            self.passed += 1;
        }
        // NaN errors count as failures and poison `worst`
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name,
            passed: self.passed,
            total: self.total,
            worst: self.worst,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_partition(rng: &mut ChaCha8Rng, classes: usize) -> Partition {
    let mut idx: Vec<usize> = (0..classes).collect();
    idx.shuffle(rng);
    let k = rng.random_range(1..classes);
    Partition::from_strong(idx[..k].iter().copied(), classes).expect("1 <= k < classes")
}

fn random_weights(rng: &mut ChaCha8Rng) -> ComponentWeights<f64> {
    ComponentWeights::Fixed {
        alpha: rng.random_range(0.5..8.0),
        beta: rng.random_range(0.5..8.0),
    }
}

/// `|a − n| / max(|a|, |n|)`, or `None` when both are below [`GRAD_SKIP`].
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    (scale > GRAD_SKIP).then(|| (analytic - numeric).abs() / scale)
}

pub fn verify(opts: &VerifyOptions) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault = if opts.inject_fault { FAULT_EPSILON } else { 0.0 };
    let properties = vec![
        decoupling_identity(&mut rng, opts.identity_draws, fault),
        single_label_identity(&mut rng, opts.identity_draws, fault),
        product_identity(&mut rng, opts.product_draws),
        loss_gradient(&mut rng, opts.gradient_draws),
        recovery(&mut rng, opts.gradient_draws),
        network_gradient(&mut rng, opts.network_draws),
    ];
    VerifyReport { properties }
}

fn draw_pair(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let scale = rng.random_range(0.5..5.0);
    let t = rng.random_range(0.5..8.0);
    (normal_vec(rng, classes, scale), normal_vec(rng, classes, scale), t)
}

fn decoupling_identity(rng: &mut ChaCha8Rng, draws: usize, fault: f64) -> PropertyResult {
    let mut tally = Tally::new("decoupling-identity");
    for _ in 0..draws {
        let classes = rng.random_range(2..=512);
        let (ft, fs, t) = draw_pair(rng, classes);
        let part = random_partition(rng, classes);
        let cfg = LossConfig {
            temperature: t,
            ..LossConfig::default()
        };
        let d = decouple(&ft, &fs, &part, &cfg).expect("valid draw");
        let err = (d.plain_kl - (d.recomposed() + fault)).abs() / d.plain_kl.max(1.0);
        tally.record(err <= IDENTITY_TOL, err);
    }
    tally.finish()
}

fn single_label_identity(rng: &mut ChaCha8Rng, draws: usize, fault: f64) -> PropertyResult {
    let mut tally = Tally::new("single-label-identity");
    for _ in 0..draws {
        let classes = rng.random_range(2..=512);
        let (ft, fs, t) = draw_pair(rng, classes);
        let target = rng.random_range(0..classes);
        let cfg = LossConfig {
            temperature: t,
            ..LossConfig::default()
        };
        let d = decouple_single_label(&ft, &fs, target, &cfg).expect("valid draw");
        let recomposed = d.bcd + d.p_w_teacher * d.wcd + fault;
        let err = (d.plain_kl - recomposed).abs() / d.plain_kl.max(1.0);
        tally.record(err <= IDENTITY_TOL && d.scd == 0.0, err);
    }
    tally.finish()
}

fn product_identity(rng: &mut ChaCha8Rng, draws: usize) -> PropertyResult {
    let mut tally = Tally::new("product-identity");
    for _ in 0..draws {
        let classes = rng.random_range(2..=512);
        let (f, _, t) = draw_pair(rng, classes);
        let part = random_partition(rng, classes);
        tally.record(product_identity_check(&f, &part, t), 0.0);
    }
    tally.finish()
}

fn loss_gradient(rng: &mut ChaCha8Rng, draws: usize) -> PropertyResult {
    let mut tally = Tally::new("loss-gradient");
    for _ in 0..draws {
        let classes = rng.random_range(2..=16);
        let (ft, fs, t) = draw_pair(rng, classes);
        let part = random_partition(rng, classes);
        let cfg = LossConfig {
            temperature: t,
            weights: random_weights(rng),
            ..LossConfig::default()
        };
        let g = grad_student(&ft, &fs, &part, &cfg).expect("valid draw");
        let teacher: Vec<Dd> = ft.iter().map(|&v| Dd::new(v)).collect();
        let loss = |s: &[f64]| {
            let s: Vec<Dd> = s.iter().map(|&v| Dd::new(v)).collect();
            oracle::decoupled_loss(&teacher, &s, &part, Dd::new(t), &cfg.weights)
        };
        let worst = (0..classes)
            .filter_map(|j| relative_error(g[j], oracle::central_difference(&fs, j, FD_STEP, loss)))
            .fold(0.0, f64::max);
        tally.record(worst <= LOSS_GRAD_TOL, worst);
    }
    tally.finish()
}

fn recovery(rng: &mut ChaCha8Rng, draws: usize) -> PropertyResult {
    let mut tally = Tally::new("recovery-to-kd");
    for _ in 0..draws {
        let classes = rng.random_range(2..=64);
        let (ft, fs, t) = draw_pair(rng, classes);
        let part = random_partition(rng, classes);
        let cfg = LossConfig {
            temperature: t,
            weights: ComponentWeights::TeacherMass,
            ..LossConfig::default()
        };
        let d = decouple(&ft, &fs, &part, &cfg).expect("valid draw");
        let g = grad_student(&ft, &fs, &part, &cfg).expect("valid draw");
        let (kl, kg) = plain_kl_with_grad(&ft, &fs, t).expect("valid draw");
        let loss_err = (d.weighted_total - kl).abs();
        let grad_err = g.iter().zip(&kg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        tally.record(
            loss_err <= RECOVERY_LOSS_TOL && grad_err <= RECOVERY_GRAD_TOL,
            loss_err.max(grad_err),
        );
    }
    tally.finish()
}

fn network_gradient(rng: &mut ChaCha8Rng, draws: usize) -> PropertyResult {
    let mut tally = Tally::new("network-gradient");
    // tanh keeps the loss smooth for finite differences; 77 and 416 parameters
    let shapes: [&[usize]; 2] = [&[3, 6, 5, 3], &[8, 16, 12, 4]];
    for draw in 0..draws {
        let widths = shapes[draw % shapes.len()];
        let spec = MlpSpec {
            layer_widths: widths.to_vec(),
            activation: Activation::Tanh,
            tap_layers: vec![0, 1],
        };
        let student = Mlp::init(spec.clone(), rng.random()).expect("valid spec");
        let teacher = Mlp::init(spec, rng.random()).expect("valid spec");
        let batch = 4;
        let (inputs, classes) = (widths[0], widths[widths.len() - 1]);
        let x: Vec<Vec<f64>> = (0..batch).map(|_| normal_vec(rng, inputs, 1.0)).collect();
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let cfg = LossConfig {
            weights: random_weights(rng),
            temperature: rng.random_range(1.0..6.0),
            gamma_feature: vec![0.5, 0.3],
            ..LossConfig::default()
        };
        let t_taps = teacher.forward_with_taps(&x).expect("shapes checked");
        let pass = student.forward(&x).expect("shapes checked");
        let (_, upstream) =
            cakd_total_with_grad(&t_taps, pass.taps(), &y, &cfg).expect("shapes checked");
        let grads = student.backward(&pass, &upstream).expect("shapes checked");
        let analytic: Vec<f64> = grads.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied().collect();
        let numeric = oracle::network_gradient_fd(&student, &t_taps, &x, &y, &cfg, FD_STEP);
        let worst = analytic
            .iter()
            .zip(&numeric)
            .filter_map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        tally.record(worst <= NET_GRAD_TOL, worst);
    }
    tally.finish()
}
