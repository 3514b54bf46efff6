//! Reference evaluations of the training loss written directly from the
//! definitions, for finite-difference gradient checks.
//!
//! Everything is generic over [`RefNum`]; evaluating in double-double
//! ([`Dd`]) keeps the rounding noise of a central difference far below
//! the tolerances it is compared against, so the check measures the analytic
//! gradient rather than cancellation in the loss.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::decoupled::{ComponentWeights, LossConfig, TapActivations};
use crate::nn::{Activation, Mlp};
use crate::partition::Partition;

pub trait RefNum:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn of(v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn to_f64(self) -> f64;
}

impl RefNum for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Double-double number: an unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`,
/// giving about 106 bits of precision.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

const LN_2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.3190468138462996e-17,
};

impl Dd {
    pub const fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    fn scale(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}

impl RefNum for Dd {
    fn of(v: f64) -> Self {
        Dd::new(v)
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::new(0.0);
        }
        // x = k ln2 + r, then exp(r) = (exp(r / 2^10))^(2^10)
        let k = (self.hi / LN_2.hi).round();
        let r = (self - LN_2 * Dd::new(k)).scale(-10);
        let mut term = Dd::new(1.0);
        let mut acc = Dd::new(1.0);
        for n in 1..=20 {
            term = term * r / Dd::new(n as f64);
            acc = acc + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            acc = acc * acc;
        }
        acc.scale(k as i32)
    }

    fn ln(self) -> Self {
        // Newton on exp(y) = x; each step doubles the correct digits
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::new(1.0);
        }
        y
    }

    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Dd::new(self.hi.signum());
        }
        let e = (self + self).exp();
        (e - Dd::new(1.0)) / (e + Dd::new(1.0))
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

fn sum<N: RefNum>(v: impl IntoIterator<Item = N>) -> N {
    v.into_iter().fold(N::of(0.0), |a, b| a + b)
}

/// `softmax(values / t)`, shifted by the maximum.
pub fn softmax<N: RefNum>(values: &[N], t: N) -> Vec<N> {
    let m = values.iter().copied().fold(values[0], |a, b| if b > a { b } else { a });
    let e: Vec<N> = values.iter().map(|&v| ((v - m) / t).exp()).collect();
    let z = sum(e.iter().copied());
    e.into_iter().map(|v| v / z).collect()
}

fn kl<N: RefNum>(p: &[N], q: &[N]) -> N {
    sum(p.iter().zip(q).filter(|(pi, _)| pi.to_f64() > 0.0).map(|(&pi, &qi)| pi * (pi / qi).ln()))
}

/// `bcd + a·scd + b·wcd` for one vector pair.
pub fn decoupled_loss<N: RefNum>(
    teacher: &[N],
    student: &[N],
    part: &Partition,
    t: N,
    weights: &ComponentWeights<f64>,
) -> N {
    let p = softmax(teacher, t);
    let q = softmax(student, t);
    let mass = |v: &[N], idx: &[usize]| sum(idx.iter().map(|&i| v[i]));
    let within = |v: &[N], idx: &[usize]| {
        let m = mass(v, idx);
        idx.iter().map(|&i| v[i] / m).collect::<Vec<N>>()
    };
    let (ps, pw) = (mass(&p, part.strong()), mass(&p, part.weak()));
    let (qs, qw) = (mass(&q, part.strong()), mass(&q, part.weak()));
    let bcd = kl(&[ps, pw], &[qs, qw]);
    let scd = kl(&within(&p, part.strong()), &within(&q, part.strong()));
    let wcd = kl(&within(&p, part.weak()), &within(&q, part.weak()));
    let (a, b) = match *weights {
        ComponentWeights::Fixed { alpha, beta } => (N::of(alpha), N::of(beta)),
        ComponentWeights::TeacherMass => (ps, pw),
    };
    bcd + a * scd + b * wcd
}

/// Plain `KL(softmax(teacher/t) ‖ softmax(student/t))`.
pub fn plain_kl<N: RefNum>(teacher: &[N], student: &[N], t: N) -> N {
    kl(&softmax(teacher, t), &softmax(student, t))
}

/// Logits and tapped activations of `model` with parameters replaced by
/// `params` (in [`Mlp::params`] order).
pub fn forward<N: RefNum>(model: &Mlp, params: &[N], batch: &[Vec<f64>]) -> (Vec<Vec<N>>, Vec<Vec<Vec<N>>>) {
    let spec = model.spec();
    let last = model.layers.len() - 1;
    let mut offsets = Vec::with_capacity(model.layers.len());
    let mut off = 0;
    for l in &model.layers {
        offsets.push(off);
        off += l.weights.len() + l.bias.len();
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut taps: Vec<Vec<Vec<N>>> = vec![Vec::with_capacity(batch.len()); spec.tap_layers.len()];
    for x in batch {
        let mut h: Vec<N> = x.iter().map(|&v| N::of(v)).collect();
        for (l, layer) in model.layers.iter().enumerate() {
            let w = &params[offsets[l]..offsets[l] + layer.weights.len()];
            let b = &params[offsets[l] + layer.weights.len()..offsets[l] + layer.weights.len() + layer.outputs];
            let z: Vec<N> = (0..layer.outputs)
                .map(|o| b[o] + sum((0..layer.inputs).map(|i| w[o * layer.inputs + i] * h[i])))
                .collect();
            h = if l < last {
                z.into_iter()
                    .map(|v| match spec.activation {
                        Activation::Relu => {
                            if v > N::of(0.0) {
                                v
                            } else {
                                N::of(0.0)
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                z
            };
            if let Some(k) = spec.tap_layers.iter().position(|&t| t == l) {
                taps[k].push(h.clone());
            }
        }
        logits.push(h);
    }
    (logits, taps)
}

/// The full training loss: weighted hard-label cross-entropy plus the
/// logit-site and feature-site decoupled terms, with the teacher's top-k
/// units as the strong cluster of each feature site.
pub fn training_loss<N: RefNum>(
    teacher: &TapActivations<f64>,
    logits: &[Vec<N>],
    features: &[Vec<Vec<N>>],
    targets: &[usize],
    cfg: &LossConfig<f64>,
) -> N {
    let n = N::of(logits.len() as f64);
    let t = N::of(cfg.temperature);
    let scale = N::of(if cfg.scale_by_t_squared {
        cfg.temperature * cfg.temperature
    } else {
        1.0
    });
    let lift = |v: &[f64]| v.iter().map(|&x| N::of(x)).collect::<Vec<N>>();
    let ce = sum(logits.iter().zip(targets).map(|(z, &y)| -softmax(z, N::of(1.0))[y].ln())) / n;
    let mut total = N::of(cfg.hard_label_weight) * ce;
    if cfg.gamma_logit != 0.0 {
        let site = sum(logits.iter().zip(&teacher.logits).zip(targets).map(|((s, tz), &y)| {
            let part = Partition::single_label(s.len(), y).expect("at least two classes");
            decoupled_loss(&lift(tz), s, &part, t, &cfg.weights)
        })) / n;
        total = total + N::of(cfg.gamma_logit) * scale * site;
    }
    for (tap, (student, teach)) in features.iter().zip(&teacher.features).enumerate() {
        let gamma = cfg.gamma_for_tap(tap);
        if gamma == 0.0 {
            continue;
        }
        let site = sum(student.iter().zip(teach).map(|(s, tv)| {
            let part = Partition::top_k(tv, cfg.k_for_tap(tap, tv.len())).expect("valid k");
            decoupled_loss(&lift(tv), s, &part, t, &cfg.weights)
        })) / n;
        total = total + N::of(gamma) * scale * site;
    }
    total
}

/// Central difference `(f(x + h e_j) − f(x − h e_j)) / (x_j⁺ − x_j⁻)` with the
/// perturbed points rounded to f64 and `f` evaluated in double-double.
pub fn central_difference(x: &[f64], j: usize, h: f64, mut f: impl FnMut(&[f64]) -> Dd) -> f64 {
    let mut xp = x.to_vec();
    let (up_x, down_x) = (x[j] + h, x[j] - h);
    xp[j] = up_x;
    let up = f(&xp);
    xp[j] = down_x;
    let down = f(&xp);
    ((up - down) / Dd::new(up_x - down_x)).to_f64()
}

/// `∂ loss / ∂ θ_j` of the full training loss by double-double central
/// differences.
pub fn network_gradient_fd(
    model: &Mlp,
    teacher: &TapActivations<f64>,
    batch: &[Vec<f64>],
    targets: &[usize],
    cfg: &LossConfig<f64>,
    h: f64,
) -> Vec<f64> {
    let theta: Vec<f64> = model.params().copied().collect();
    (0..theta.len())
        .map(|j| {
            central_difference(&theta, j, h, |p| {
                let lifted: Vec<Dd> = p.iter().map(|&v| Dd::new(v)).collect();
                let (logits, features) = forward(model, &lifted, batch);
                training_loss(teacher, &logits, &features, targets, cfg)
            })
        })
        .collect()
}
