//! SGD with momentum and coupled weight decay, plus a warmup/milestone schedule.

use crate::error::{invalid, Result};
use crate::nn::{Mlp, Params};

/// Linear warmup followed by step decay at fixed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    /// Multiplier applied at each milestone, in `(0, 1]`.
    pub decay_factor: f64,
}

impl Schedule {
    /// 240 epochs with milestones 150/180/210 and a 20-epoch warmup, scaled
    /// (rounding down) to `epochs`.
    pub fn scaled(base_lr: f64, epochs: usize) -> Self {
        let at = |e: f64| (e * epochs as f64 / 240.0).floor() as usize;
        Self {
            base_lr,
            warmup_epochs: at(20.0),
            milestones: vec![at(150.0), at(180.0), at(210.0)],
            decay_factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(invalid(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch: `base·(e+1)/warmup` during warmup,
    /// then `base·decay^(milestones passed)`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    velocity: Option<Params>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        if !(0.0..1.0).contains(&momentum) || !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1) and weight decay be >= 0 (got {momentum}, {weight_decay})"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            schedule,
            velocity: None,
        })
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr(epoch)·v`.
    pub fn step(&mut self, model: &mut Mlp, grads: &Params, epoch: usize) -> Result<()> {
        if grads.len() != model.layers.len()
            || grads
                .iter()
                .zip(&model.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(invalid("gradient shapes do not match the model"));
        }
        let lr = self.schedule.lr(epoch);
        let velocity = self.velocity.get_or_insert_with(|| {
            grads
                .iter()
                .map(|g| {
                    let mut z = g.clone();
                    z.weights.fill(0.0);
                    z.bias.fill(0.0);
                    z
                })
                .collect()
        });
        let (mu, wd) = (self.momentum, self.weight_decay);
        let params = model.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()));
        let grads = grads.iter().flat_map(|l| l.weights.iter().chain(&l.bias));
        let vel = velocity.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()));
        for ((p, g), v) in params.zip(grads).zip(vel) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};

    fn sched(warmup: usize, milestones: &[usize]) -> Schedule {
        Schedule {
            base_lr: 0.05,
            warmup_epochs: warmup,
            milestones: milestones.to_vec(),
            decay_factor: 0.1,
        }
    }

    #[test]
    fn warmup_and_milestones() {
        let s = sched(20, &[150, 180, 210]);
        assert!((s.lr(0) - 0.05 / 20.0).abs() < 1e-18);
        assert!((s.lr(19) - 0.05).abs() < 1e-18);
        assert_eq!(s.lr(20), 0.05);
        assert!((s.lr(150) - 0.005).abs() < 1e-15);
        assert!((s.lr(239) - 0.05 / 1000.0).abs() < 1e-15);
        let none = sched(0, &[]);
        assert_eq!(none.lr(0), 0.05);
    }

    #[test]
    fn desk_scale_proportions() {
        let s = Schedule::scaled(0.05, 60);
        assert_eq!(s.warmup_epochs, 5);
        assert_eq!(s.milestones, vec![37, 45, 52]);
        let p = Schedule::scaled(0.05, 240);
        assert_eq!((p.warmup_epochs, p.milestones.clone()), (20, vec![150, 180, 210]));
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let spec = MlpSpec {
            layer_widths: vec![2, 2, 2],
            activation: Activation::Relu,
            tap_layers: vec![],
        };
        let mut m = Mlp::init(spec, 3).unwrap();
        let before = m.clone();
        let mut grads = m.layers.clone();
        for (i, p) in grads.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut())).enumerate() {
            *p = 0.1 * i as f64 - 0.3;
        }
        let mut opt = Sgd::new(0.0, 0.0, sched(0, &[])).unwrap();
        opt.schedule.base_lr = 1.0;
        opt.step(&mut m, &grads, 0).unwrap();
        let g = grads.iter().flat_map(|l| l.weights.iter().chain(&l.bias));
        for ((a, b), g) in m.params().zip(before.params()).zip(g) {
            assert_eq!(*a, b - g);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let spec = MlpSpec {
            layer_widths: vec![1, 1, 1],
            activation: Activation::Relu,
            tap_layers: vec![],
        };
        let mut m = Mlp::zeros(spec).unwrap();
        let mut grads = m.layers.clone();
        grads[0].bias[0] = 1.0;
        let mut opt = Sgd::new(0.9, 0.0, Schedule { base_lr: 1.0, ..sched(0, &[]) }).unwrap();
        opt.step(&mut m, &grads, 0).unwrap();
        opt.step(&mut m, &grads, 1).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((m.layers[0].bias[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(1.0, 0.0, sched(0, &[])).is_err());
        assert!(Sgd::new(0.9, -1.0, sched(0, &[])).is_err());
        assert!(Sgd::new(0.9, 0.0, Schedule { decay_factor: 0.0, ..sched(0, &[]) }).is_err());
    }
}
