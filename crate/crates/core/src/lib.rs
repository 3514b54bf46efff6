//! Correlation-aware knowledge distillation.
//!
//! The loss kernels ([`prob`], [`partition`], [`decoupled`]) are generic over
//! [`Scalar`] (f32 or f64). The desk-scale trainer, data loaders and
//! experiment drivers work in f64.

pub mod data;
pub mod decoupled;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod partition;
pub mod prob;
pub mod scalar;
pub mod sgd;
pub mod train;

pub use decoupled::{
    cakd_total, cakd_total_with_grad, decouple, decouple_single_label, grad_student, kd_total_with_grad,
    plain_kl_with_grad, CakdLoss, ComponentWeights, DecoupledKl, LossConfig, Site, SiteLoss, TapActivations,
};
pub use data::Dataset;
pub use error::{Error, Result};
pub use metrics::{MetricsRecord, SiteMetrics};
pub use nn::{Activation, Mlp, MlpSpec};
pub use partition::{BinaryProb, ClusterProbs, Partition};
pub use prob::{kl_divergence, log_softmax, softmax, ProbVector};
pub use scalar::Scalar;
pub use sgd::{Schedule, Sgd};
pub use train::{train, DistillMode, Objective, TrainConfig};

pub type DecoupledKl64 = DecoupledKl<f64>;
pub type DecoupledKl32 = DecoupledKl<f32>;
pub type LossConfig64 = LossConfig<f64>;
pub type LossConfig32 = LossConfig<f32>;
pub type ProbVector64 = ProbVector<f64>;
pub type ProbVector32 = ProbVector<f32>;
pub type TapActivations64 = TapActivations<f64>;
