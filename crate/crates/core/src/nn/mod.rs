//! Minimal neural-network engine: fixed layer menu, forward/backward passes,
//! supervised and proximal local training, distillation training, and
//! weighted parameter averaging.

mod arch;
mod engine;
mod layers;
mod loss;
mod train;

pub use arch::{ActivationKind, ArchitectureSpec, LayerSpec, PoolKind, Preset};
pub use engine::{Engine, ModelState};
pub use loss::{
    cross_entropy_grad, distill_grad, log_softmax_into, softmax_into, PROB_FLOOR,
};
pub use train::{
    batch_ce_loss_grad, batch_distill_loss_grad, distill, prox_loss_grad, train_fedprox,
    train_supervised, weighted_average, DistillConfig, LabelledBatch, TrainConfig,
};

/// Scalar type the engine kernels are written against. Production paths run
/// `f32`; gradient tests instantiate `f64` to keep finite differences sharp.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}
