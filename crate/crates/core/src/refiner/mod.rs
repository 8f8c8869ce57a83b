//! Toy radar refinement network: radar MLP and patch encoder, stacked
//! self-/cross-attention with residual connections, confidence and
//! displacement heads, dual loss, analytic gradients and an Adam trainer.

mod attention;
mod config;
mod loss;
mod model;
mod params;
mod tensor;
mod train;

pub use attention::{attend, attend_backward, cross_attention, self_attention, AttentionCache, AttentionWeights};
pub use config::{radar_features, RefinerConfig, RADAR_FEATURES, RANGE_SCALE};
pub use loss::{bce, evaluate_loss, gradient, loss_conf, network_inputs, loss_disp, loss_total, smooth_l1, LossBreakdown, Sample, BCE_CLAMP};
pub use model::{encode_patch, encode_radar, forward, patch_tokens, sigmoid, RefinerOutput};
pub use params::{layout, Dense, ParamBlock, ParamManifest, RefinerParams, Weights};
pub use tensor::{softmax_rows, Matrix};
pub use train::{confidence_accuracy, train, train_from, Adam, LossRecord, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinerError {
    #[error("invalid refiner config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("no valid points to compute a loss over")]
    NoValidPoints,
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("parameter manifest: {0}")]
    Manifest(String),
}
