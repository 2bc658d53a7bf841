//! A small pre-norm decoder-only transformer that runs under arbitrary
//! attention masks, with hand-written backward.

mod config;
mod forward;
mod loss;
pub mod ops;
mod params;
mod resize;
mod step;

pub use config::{ModelConfig, PosEncoding};
pub use forward::{
    backward, forward, forward_train, forward_with, ForwardOptions, ForwardOutput, KvPin, LayerKv,
    Trace,
};
pub use loss::{grad, lm_loss, Example, GradOutput, LossMode, LossOutput};
pub use params::{LayerParams, ModelParams};
pub use step::{forward_token, KvBuffer};
pub use resize::{extend_model_vocab, extend_vocab_mean_resize, row_moments};
