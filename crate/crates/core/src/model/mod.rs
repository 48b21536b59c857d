//! Small differentiable reference models and their trainers.
//!
//! The segmenter is a per-voxel softmax over hand-made features and the
//! denoiser is a two-layer 3x3x3 convolutional network. Both expose exact
//! hand-written gradients and are trained with plain SGD.

mod checkpoint;
mod denoiser;
mod params;
mod segmenter;
mod train;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, PARAM_MAGIC};
pub use denoiser::{ConvDenoiser, DenoiserSpec, Tape};
pub use params::{ParamBlock, ParamVector};
pub use segmenter::{seg_backward, seg_forward, Features, Segmenter, FEATURE_COUNT};
pub use train::{
    denoiser_loss, predict_all, train_asc, train_denoiser, AscConfig, AscFlags, AscOutcome, DenoiserOutcome,
    DenoiserPair, DenoiserTrainConfig,
};
