//! Three-stage domain adaptation pipeline: pseudo-labelling with
//! teacher-student training, mask-conditioned diffusion sampling, and
//! retraining on the enlarged labelled set, with baselines and ablations.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod generate;
pub mod stage1;
pub mod store;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use experiment::Experiment;
