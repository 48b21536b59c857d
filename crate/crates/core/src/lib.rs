//! Volumetric unsupervised domain adaptation kernels.
//!
//! The crate provides the building blocks of a three-stage adaptation
//! pipeline for 3D segmentation: Fourier amplitude transfer between domains,
//! affine plus elastic deformation, CutMix structure perturbation,
//! teacher-student consistency losses, a label-conditioned denoising
//! diffusion model, pseudo-labelling, surface metrics, a synthetic two-domain
//! phantom generator and small differentiable reference models.

pub mod deform;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod phantom;
pub mod pseudolabel;
pub mod rng;
pub mod spectral;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelVolume, ProbVolume, ScalarVolume, Shape3, Spacing3};
