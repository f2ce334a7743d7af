//! Segmentation super-resolution with a learned anatomical prior.
//!
//! A low-resolution, motion-corrupted short-axis label stack is explained by
//! decoding a latent code into a high-resolution class-probability volume,
//! shifting its slices, and down-sampling it. Latent code and per-slice
//! displacements are fitted jointly by gradient descent.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod degrade;
pub mod error;
pub mod generator;
pub mod latent_opt;
pub mod nn;
pub mod optim;
pub mod phantom;
mod real;
pub mod volume;

pub use degrade::{
    degrade, downsample, shift_slices, slice_plane, DegradationSpec, LabelImage, MotionParams, PlaneSpec,
    ProbImage, Regime, ScaleFactor,
};
pub use error::{Error, Result};
pub use generator::{
    load_model, save_model, train_vae, ArchDescriptor, GeneratorModel, LatentVector, TrainConfig, VaeLossReport,
};
pub use latent_opt::{optimise, LatentOptConfig, OptTrace, StopReason, SuperResolveResult};
pub use optim::AdamConfig;
pub use real::Real;
pub use volume::{
    argmax_labels, dice, dice_report, load_volume, one_hot, save_volume, DiceReport, LabelVolume, ProbVolume,
};
