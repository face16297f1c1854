//! Variance-aware training (VAT) laboratory.
//!
//! A Siamese convolutional encoder is trained on a small annotated subset
//! while an adversarial discriminator, attached behind a reversed-gradient
//! layer, tries to tell whether an auxiliary image comes from the training
//! subset or from a larger pre-training pool. Reversing the discriminator's
//! gradients into the encoder pushes the feature distribution of the
//! training subset towards that of the wider population, which shrinks the
//! variance term of the model's expected KL error.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors and a tape-based reverse-mode engine.
//! - [`nn`]: layers, losses, the reversed-gradient layer, initialization, Adam.
//! - [`data`]: synthetic shapes tasks with a controllable subset shift,
//!   splitting, augmentation and the IDX file format.
//! - [`metrics`]: AUC-ROC, quadratic weighted kappa and macro Dice.
//! - [`bvtd`]: KL / total-variation / Pinsker numerics, the bias-variance
//!   decomposition and the feature-distribution gap.
//! - [`trainer`]: auxiliary sampling, feature statistics, the discriminator
//!   and the training loop with early stopping.
//! - [`experiment`]: configuration-driven runs, lambda sweeps and reports.

pub mod autodiff;
pub mod bvtd;
pub mod data;
mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use autodiff::{ParamStore, Parameter, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use trainer::{Aggregation, Method, VatConfig};
