//! Diagnosis pipeline for 2D+t left-ventricle echo phantoms.
//!
//! The crate trains a small encoder/decoder segmentation network on synthetic
//! echo videos, pulls latent features out of its 32-kernel bottleneck, prunes
//! them with gradient-based kernel ranking (FSR) or an L1 linear model (FSL),
//! and classifies the wall-motion pattern with stacked SVMs, an MLP, or a
//! random forest. Everything is orchestrated by a stratified k-fold pipeline
//! that keeps feature selection inside the training folds.
//!
//! All numeric building blocks ([`tensor`], [`autodiff`], [`optim`],
//! [`featsel::lasso`]) are generic over the [`Scalar`] element type; the
//! domain layers instantiate them with the crate-level [`Elem`] alias.

pub mod autodiff;
pub mod classifiers;
pub mod error;
pub mod featsel;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type used by the concrete pipeline. Solvers and the autodiff
/// engine stay generic; everything downstream of the phantom generator runs
/// in f64.
pub type Elem = f64;

/// Dense tensor over the pipeline element type.
pub type Tensor = tensor::TensorBase<Elem>;

/// Autodiff graph over the pipeline element type.
pub type Graph = autodiff::GraphBase<Elem>;
