//! Training data attribution through loss covariance across perturbed models.
//!
//! An anchor model `θ₀` is fine-tuned `K` times on randomly perturbed
//! objectives; the covariance (or correlation) of per-example losses across
//! those perturbed models scores how much each training example influences
//! each query. The [`curvature`] module provides the exact influence-function
//! scores this estimator approximates, and [`eval`] the evaluation protocols.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attribution;
pub mod config;
pub mod curvature;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod synthetic;
pub mod train;

pub use attribution::{AttributionMatrix, UncertaintyMeasure};
pub use curvature::{CurvatureMatrix, Damping, SecondOrderKind};
pub use data::{Dataset, Example, LabelKind, Labels, Target};
pub use ensemble::{AccessMode, EnsembleConfig, LossMatrix};
pub use error::{Error, Result};
pub use model::{Activation, ModelSpec, ParamVector};
pub use train::TrainConfig;
