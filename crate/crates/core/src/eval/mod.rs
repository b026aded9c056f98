//! Evaluation protocols: rank correlation, the linear datamodeling score,
//! counterfactual removal, the unbiasedness Monte Carlo and the ensemble-size
//! scaling fit.

mod compare;
mod lds;
mod removal;
mod scaling;
mod spearman;
mod unbiasedness;

pub use compare::{correlation_vs_covariance_report, rank_position, MeasureComparison, QueryAgreement};
pub use lds::{
    group_scores, lds_evaluate, lds_ground_truth, lds_score, lds_sweep, null_lds, random_scores, LdsConfig,
    LdsGroundTruth, LdsReport, OutputMeasure, QueryLds, ScalingSweep, SweepPoint, MIN_SUBSETS,
};
pub use removal::{removal_harness, removal_order, RemovalConfig, RemovalMetric, RemovalReport, RemovalRow};
pub use scaling::{fit_exponential, ScalingFit};
pub use spearman::{average_ranks, spearman};
pub use unbiasedness::{
    least_squares_anchor, unbiasedness_check, unbiasedness_target, UnbiasednessReport, XI_SIGN_VARIANCE,
};
