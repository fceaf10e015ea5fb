//! Core of the reclab evaluation framework.
//!
//! Everything in this crate is free of I/O beyond reading dataset files:
//! rating value types, dataset parsing and splitting, the seven ranking
//! metrics, the reference recommender algorithms and the wire types shared
//! by the evaluator and recommender services.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what the services use.

pub mod datasets;
pub mod domain;
pub mod metrics;
pub mod num;
pub mod protocol;
pub mod recommenders;

pub use num::Scalar;

pub type Rating = domain::Rating<f64>;
pub type RatingSet = domain::RatingSet<f64>;
pub type Split = datasets::Split<f64>;
pub type MetricsReport = domain::MetricsReport<f64>;
pub type EvaluationContext = metrics::EvaluationContext<f64>;
pub type TrainedModel = recommenders::TrainedModel<f64>;

pub use domain::{
    validate_config, ExperimentConfig, RecommendationList, Recommendations, SplitMethod,
    Violation,
};
