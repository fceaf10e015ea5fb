//! Evaluator service, the recommender protocol client and the reference
//! recommender services.

pub mod api;
pub mod client;
pub mod config;
pub mod mock;
pub mod recommender;
pub mod runner;
pub mod store;

pub use api::{bind_evaluator, router, EvaluatorServer, ServeError};
pub use client::{RecommendOutcome, RecommenderClient, Session, SessionState};
pub use config::{EvaluatorConfig, ProtocolSettings, RecommenderRegistry};
pub use recommender::{serve_recommender, RecommenderService};
pub use runner::{Evaluator, SubmitError};
pub use store::{ExperimentRecord, ExperimentStatus, Store};
