//! Independent brute-force metric oracle, randomized fixtures and the
//! synthetic MovieLens-like corpus used by the acceptance suite.
//!
//! Nothing here calls into the metric engine; the oracle works on plain
//! triples with dense indicator vectors so that agreement between the two
//! is meaningful.

pub mod fixtures;
pub mod oracle;
pub mod synthetic;
