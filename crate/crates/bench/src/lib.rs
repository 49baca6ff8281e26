//! Load-generation and measurement harness for the anchoring platform.
//!
//! [`experiment`] defines load profiles and runs them against a platform on
//! its virtual clock; [`metrics`] holds the measured series and its export
//! formats; [`rng`] is the seeded generator behind arrival jitter.

pub mod experiment;
pub mod metrics;
pub mod rng;
