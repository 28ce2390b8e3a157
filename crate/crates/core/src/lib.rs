//! Attentive-LSTM knowledge tracing with fast-gradient adversarial training
//! on interaction embeddings.
//!
//! Everything is plain f64 arithmetic with hand-written backward passes; see
//! [`gradcheck`] for the finite-difference harness that verifies them.

pub mod adversarial;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod training;
