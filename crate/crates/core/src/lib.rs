//! Relational fingerprints for graph anomaly detection and a few-shot
//! detector that consumes them.
//!
//! The pipeline:
//!
//! - [`graph`] loads a graph bundle and builds the sparse propagation operators.
//! - [`fingerprint`] turns it into a rank-normalized `n x 5` fingerprint matrix.
//! - [`encoder`] scores query nodes against a handful of labeled supports.
//! - [`trainer`] fits the encoder episodically on labeled source graphs.
//! - [`metrics`] evaluates a trained model on an unseen target graph.

pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod fingerprint;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
