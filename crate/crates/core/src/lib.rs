//! Probabilistic objectness for open-world object detection.
//!
//! A toy set-prediction detector produces one query embedding per candidate
//! slot. A class-agnostic diagonal Gaussian over those embeddings, estimated
//! by exponential moving average, scores how object-like each slot is; known
//! class probabilities are multiplied by that objectness, and slots that look
//! like objects but match no known class are reported as unknown.
//!
//! The crate also carries the open-world lifecycle around the detector:
//! synthetic task-structured data, exemplar replay between tasks, and the
//! evaluation suite (partitioned mAP, unknown recall, A-OSE, wilderness impact).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod objectness;

pub use error::{Error, Result};
pub mod data;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod protocol;
pub mod report;
pub mod rng;
