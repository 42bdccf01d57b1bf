//! Rectifies a vision classifier's predictions on unlabelled data with an
//! in-context True/False scorer.
//!
//! The pipeline: rank items by predicted class and confidence, label a small
//! support set, estimate a noisy-to-clean transition matrix, then for every
//! item diagnose the original prediction and, when it looks wrong, score the
//! classes it is most often confused with and relabel by the best score.
//! Model calls go through [`backend::Backend`], served either by the
//! deterministic simulators or by a remote process speaking the `/v1` wire
//! protocol.

pub mod backend;
pub mod config;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod math;
pub mod registry;
pub mod retrieval;
pub mod sampler;
pub mod seeding;
pub mod transition;
pub mod types;

pub use backend::{Backend, BackendCapabilities, IclScore};
pub use config::MvtConfig;
pub use engine::{run_mvt, Engine, MvtRun};
pub use error::{Error, ErrorKind, Result};
pub use transition::TransitionMatrix;
pub use types::{ClassId, LogitVector, PredictionRecord, ProbVector};
