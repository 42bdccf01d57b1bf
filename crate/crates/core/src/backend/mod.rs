//! Model-facing contract: batch classification, in-context True/False
//! scoring and fine-tuning requests.
//!
//! Implementations are registered by name and opened from a locator
//! string: `sim` (in-process simulators driven by a spec file) or
//! `remote:<endpoint>` (the HTTP wire protocol).

pub mod protocol;
pub mod remote;
pub mod server;
pub mod sim;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::Instruction;
use crate::error::{Error, Result};
use crate::io::FinetuneRow;
use crate::registry::{Named, Registry};
use crate::types::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendCapabilities {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub feature_dim: Option<usize>,
    pub supports_finetune: bool,
    /// Free-form conventions, e.g. how True/False logits are read.
    pub metadata: BTreeMap<String, String>,
}

impl BackendCapabilities {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::backend(
                None,
                format!(
                    "backend reports {} classes but {} names",
                    self.num_classes,
                    self.class_names.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Raw True/False token logits for one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclScore {
    pub true_logit: f64,
    pub false_logit: f64,
}

impl IclScore {
    pub fn new(true_logit: f64, false_logit: f64) -> Result<Self> {
        if !(true_logit.is_finite() && false_logit.is_finite()) {
            return Err(Error::backend(None, "non-finite True/False logits"));
        }
        Ok(IclScore {
            true_logit,
            false_logit,
        })
    }

    /// First entry of `softmax([true, false])`.
    pub fn true_prob(&self) -> f64 {
        crate::math::sigmoid(self.true_logit - self.false_logit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneAck {
    pub epoch_losses: Vec<f64>,
}

pub trait Backend: Send + Sync {
    fn capabilities(&self) -> Result<BackendCapabilities>;

    /// One entry per id, in order; unknown ids yield per-item errors.
    fn predict_batch(&self, item_ids: &[String]) -> Result<Vec<Result<PredictionRecord>>>;

    fn score_icl(&self, instruction: &Instruction) -> Result<IclScore>;

    fn request_finetune(
        &self,
        records: &[FinetuneRow],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<FinetuneAck>;
}

/// Context for opening a backend from a locator.
#[derive(Debug, Clone, Default)]
pub struct OpenOptions {
    /// Simulator spec file, required by `sim`.
    pub sim_spec: Option<PathBuf>,
    /// Bound on concurrent remote requests.
    pub max_in_flight: Option<usize>,
}

pub trait BackendFactory: Named + Send + Sync {
    fn open(&self, argument: Option<&str>, options: &OpenOptions) -> Result<Arc<dyn Backend>>;
}

struct SimFactory;

impl Named for SimFactory {
    fn name(&self) -> &'static str {
        "sim"
    }
}

impl BackendFactory for SimFactory {
    fn open(&self, argument: Option<&str>, options: &OpenOptions) -> Result<Arc<dyn Backend>> {
        let path = argument
            .map(PathBuf::from)
            .or_else(|| options.sim_spec.clone())
            .ok_or_else(|| Error::Config("the sim backend needs a simulator spec file".into()))?;
        Ok(Arc::new(sim::SimBackend::new(sim::SimSpec::load(&path)?)?))
    }
}

struct RemoteFactory;

impl Named for RemoteFactory {
    fn name(&self) -> &'static str {
        "remote"
    }
}

impl BackendFactory for RemoteFactory {
    fn open(&self, argument: Option<&str>, options: &OpenOptions) -> Result<Arc<dyn Backend>> {
        let endpoint = argument
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Config("remote backend needs an endpoint: remote:<url>".into()))?;
        Ok(Arc::new(remote::RemoteBackend::new(
            endpoint,
            options.max_in_flight.unwrap_or(remote::DEFAULT_MAX_IN_FLIGHT),
        )))
    }
}

pub fn registry() -> Registry<dyn BackendFactory> {
    let mut reg: Registry<dyn BackendFactory> = Registry::new("backend");
    reg.register(Arc::new(SimFactory)).register(Arc::new(RemoteFactory));
    reg
}

/// Opens `name[:argument]`, e.g. `sim` or `remote:http://127.0.0.1:8080`.
pub fn open(locator: &str, options: &OpenOptions) -> Result<Arc<dyn Backend>> {
    let (name, argument) = match locator.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (locator, None),
    };
    registry().get(name)?.open(argument, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locator_parsing() {
        assert!(matches!(open("gpu", &OpenOptions::default()), Err(Error::Config(_))));
        assert!(matches!(open("sim", &OpenOptions::default()), Err(Error::Config(_))));
        assert!(matches!(open("remote", &OpenOptions::default()), Err(Error::Config(_))));
        assert!(open("remote:http://127.0.0.1:1", &OpenOptions::default()).is_ok());
    }

    #[test]
    fn icl_score_true_prob() {
        let s = IclScore::new(2.0, 1.0).unwrap();
        assert!((s.true_prob() - 0.7311).abs() < 1e-4);
        assert!(IclScore::new(f64::NAN, 0.0).is_err());
    }
}
