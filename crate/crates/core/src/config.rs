use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::template;
use crate::error::{Error, Result};
use crate::retrieval;
use crate::transition::candidates;

/// Longest supported in-context sequence (pairs per instruction).
pub const MAX_CONTEXT_LENGTH: usize = 5;

/// Run configuration. Strategy fields hold registry names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvtConfig {
    /// Support budget per predicted class.
    pub rho: usize,
    /// Candidate list length, original prediction included.
    pub top_n: usize,
    /// Diagnosis threshold on the detection score.
    pub delta_threshold: f64,
    /// In-context repeats averaged per decision.
    pub repeats: usize,
    pub retrieval_strategy: String,
    pub template_variant: String,
    /// Exemplar pairs per instruction.
    pub context_length: usize,
    /// Additive smoothing for transition rows.
    pub smoothing_epsilon: f64,
    pub seed: u64,
    pub candidate_source: String,
}

impl Default for MvtConfig {
    fn default() -> Self {
        MvtConfig {
            rho: 3,
            top_n: 6,
            delta_threshold: 0.6,
            repeats: 3,
            retrieval_strategy: "logit_most".into(),
            template_variant: "pos_neg".into(),
            context_length: 1,
            smoothing_epsilon: 1e-3,
            seed: 0,
            candidate_source: "transition".into(),
        }
    }
}

impl MvtConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rho == 0 {
            return fail("rho must be at least 1".into());
        }
        if self.top_n < 2 {
            return fail(format!("top_n must be at least 2, got {}", self.top_n));
        }
        if !(0.0..=1.0).contains(&self.delta_threshold) {
            return fail(format!(
                "delta_threshold must lie in [0, 1], got {}",
                self.delta_threshold
            ));
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        if self.context_length == 0 || self.context_length > MAX_CONTEXT_LENGTH {
            return fail(format!(
                "context_length must lie in [1, {MAX_CONTEXT_LENGTH}], got {}",
                self.context_length
            ));
        }
        if !(self.smoothing_epsilon >= 0.0 && self.smoothing_epsilon.is_finite()) {
            return fail(format!(
                "smoothing_epsilon must be finite and non-negative, got {}",
                self.smoothing_epsilon
            ));
        }
        retrieval::registry().get(&self.retrieval_strategy)?;
        template::registry().get(&self.template_variant)?;
        candidates::registry().get(&self.candidate_source)?;
        Ok(())
    }

    /// Parses and validates a config document. Missing keys take defaults,
    /// unknown keys are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: MvtConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Applies `key = value` overrides given as JSON values; used by studies.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a serde_json::Value)>,
    ) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let obj = doc.as_object_mut().expect("config is an object");
        for (key, value) in overrides {
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            obj.insert(key.to_owned(), value.clone());
        }
        let cfg: MvtConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
