//! Domain types shared across the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Index of a class in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn checked(index: usize, num_classes: usize) -> Result<Self> {
        if index < num_classes {
            Ok(ClassId(index))
        } else {
            Err(Error::Index {
                index,
                num_classes,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raw classifier scores; nonempty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty logit vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("logit vector has non-finite entries".into()));
        }
        Ok(LogitVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn softmax(&self) -> ProbVector {
        // Construction already guarantees a finite nonempty input.
        ProbVector(math::softmax(&self.0).expect("validated logits"))
    }
}

/// Probability vector: entries in `[0, 1]` summing to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: ClassId) -> Option<f64> {
        self.0.get(class.0).copied()
    }

    /// Largest entry, in `[1/C, 1]`.
    pub fn confidence(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> ClassId {
        ClassId(math::argmax(&self.0).expect("nonempty"))
    }
}

/// A classifier's output for one item with its derived quantities
/// computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    item_id: String,
    logits: LogitVector,
    probs: ProbVector,
    pred: ClassId,
    confidence: f64,
    features: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(
        item_id: impl Into<String>,
        logits: LogitVector,
        features: Option<Vec<f64>>,
    ) -> Result<Self> {
        let item_id = item_id.into();
        if let Some(f) = &features {
            if f.is_empty() || f.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "features for {item_id} must be nonempty and finite"
                )));
            }
        }
        let probs = logits.softmax();
        let pred = probs.argmax();
        let confidence = probs.confidence();
        Ok(PredictionRecord {
            item_id,
            logits,
            probs,
            pred,
            confidence,
            features,
        })
    }

    /// Convenience constructor from raw logits.
    pub fn from_logits(item_id: impl Into<String>, logits: Vec<f64>) -> Result<Self> {
        Self::new(item_id, LogitVector::new(logits)?, None)
    }

    pub fn item_id(&self) -> &str {
        &self.item_id
    }

    pub fn logits(&self) -> &LogitVector {
        &self.logits
    }

    pub fn probs(&self) -> &ProbVector {
        &self.probs
    }

    pub fn pred(&self) -> ClassId {
        self.pred
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn features(&self) -> Option<&[f64]> {
        self.features.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}
