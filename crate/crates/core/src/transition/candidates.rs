//! Therapy candidate lists: the original prediction first, then the classes
//! it is most likely confused with.

use std::sync::Arc;

use crate::error::Result;
use crate::registry::{Named, Registry};
use crate::types::{ClassId, PredictionRecord, ProbVector};

use super::{noise_profile, NoiseProfile, TransitionMatrix};

/// Distinct classes; position 0 is always the original prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateList(Vec<ClassId>);

impl CandidateList {
    pub fn classes(&self) -> &[ClassId] {
        &self.0
    }

    pub fn original(&self) -> ClassId {
        self.0[0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.0.contains(&class)
    }
}

/// Class indices sorted by probability descending, index ascending on ties.
fn ranked(probs: &[f64]) -> Vec<ClassId> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.into_iter().map(ClassId).collect()
}

pub fn select_candidates(s: &NoiseProfile, pred: ClassId, n: usize) -> CandidateList {
    let mut out = vec![pred];
    out.extend(
        ranked(s.as_slice())
            .into_iter()
            .filter(|&c| c != pred)
            .take(n.saturating_sub(1)),
    );
    CandidateList(out)
}

pub fn select_candidates_topn_pred(probs: &ProbVector, n: usize) -> CandidateList {
    CandidateList(ranked(probs.as_slice()).into_iter().take(n.max(1)).collect())
}

pub trait CandidateSource: Named + Send + Sync {
    fn candidates(
        &self,
        record: &PredictionRecord,
        transition: &TransitionMatrix,
        n: usize,
    ) -> Result<CandidateList>;
}

/// Ranks by the transition row of the prediction.
pub struct FromTransition;

impl Named for FromTransition {
    fn name(&self) -> &'static str {
        "transition"
    }
}

impl CandidateSource for FromTransition {
    fn candidates(
        &self,
        record: &PredictionRecord,
        transition: &TransitionMatrix,
        n: usize,
    ) -> Result<CandidateList> {
        let s = noise_profile(transition, record.pred())?;
        Ok(select_candidates(&s, record.pred(), n))
    }
}

/// Ranks by the classifier's own probability vector.
pub struct TopNPrediction;

impl Named for TopNPrediction {
    fn name(&self) -> &'static str {
        "topn_pred"
    }
}

impl CandidateSource for TopNPrediction {
    fn candidates(
        &self,
        record: &PredictionRecord,
        _transition: &TransitionMatrix,
        n: usize,
    ) -> Result<CandidateList> {
        Ok(select_candidates_topn_pred(record.probs(), n))
    }
}

pub fn registry() -> Registry<dyn CandidateSource> {
    let mut reg: Registry<dyn CandidateSource> = Registry::new("candidate source");
    reg.register(Arc::new(FromTransition))
        .register(Arc::new(TopNPrediction));
    reg
}
