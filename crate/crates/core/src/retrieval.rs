//! Exemplar retrieval from the support set.
//!
//! Candidates of a class are ranked by similarity to the query; repeat `r`
//! of an ensembled decision uses the `r`-th ranked exemplar, wrapping when a
//! class holds fewer items.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::cosine_similarity;
use crate::registry::{Named, Registry};
use crate::sampler::{SupportItem, SupportSet};
use crate::types::{ClassId, PredictionRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub item_id: String,
    pub clean_label: ClassId,
    pub prediction: PredictionRecord,
}

impl From<&SupportItem> for Exemplar {
    fn from(s: &SupportItem) -> Self {
        Exemplar {
            item_id: s.item_id.clone(),
            clean_label: s.clean_label,
            prediction: s.prediction.clone(),
        }
    }
}

/// Two exemplars from distinct clean classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPair {
    pub positive: Exemplar,
    pub negative: Exemplar,
}

pub trait RetrievalStrategy: Named + Send + Sync {
    /// Higher means retrieved earlier.
    fn similarity(&self, query: &PredictionRecord, candidate: &PredictionRecord) -> Result<f64>;
}

fn prob_cosine(q: &PredictionRecord, c: &PredictionRecord) -> Result<f64> {
    cosine_similarity(q.probs().as_slice(), c.probs().as_slice())
}

fn feature_cosine(q: &PredictionRecord, c: &PredictionRecord) -> Result<f64> {
    match (q.features(), c.features()) {
        (Some(a), Some(b)) => cosine_similarity(a, b),
        _ => Err(Error::Capability(format!(
            "feature retrieval needs features on both {} and {}",
            q.item_id(),
            c.item_id()
        ))),
    }
}

macro_rules! strategy {
    ($ty:ident, $name:literal, $doc:literal, |$q:ident, $c:ident| $body:expr) => {
        #[doc = $doc]
        pub struct $ty;

        impl Named for $ty {
            fn name(&self) -> &'static str {
                $name
            }
        }

        impl RetrievalStrategy for $ty {
            fn similarity(&self, $q: &PredictionRecord, $c: &PredictionRecord) -> Result<f64> {
                $body
            }
        }
    };
}

strategy!(LogitMost, "logit_most", "Most similar probability vector first.", |q, c| prob_cosine(q, c));
strategy!(LogitLeast, "logit_least", "Least similar probability vector first.", |q, c| {
    prob_cosine(q, c).map(|s| -s)
});
strategy!(FeatureMost, "feature_most", "Most similar feature vector first.", |q, c| feature_cosine(q, c));
strategy!(FeatureLeast, "feature_least", "Least similar feature vector first.", |q, c| {
    feature_cosine(q, c).map(|s| -s)
});

pub fn registry() -> Registry<dyn RetrievalStrategy> {
    let mut reg: Registry<dyn RetrievalStrategy> = Registry::new("retrieval strategy");
    reg.register(Arc::new(LogitMost))
        .register(Arc::new(LogitLeast))
        .register(Arc::new(FeatureMost))
        .register(Arc::new(FeatureLeast));
    reg
}

/// Support items of `class` other than the query, best first
/// (ties by item id).
pub fn ranked_exemplars<'a>(
    support: &'a SupportSet,
    query: &PredictionRecord,
    class: ClassId,
    strategy: &dyn RetrievalStrategy,
) -> Result<Vec<&'a SupportItem>> {
    let mut scored = support
        .class(class)
        .iter()
        .filter(|s| s.item_id != query.item_id())
        .map(|s| Ok((strategy.similarity(query, &s.prediction)?, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, a), (sb, b)| sb.total_cmp(sa).then_with(|| a.item_id.cmp(&b.item_id)));
    Ok(scored.into_iter().map(|(_, s)| s).collect())
}

/// The `rank`-th (1-based, wrapping) exemplar of `class`.
pub fn retrieve_one(
    support: &SupportSet,
    query: &PredictionRecord,
    class: ClassId,
    strategy: &dyn RetrievalStrategy,
    rank: usize,
) -> Result<Exemplar> {
    let ranked = ranked_exemplars(support, query, class, strategy)?;
    if ranked.is_empty() {
        return Err(Error::MissingExemplarClass(class));
    }
    let rank = rank.max(1);
    Ok(ranked[(rank - 1) % ranked.len()].into())
}

pub fn retrieve_pair(
    support: &SupportSet,
    query: &PredictionRecord,
    pos_class: ClassId,
    neg_class: ClassId,
    strategy: &dyn RetrievalStrategy,
    rank: usize,
) -> Result<ExemplarPair> {
    if pos_class == neg_class {
        return Err(Error::InvalidInput(format!(
            "positive and negative exemplars must come from different classes (both {pos_class})"
        )));
    }
    Ok(ExemplarPair {
        positive: retrieve_one(support, query, pos_class, strategy, rank)?,
        negative: retrieve_one(support, query, neg_class, strategy, rank)?,
    })
}
