use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Manifest, PredictionTable, RectifiedRecord};
use crate::sampler::{SupportItem, SupportSet};
use crate::transition::candidates::CandidateList;
use crate::transition::{estimate_transition, TransitionMatrix};
use crate::types::ClassId;

pub fn accuracy(predicted: &[ClassId], truth: &[ClassId]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidInput(format!(
            "accuracy needs equal nonempty lists, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Frobenius norm of the difference.
pub fn transition_error(estimate: &TransitionMatrix, reference: &TransitionMatrix) -> Result<f64> {
    if estimate.num_classes() != reference.num_classes() {
        return Err(Error::InvalidInput("transition matrices differ in size".into()));
    }
    let sq: f64 = estimate
        .rows()
        .iter()
        .flatten()
        .zip(reference.rows().iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq.sqrt())
}

/// Turns a clean-to-noisy generator into the noisy-to-clean matrix under
/// `prior`: row `i` is `P(true = . | pred = i)`. Classes that are never
/// predicted get an identity row.
pub fn bayes_inversion(generator: &[Vec<f64>], prior: &[f64]) -> Result<TransitionMatrix> {
    let c = prior.len();
    if generator.len() != c || generator.iter().any(|r| r.len() != c) {
        return Err(Error::InvalidInput("generator and prior sizes differ".into()));
    }
    let rows = (0..c)
        .map(|i| {
            let joint: Vec<f64> = (0..c).map(|j| prior[j] * generator[j][i]).collect();
            let total: f64 = joint.iter().sum();
            if total > 0.0 {
                joint.iter().map(|p| p / total).collect()
            } else {
                (0..c).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
            }
        })
        .collect();
    TransitionMatrix::new(rows)
}

pub fn empirical_prior(labels: &[ClassId], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    for l in labels {
        counts[l.index()] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    counts.iter().map(|k| k / n).collect()
}

/// Unsmoothed transition matrix from every labelled item; the reference
/// estimates are compared against when the generator is unknown.
pub fn empirical_transition(manifest: &Manifest, predictions: &PredictionTable) -> Result<TransitionMatrix> {
    let items = manifest
        .items
        .iter()
        .filter_map(|i| Some((i, i.label?)))
        .map(|(i, label)| {
            Ok(SupportItem {
                item_id: i.item_id.clone(),
                clean_label: label,
                prediction: predictions
                    .get(&i.item_id)
                    .cloned()
                    .ok_or_else(|| Error::MissingPredictions(vec![i.item_id.clone()]))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all = SupportSet::new(manifest.num_classes(), items)?;
    Ok(estimate_transition(&all, manifest.num_classes(), 0.0))
}

/// Fraction of lists that contain the matching true class.
pub fn candidate_coverage(lists: &[CandidateList], truth: &[ClassId]) -> Result<f64> {
    if lists.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidInput("coverage needs equal nonempty lists".into()));
    }
    let hits = lists.iter().zip(truth).filter(|(l, t)| l.contains(**t)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Outcome summary of one rectification run against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_items: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub accepted_fraction: f64,
    pub mean_delta: f64,
    /// Items without a rectified record; scored with their original
    /// prediction.
    pub failures: usize,
}

/// Scores every labelled manifest item. Items missing from `records`
/// keep their original prediction.
pub fn run_metrics(manifest: &Manifest, predictions: &PredictionTable, records: &[RectifiedRecord]) -> Result<RunMetrics> {
    let by_id: HashMap<&str, &RectifiedRecord> = records.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let (mut before, mut after, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    let mut failures = 0;
    for item in &manifest.items {
        let Some(label) = item.label else { continue };
        let pred = predictions
            .get(&item.item_id)
            .ok_or_else(|| Error::MissingPredictions(vec![item.item_id.clone()]))?
            .pred();
        before.push(pred);
        truth.push(label);
        match by_id.get(item.item_id.as_str()) {
            Some(r) => after.push(r.rectified_label),
            None => {
                failures += 1;
                after.push(pred);
            }
        }
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("no labelled items to evaluate".into()));
    }
    let scored = records.len().max(1) as f64;
    Ok(RunMetrics {
        n_items: truth.len(),
        accuracy_before: accuracy(&before, &truth)?,
        accuracy_after: accuracy(&after, &truth)?,
        accepted_fraction: records.iter().filter(|r| r.accepted).count() as f64 / scored,
        mean_delta: records.iter().map(|r| r.delta).sum::<f64>() / scored,
        failures,
    })
}
