//! Noisy-to-clean transition matrix estimated from the labelled support set.
//!
//! Row `i` is the distribution of clean labels among items the classifier
//! predicts as class `i`, so indexing by a prediction yields its noise
//! profile directly.

pub mod candidates;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::sampler::SupportSet;
use crate::types::{ClassId, ProbVector};

pub use candidates::{select_candidates, select_candidates_topn_pred, CandidateList, CandidateSource};

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Validates shape and row-stochasticity (rows sum to 1 within 1e-9).
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = rows.len();
        if c == 0 {
            return Err(Error::InvalidInput("empty transition matrix".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::InvalidInput(format!(
                    "transition row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidInput(format!(
                    "transition row {i} has entries outside [0, 1]"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "transition row {i} sums to {total}"
                )));
            }
        }
        Ok(TransitionMatrix { rows })
    }

    pub fn identity(c: usize) -> Self {
        let rows = (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        TransitionMatrix { rows }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, class: ClassId) -> Option<&[f64]> {
        self.rows.get(class.index()).map(Vec::as_slice)
    }
}

/// The transition row for one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile(ProbVector);

impl NoiseProfile {
    pub fn probs(&self) -> &ProbVector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Count-and-normalize estimate. Rows for predicted classes never seen in
/// the support set fall back to the identity row.
pub fn estimate_transition(support: &SupportSet, num_classes: usize, epsilon: f64) -> TransitionMatrix {
    let mut counts = vec![vec![0.0f64; num_classes]; num_classes];
    for item in support.iter() {
        let pred = item.prediction.pred().index();
        let clean = item.clean_label.index();
        if pred < num_classes && clean < num_classes {
            counts[pred][clean] += 1.0;
        }
    }
    let rows = counts
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let observed: f64 = row.iter().sum();
            if observed == 0.0 {
                let mut one_hot = vec![0.0; num_classes];
                one_hot[i] = 1.0;
                return one_hot;
            }
            let total = observed + epsilon * num_classes as f64;
            row.into_iter().map(|n| (n + epsilon) / total).collect()
        })
        .collect();
    TransitionMatrix { rows }
}

pub fn noise_profile(t: &TransitionMatrix, pred: ClassId) -> Result<NoiseProfile> {
    let row = t.row(pred).ok_or(Error::Index {
        index: pred.index(),
        num_classes: t.num_classes(),
    })?;
    Ok(NoiseProfile(ProbVector::new(row.to_vec())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub support_sha256: String,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionFile {
    pub num_classes: usize,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl TransitionFile {
    pub fn new(t: &TransitionMatrix, provenance: Provenance) -> Self {
        TransitionFile {
            num_classes: t.num_classes(),
            rows: t.rows.clone(),
            provenance,
        }
    }

    pub fn matrix(&self) -> Result<TransitionMatrix> {
        if self.rows.len() != self.num_classes {
            return Err(Error::InvalidInput(format!(
                "transition file declares {} classes but has {} rows",
                self.num_classes,
                self.rows.len()
            )));
        }
        TransitionMatrix::new(self.rows.clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self).expect("serializable");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SupportItem;
    use crate::types::PredictionRecord;
    use proptest::prelude::*;

    fn item(id: &str, pred: usize, clean: usize, c: usize) -> SupportItem {
        let logits = (0..c).map(|k| if k == pred { 3.0 } else { 0.0 }).collect();
        SupportItem {
            item_id: id.into(),
            clean_label: ClassId(clean),
            prediction: PredictionRecord::from_logits(id, logits).unwrap(),
        }
    }

    fn support(pairs: &[(usize, usize)], c: usize) -> SupportSet {
        let items = pairs
            .iter()
            .enumerate()
            .map(|(i, &(p, l))| item(&format!("s{i}"), p, l, c))
            .collect();
        SupportSet::new(c, items).unwrap()
    }

    #[test]
    fn all_correct_gives_identity() {
        let s = support(&[(0, 0), (1, 1), (2, 2), (0, 0)], 3);
        assert_eq!(estimate_transition(&s, 3, 0.0), TransitionMatrix::identity(3));
    }

    #[test]
    fn hand_counted_rows() {
        let s = support(&[(0, 0), (0, 0), (0, 1), (1, 1), (1, 1), (1, 1)], 2);
        let t = estimate_transition(&s, 2, 0.0);
        assert!((t.rows()[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.rows()[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.rows()[1], vec![0.0, 1.0]);
    }

    #[test]
    fn unseen_prediction_falls_back_to_identity_row() {
        let s = support(&[(0, 0), (1, 2)], 4);
        let t = estimate_transition(&s, 4, 1e-3);
        assert_eq!(t.rows()[3], vec![0.0, 0.0, 0.0, 1.0]);
        let total: f64 = t.rows()[0].iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(t.rows()[0][1] > 0.0);
    }

    #[test]
    fn noise_profile_is_a_row_copy() {
        let t = TransitionMatrix::identity(4);
        assert_eq!(noise_profile(&t, ClassId(2)).unwrap().as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        let t = TransitionMatrix::new(vec![
            vec![0.5, 0.1, 0.3, 0.1],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(noise_profile(&t, ClassId(0)).unwrap().as_slice(), &[0.5, 0.1, 0.3, 0.1]);
        assert!(matches!(noise_profile(&t, ClassId(4)), Err(Error::Index { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("transition.json");
        let s = support(&[(0, 0), (0, 1), (1, 1)], 2);
        let t = estimate_transition(&s, 2, 1e-3);
        let f = TransitionFile::new(
            &t,
            Provenance {
                support_sha256: "ab".into(),
                epsilon: 1e-3,
            },
        );
        f.write(&p).unwrap();
        let back = TransitionFile::read(&p).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.matrix().unwrap(), t);
    }

    /// Independent counter: scans all (pred, clean) pairs per cell.
    fn brute_force(pairs: &[(usize, usize)], c: usize) -> Vec<Vec<f64>> {
        (0..c)
            .map(|i| {
                let row_total = pairs.iter().filter(|(p, _)| *p == i).count();
                (0..c)
                    .map(|j| {
                        if row_total == 0 {
                            return if i == j { 1.0 } else { 0.0 };
                        }
                        let n = pairs.iter().filter(|&&(p, l)| p == i && l == j).count();
                        n as f64 / row_total as f64
                    })
                    .collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force_counter(
            c in 2usize..=5,
            raw in prop::collection::vec((0usize..5, 0usize..5), 1..50),
        ) {
            let pairs: Vec<(usize, usize)> = raw.into_iter().map(|(p, l)| (p % c, l % c)).collect();
            let s = support(&pairs, c);
            let t = estimate_transition(&s, c, 0.0);
            let oracle = brute_force(&pairs, c);
            for (row, expect) in t.rows().iter().zip(&oracle) {
                for (a, b) in row.iter().zip(expect) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn rows_always_stochastic(
            c in 2usize..=6,
            raw in prop::collection::vec((0usize..6, 0usize..6), 0..40),
            eps in 0.0f64..0.5,
        ) {
            let pairs: Vec<(usize, usize)> = raw.into_iter().map(|(p, l)| (p % c, l % c)).collect();
            let t = estimate_transition(&support(&pairs, c), c, eps);
            for row in t.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
            prop_assert!(TransitionMatrix::new(t.rows().to_vec()).is_ok());
        }
    }
}
