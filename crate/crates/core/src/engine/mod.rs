//! Diagnosis and therapy over in-context True/False scoring.
//!
//! For each item the engine builds a candidate list (original prediction
//! first), asks the backend whether the query shows the predicted class,
//! and accepts the prediction when the detection score clears the
//! threshold. Otherwise every remaining candidate is scored with itself as
//! the positive class and the original prediction as the contrast, and the
//! candidate with the highest ensembled True-probability wins.

pub mod template;

use std::sync::Arc;

use rayon::prelude::*;

use crate::backend::{Backend, IclScore};
use crate::config::MvtConfig;
use crate::error::{Error, Result};
use crate::io::{Manifest, PredictionTable, RectifiedRecord};
use crate::retrieval::{self, ExemplarPair, RetrievalStrategy};
use crate::sampler::SupportSet;
use crate::transition::{candidates, CandidateList, CandidateSource, TransitionMatrix};
use crate::types::{ClassId, PredictionRecord};

pub use template::{build_instruction, Instruction, InstructionTemplate, Roles};

/// Mean of raw logit pairs and the True-probability of that mean.
pub fn ensemble(scores: &[IclScore]) -> Result<(IclScore, f64)> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("cannot ensemble zero scores".into()));
    }
    let n = scores.len() as f64;
    let mean = IclScore {
        true_logit: scores.iter().map(|s| s.true_logit).sum::<f64>() / n,
        false_logit: scores.iter().map(|s| s.false_logit).sum::<f64>() / n,
    };
    Ok((mean, mean.true_prob()))
}

/// Detection score: mean of the scorer's True-probability and the
/// classifier's confidence.
pub fn detection_score(g0: f64, confidence: f64) -> f64 {
    (g0 + confidence) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub score: IclScore,
    pub g0: f64,
    pub delta: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub class: ClassId,
    pub score: IclScore,
    pub true_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TherapyOutcome {
    pub item_id: String,
    pub original_pred: ClassId,
    pub rectified_label: ClassId,
    pub delta: f64,
    pub accepted: bool,
    pub candidates: CandidateList,
    /// Scored candidates in list order; position 0 reuses the diagnosis.
    pub scored: Vec<CandidateScore>,
    /// Candidates without support exemplars, left unscored.
    pub skipped: Vec<ClassId>,
}

impl TherapyOutcome {
    pub fn to_record(&self) -> RectifiedRecord {
        RectifiedRecord {
            item_id: self.item_id.clone(),
            original_pred: self.original_pred,
            rectified_label: self.rectified_label,
            delta: self.delta,
            accepted: self.accepted,
            candidate_classes: self.scored.iter().map(|s| s.class).collect(),
            candidate_true_probs: self.scored.iter().map(|s| s.true_prob).collect(),
        }
    }
}

/// Argmax over positions; the earliest position wins ties so the original
/// prediction survives an uninformative scorer.
pub fn pick_label(candidates: &[ClassId], true_probs: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, p) in true_probs.iter().enumerate() {
        if *p > true_probs[best] {
            best = i;
        }
    }
    candidates[best]
}

/// Per-item failure collected during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFailure {
    pub item_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct MvtRun {
    /// Outcomes in manifest order, failed items omitted.
    pub outcomes: Vec<TherapyOutcome>,
    pub failures: Vec<ItemFailure>,
}

impl MvtRun {
    pub fn records(&self) -> Vec<RectifiedRecord> {
        self.outcomes.iter().map(TherapyOutcome::to_record).collect()
    }
}

/// Everything one MVT pass needs, with strategies resolved from the config.
pub struct Engine<'a> {
    support: &'a SupportSet,
    transition: &'a TransitionMatrix,
    backend: &'a dyn Backend,
    config: &'a MvtConfig,
    class_names: &'a [String],
    strategy: Arc<dyn RetrievalStrategy>,
    template: Arc<dyn InstructionTemplate>,
    source: Arc<dyn CandidateSource>,
}

impl<'a> Engine<'a> {
    pub fn new(
        support: &'a SupportSet,
        transition: &'a TransitionMatrix,
        backend: &'a dyn Backend,
        config: &'a MvtConfig,
        class_names: &'a [String],
    ) -> Result<Self> {
        config.validate()?;
        let c = class_names.len();
        if transition.num_classes() != c || support.num_classes() != c {
            return Err(Error::InvalidInput(format!(
                "class counts disagree: names {c}, transition {}, support {}",
                transition.num_classes(),
                support.num_classes()
            )));
        }
        Ok(Engine {
            support,
            transition,
            backend,
            config,
            class_names,
            strategy: retrieval::registry().get(&config.retrieval_strategy)?,
            template: template::registry().get(&config.template_variant)?,
            source: candidates::registry().get(&config.candidate_source)?,
        })
    }

    pub fn config(&self) -> &MvtConfig {
        self.config
    }

    pub fn candidates(&self, query: &PredictionRecord) -> Result<CandidateList> {
        self.source.candidates(query, self.transition, self.config.top_n)
    }

    /// Roles for scoring candidate position `pos`; `None` when the class
    /// under test or every possible contrast lacks exemplars.
    fn roles(&self, list: &[ClassId], pos: usize) -> Option<Roles> {
        let present = |c: ClassId| self.support.has_class(c);
        let under_test = list[pos];
        if !present(under_test) {
            return None;
        }
        let contrast = if pos == 0 {
            list[1..].iter().copied().find(|&c| present(c))?
        } else {
            present(list[0]).then_some(list[0])?
        };
        let second_contrast = list[pos + 1..]
            .iter()
            .chain(list[1..pos.max(1)].iter())
            .copied()
            .find(|&c| c != list[0] && c != under_test && c != contrast && present(c));
        Some(Roles {
            under_test,
            contrast,
            second_contrast,
        })
    }

    fn pair(&self, query: &PredictionRecord, classes: (ClassId, ClassId), rank: usize) -> Result<ExemplarPair> {
        let strategy = self.strategy.as_ref();
        if classes.0 == classes.1 {
            return Ok(ExemplarPair {
                positive: retrieval::retrieve_one(self.support, query, classes.0, strategy, rank)?,
                negative: retrieval::retrieve_one(self.support, query, classes.0, strategy, rank + 1)?,
            });
        }
        retrieval::retrieve_pair(self.support, query, classes.0, classes.1, strategy, rank)
    }

    /// The instruction for repeat `repeat` (1-based). In-context step `l`
    /// uses similarity rank `repeat + l * repeats` so steps and repeats see
    /// distinct exemplars where the support allows.
    pub fn instruction(&self, query: &PredictionRecord, roles: &Roles, repeat: usize) -> Result<Instruction> {
        let classes = self.template.exemplar_classes(roles);
        let pairs = (0..self.config.context_length)
            .map(|l| self.pair(query, classes, repeat + l * self.config.repeats))
            .collect::<Result<Vec<_>>>()?;
        build_instruction(
            &pairs,
            query,
            roles,
            self.class_names,
            self.template.as_ref(),
            self.config.context_length,
            repeat,
        )
    }

    /// Scores `roles` over all repeats and ensembles the logits.
    pub fn score(&self, query: &PredictionRecord, roles: &Roles) -> Result<(IclScore, f64)> {
        let scores = (1..=self.config.repeats)
            .map(|r| {
                let ins = self.instruction(query, roles, r)?;
                self.backend.score_icl(&ins).map_err(|e| match e {
                    Error::Backend { item: None, message } => Error::Backend {
                        item: Some(query.item_id().to_owned()),
                        message,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ensemble(&scores)
    }

    pub fn diagnose(&self, query: &PredictionRecord, list: &CandidateList) -> Result<Diagnosis> {
        let classes = list.classes();
        let roles = self.roles(classes, 0).ok_or_else(|| {
            let missing = if self.support.has_class(classes[0]) {
                classes.get(1).copied().unwrap_or(classes[0])
            } else {
                classes[0]
            };
            Error::MissingExemplarClass(missing)
        })?;
        let (score, g0) = self.score(query, &roles)?;
        let delta = detection_score(g0, query.confidence());
        Ok(Diagnosis {
            score,
            g0,
            delta,
            accepted: delta > self.config.delta_threshold,
        })
    }

    pub fn therapy(&self, query: &PredictionRecord, list: &CandidateList, diagnosis: &Diagnosis) -> Result<TherapyOutcome> {
        let classes = list.classes();
        let mut scored = vec![CandidateScore {
            class: classes[0],
            score: diagnosis.score,
            true_prob: diagnosis.g0,
        }];
        let mut skipped = Vec::new();
        for pos in 1..classes.len() {
            let Some(roles) = self.roles(classes, pos) else {
                log::warn!(
                    "item={} phase=therapy skipped_class={} reason=no_exemplars",
                    query.item_id(),
                    classes[pos]
                );
                skipped.push(classes[pos]);
                continue;
            };
            match self.score(query, &roles) {
                Ok((score, true_prob)) => scored.push(CandidateScore {
                    class: classes[pos],
                    score,
                    true_prob,
                }),
                Err(Error::MissingExemplarClass(c)) => {
                    log::warn!(
                        "item={} phase=therapy skipped_class={} reason=no_exemplar_for_{}",
                        query.item_id(),
                        classes[pos],
                        c
                    );
                    skipped.push(classes[pos]);
                }
                Err(e) => return Err(e),
            }
        }
        let picked: Vec<ClassId> = scored.iter().map(|s| s.class).collect();
        let probs: Vec<f64> = scored.iter().map(|s| s.true_prob).collect();
        let rectified_label = pick_label(&picked, &probs);
        log::info!(
            "item={} phase=therapy delta={:.6} rectified={}",
            query.item_id(),
            diagnosis.delta,
            rectified_label
        );
        Ok(TherapyOutcome {
            item_id: query.item_id().to_owned(),
            original_pred: query.pred(),
            rectified_label,
            delta: diagnosis.delta,
            accepted: false,
            candidates: list.clone(),
            scored,
            skipped,
        })
    }

    /// Candidates, diagnosis, and therapy when the diagnosis rejects.
    pub fn process(&self, query: &PredictionRecord) -> Result<TherapyOutcome> {
        let list = self.candidates(query)?;
        let diagnosis = self.diagnose(query, &list)?;
        log::info!(
            "item={} phase=diagnose delta={:.6} accepted={}",
            query.item_id(),
            diagnosis.delta,
            diagnosis.accepted
        );
        if diagnosis.accepted {
            return Ok(TherapyOutcome {
                item_id: query.item_id().to_owned(),
                original_pred: query.pred(),
                rectified_label: query.pred(),
                delta: diagnosis.delta,
                accepted: true,
                candidates: list.clone(),
                scored: vec![CandidateScore {
                    class: list.original(),
                    score: diagnosis.score,
                    true_prob: diagnosis.g0,
                }],
                skipped: Vec::new(),
            });
        }
        self.therapy(query, &list, &diagnosis)
    }

    /// Processes `items` on `workers` threads; output order follows input.
    pub fn run(&self, items: &[&PredictionRecord], workers: usize) -> Result<MvtRun> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let results: Vec<Result<TherapyOutcome>> =
            pool.install(|| items.par_iter().map(|r| self.process(r)).collect());
        let mut run = MvtRun::default();
        for (item, result) in items.iter().zip(results) {
            match result {
                Ok(o) => run.outcomes.push(o),
                Err(e) => {
                    log::warn!("item={} phase=failed error={e}", item.item_id());
                    run.failures.push(ItemFailure {
                        item_id: item.item_id().to_owned(),
                        message: e.to_string(),
                    });
                }
            }
        }
        Ok(run)
    }
}

/// Full pass over every manifest item.
pub fn run_mvt(
    manifest: &Manifest,
    predictions: &PredictionTable,
    support: &SupportSet,
    transition: &TransitionMatrix,
    backend: &dyn Backend,
    config: &MvtConfig,
    workers: usize,
) -> Result<MvtRun> {
    let caps = backend.capabilities()?;
    caps.validate()?;
    if caps.class_names != manifest.class_names {
        return Err(Error::backend(
            None,
            "backend class names differ from the manifest",
        ));
    }
    let engine = Engine::new(support, transition, backend, config, &manifest.class_names)?;
    let items = manifest
        .items
        .iter()
        .map(|i| {
            predictions
                .get(&i.item_id)
                .ok_or_else(|| Error::MissingPredictions(vec![i.item_id.clone()]))
        })
        .collect::<Result<Vec<_>>>()?;
    engine.run(&items, workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: f64, f: f64) -> IclScore {
        IclScore::new(t, f).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let (_, p) = ensemble(&[s(2.0, 1.0)]).unwrap();
        assert!((p - 0.7311).abs() < 1e-4);

        let (mean, p) = ensemble(&[s(2.0, 1.0), s(0.0, 3.0), s(1.0, 1.0)]).unwrap();
        assert!((mean.true_logit - 1.0).abs() < 1e-15);
        assert!((mean.false_logit - 5.0 / 3.0).abs() < 1e-15);
        let expect = 1.0 / (1.0 + (2.0f64 / 3.0).exp());
        assert!((p - expect).abs() < 1e-12);
        assert!((p - 0.3392).abs() < 1e-4);

        for a in [-7.0, 0.0, 3.5] {
            assert_eq!(ensemble(&[s(a, a)]).unwrap().1, 0.5);
        }
        assert!(matches!(ensemble(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn detection_score_examples() {
        assert!((detection_score(0.9, 0.7) - 0.8).abs() < 1e-12);
        assert!((detection_score(0.3, 0.5) - 0.4).abs() < 1e-12);
        let g0 = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((g0 - 0.9820).abs() < 1e-4);
        assert!((detection_score(g0, 0.9) - 0.9410).abs() < 1e-4);
    }

    #[test]
    fn pick_label_examples() {
        let c = [ClassId(0), ClassId(2), ClassId(1)];
        assert_eq!(pick_label(&c, &[0.40, 0.91, 0.22]), ClassId(2));
        assert_eq!(pick_label(&c, &[0.5, 0.5, 0.2]), ClassId(0));
        assert_eq!(pick_label(&c, &[0.1, 0.7, 0.7]), ClassId(2));
    }
}
