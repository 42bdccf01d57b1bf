//! Deterministic simulators standing in for a vision classifier and an
//! in-context multimodal scorer.
//!
//! Every sampled quantity is drawn from an RNG keyed by a hash of
//! `(seed, item_id[, queried class, repeat])`, so outputs do not depend on
//! call order, batching or thread count.
//!
//! Classifier: the true label comes from the class prior, the prediction
//! from row `y` of the clean-to-noisy generator `Q`, and the confidence
//! from `conf_correct` or `conf_wrong` depending on whether the prediction
//! is right. The remaining probability mass goes to the other classes in
//! proportion to the configured tail weights. Features are a per-class
//! prototype plus isotropic Gaussian noise.
//!
//! Scorer: `true_logit - false_logit = 2 * margin * z + noise`, where `z`
//! is the correct sign with probability `fidelity` and
//! `noise ~ Normal(0, sigma^2)`. With no noise the logits are exactly
//! `(+margin, -margin)` or the reverse.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendCapabilities, FinetuneAck, IclScore};
use crate::engine::Instruction;
use crate::error::{Error, Result};
use crate::io::{FinetuneRow, Manifest, ManifestItem, PredictionTable};
use crate::seeding::SeedKey;
use crate::types::{ClassId, LogitVector, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        BetaParams { alpha, beta }
    }
}

/// How the clean-to-noisy generator matrix is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Explicit row-stochastic rows, row `y` = P(pred | true = y).
    Matrix { rows: Vec<Vec<f64>> },
    /// `diagonal` on the diagonal, the rest spread evenly.
    Symmetric { diagonal: f64 },
    /// Contiguous blocks of `block_size` classes; confusions stay inside a
    /// block.
    Block { diagonal: f64, block_size: usize },
    /// Only `closed` classes are ever predicted. Closed classes keep
    /// `diagonal` and confuse among themselves; open classes map uniformly
    /// onto closed ones.
    OpenSet { diagonal: f64, closed: Vec<usize> },
}

impl NoiseModel {
    pub fn matrix(&self, c: usize) -> Result<Vec<Vec<f64>>> {
        let spread = |diag: f64, peers: &[usize], own: usize| -> Vec<f64> {
            let others: Vec<usize> = peers.iter().copied().filter(|&k| k != own).collect();
            let mut row = vec![0.0; c];
            if others.is_empty() {
                row[own] = 1.0;
                return row;
            }
            row[own] = diag;
            for k in &others {
                row[*k] = (1.0 - diag) / others.len() as f64;
            }
            row
        };
        let check_diag = |d: f64| {
            if (0.0..=1.0).contains(&d) {
                Ok(())
            } else {
                Err(Error::Config(format!("diagonal {d} outside [0, 1]")))
            }
        };
        let all: Vec<usize> = (0..c).collect();
        let rows = match self {
            NoiseModel::Matrix { rows } => rows.clone(),
            NoiseModel::Symmetric { diagonal } => {
                check_diag(*diagonal)?;
                (0..c).map(|y| spread(*diagonal, &all, y)).collect()
            }
            NoiseModel::Block {
                diagonal,
                block_size,
            } => {
                check_diag(*diagonal)?;
                if *block_size == 0 {
                    return Err(Error::Config("block_size must be positive".into()));
                }
                (0..c)
                    .map(|y| {
                        let start = y / block_size * block_size;
                        let peers: Vec<usize> = (start..(start + block_size).min(c)).collect();
                        spread(*diagonal, &peers, y)
                    })
                    .collect()
            }
            NoiseModel::OpenSet { diagonal, closed } => {
                check_diag(*diagonal)?;
                if closed.is_empty() || closed.iter().any(|&k| k >= c) {
                    return Err(Error::Config("closed classes must be nonempty and in range".into()));
                }
                (0..c)
                    .map(|y| {
                        if closed.contains(&y) {
                            spread(*diagonal, closed, y)
                        } else {
                            let mut row = vec![0.0; c];
                            for &k in closed {
                                row[k] = 1.0 / closed.len() as f64;
                            }
                            row
                        }
                    })
                    .collect()
            }
        };
        if rows.len() != c || rows.iter().any(|r| r.len() != c) {
            return Err(Error::Config(format!("generator matrix must be {c}x{c}")));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("generator row {i} is not a distribution")));
            }
        }
        Ok(rows)
    }
}

/// Where the non-predicted probability mass goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Proportional to the generator row of the true class (plus a floor).
    QRow,
    /// Random weights per item, unrelated to the true class.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimClassifierSpec {
    pub noise: NoiseModel,
    #[serde(default = "default_conf_correct")]
    pub conf_correct: BetaParams,
    #[serde(default = "default_conf_wrong")]
    pub conf_wrong: BetaParams,
    #[serde(default)]
    pub feature_dim: usize,
    #[serde(default = "default_feature_sigma")]
    pub feature_noise_sigma: f64,
    #[serde(default = "default_tail")]
    pub tail: TailMode,
    /// Unnormalized class prior for true labels; uniform when absent.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
}

fn default_conf_correct() -> BetaParams {
    BetaParams::new(8.0, 2.0)
}
fn default_conf_wrong() -> BetaParams {
    BetaParams::new(2.0, 2.0)
}
fn default_feature_sigma() -> f64 {
    0.5
}
fn default_tail() -> TailMode {
    TailMode::QRow
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScorerSpec {
    /// Probability of answering with the correct sign.
    pub fidelity: f64,
    /// Overrides `fidelity` for queries whose correct answer is True.
    #[serde(default)]
    pub fidelity_true: Option<f64>,
    /// Logit magnitude; 0 makes the scorer uninformative.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_logit_sigma")]
    pub logit_noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_margin() -> f64 {
    2.0
}
fn default_logit_sigma() -> f64 {
    0.5
}

impl SimScorerSpec {
    pub fn perfect() -> Self {
        SimScorerSpec {
            fidelity: 1.0,
            fidelity_true: None,
            margin: 2.0,
            logit_noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn uninformative() -> Self {
        SimScorerSpec {
            margin: 0.0,
            ..Self::perfect()
        }
    }
}

/// A complete simulated world: dataset, classifier and scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub n_items: usize,
    #[serde(default = "default_prefix")]
    pub item_prefix: String,
    pub seed: u64,
    pub classifier: SimClassifierSpec,
    pub scorer: SimScorerSpec,
}

fn default_prefix() -> String {
    "img-".into()
}

impl SimSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).map(|i| format!("class_{i}")).collect())
    }

    pub fn item_id(&self, index: usize) -> String {
        format!("{}{index:06}", self.item_prefix)
    }

    fn item_index(&self, item_id: &str) -> Option<usize> {
        let index: usize = item_id.strip_prefix(&self.item_prefix)?.parse().ok()?;
        (index < self.n_items && self.item_id(index) == item_id).then_some(index)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail("a simulation needs at least 2 classes".into());
        }
        if self.class_names().len() != self.num_classes {
            return fail("class_names length differs from num_classes".into());
        }
        self.classifier.noise.matrix(self.num_classes)?;
        for b in [self.classifier.conf_correct, self.classifier.conf_wrong] {
            if !(b.alpha > 0.0 && b.beta > 0.0) {
                return fail("Beta parameters must be positive".into());
            }
        }
        if !(self.classifier.feature_noise_sigma >= 0.0) {
            return fail("feature_noise_sigma must be non-negative".into());
        }
        if let Some(p) = &self.classifier.class_prior {
            if p.len() != self.num_classes || p.iter().any(|w| !(*w >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                return fail("class_prior must hold one non-negative weight per class".into());
            }
        }
        let s = &self.scorer;
        for f in std::iter::once(s.fidelity).chain(s.fidelity_true) {
            if !(0.5..=1.0).contains(&f) {
                return fail(format!("scorer fidelity {f} outside [0.5, 1]"));
            }
        }
        if !(s.margin >= 0.0 && s.margin.is_finite()) {
            return fail("scorer margin must be finite and non-negative".into());
        }
        if !(s.logit_noise_sigma >= 0.0) {
            return fail("logit_noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Sample an index from unnormalized weights.
fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Floor added to tail weights so every class keeps some mass.
const TAIL_FLOOR: f64 = 0.05;

pub struct SimBackend {
    spec: SimSpec,
    class_names: Vec<String>,
    generator: Vec<Vec<f64>>,
    prior: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
}

impl SimBackend {
    pub fn new(spec: SimSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.num_classes;
        let generator = spec.classifier.noise.matrix(c)?;
        let prior = spec.classifier.class_prior.clone().unwrap_or_else(|| vec![1.0; c]);
        let prototypes = (0..c)
            .map(|k| {
                let mut rng = SeedKey::new("sim-prototype").u64(spec.seed).u64(k as u64).rng();
                (0..spec.classifier.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(SimBackend {
            class_names: spec.class_names(),
            spec,
            generator,
            prior,
            prototypes,
        })
    }

    pub fn spec(&self) -> &SimSpec {
        &self.spec
    }

    pub fn generator(&self) -> &[Vec<f64>] {
        &self.generator
    }

    pub fn item_ids(&self) -> Vec<String> {
        (0..self.spec.n_items).map(|i| self.spec.item_id(i)).collect()
    }

    fn known(&self, item_id: &str) -> Result<()> {
        self.spec
            .item_index(item_id)
            .map(|_| ())
            .ok_or_else(|| Error::backend(Some(item_id), format!("unknown item_id {item_id}")))
    }

    /// Ground-truth label of a simulated item.
    pub fn true_label(&self, item_id: &str) -> Result<ClassId> {
        self.known(item_id)?;
        let mut rng = SeedKey::new("sim-label").u64(self.spec.seed).str(item_id).rng();
        Ok(ClassId(categorical(&mut rng, &self.prior)))
    }

    pub fn predict_one(&self, item_id: &str) -> Result<PredictionRecord> {
        let y = self.true_label(item_id)?.index();
        let c = self.spec.num_classes;
        let cls = &self.spec.classifier;
        let mut rng = SeedKey::new("sim-predict").u64(self.spec.seed).str(item_id).rng();

        let pred = categorical(&mut rng, &self.generator[y]);
        let params = if pred == y { cls.conf_correct } else { cls.conf_wrong };
        let drawn: f64 = Beta::new(params.alpha, params.beta)
            .expect("validated Beta parameters")
            .sample(&mut rng);

        let mut tail: Vec<f64> = (0..c)
            .map(|k| match cls.tail {
                TailMode::QRow => self.generator[y][k] + TAIL_FLOOR,
                TailMode::Random => rng.random::<f64>() + TAIL_FLOOR,
            })
            .collect();
        tail[pred] = 0.0;
        let total: f64 = tail.iter().sum();
        tail.iter_mut().for_each(|w| *w /= total);

        // The drawn confidence must stay the strict maximum.
        let heaviest = tail.iter().copied().fold(0.0, f64::max);
        let floor = heaviest / (1.0 + heaviest) + 1e-6;
        let confidence = drawn.clamp(floor, 1.0 - 1e-9);
        let logits: Vec<f64> = (0..c)
            .map(|k| {
                if k == pred {
                    confidence.ln()
                } else {
                    ((1.0 - confidence) * tail[k]).ln()
                }
            })
            .collect();

        let features = (cls.feature_dim > 0).then(|| {
            let mut frng = SeedKey::new("sim-features").u64(self.spec.seed).str(item_id).rng();
            self.prototypes[y]
                .iter()
                .map(|p| {
                    let n: f64 = StandardNormal.sample(&mut frng);
                    p + cls.feature_noise_sigma * n
                })
                .collect()
        });
        PredictionRecord::new(item_id, LogitVector::new(logits)?, features)
    }

    /// The manifest (with ground-truth labels) and predictions of the whole
    /// simulated dataset.
    pub fn generate(&self) -> Result<(Manifest, PredictionTable)> {
        let ids = self.item_ids();
        let items = ids
            .iter()
            .map(|id| {
                Ok(ManifestItem {
                    item_id: id.clone(),
                    label: Some(self.true_label(id)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let records = ids.iter().map(|id| self.predict_one(id)).collect::<Result<Vec<_>>>()?;
        Ok((
            Manifest::new(self.class_names.clone(), items)?,
            PredictionTable::new(self.spec.num_classes, records)?,
        ))
    }

    fn class_of(&self, name: &str, fallback: ClassId) -> Result<ClassId> {
        match self.class_names.iter().position(|n| n == name) {
            Some(i) => Ok(ClassId(i)),
            None if name.is_empty() => Ok(fallback),
            None => Err(Error::backend(None, format!("unknown class name {name}"))),
        }
    }

    /// Logit pair for asking whether `query_id` shows `class`.
    pub fn score_query(&self, query_id: &str, class: ClassId, repeat: usize) -> Result<IclScore> {
        let y = self.true_label(query_id)?;
        let sc = &self.spec.scorer;
        let correct_true = y == class;
        let fidelity = if correct_true {
            sc.fidelity_true.unwrap_or(sc.fidelity)
        } else {
            sc.fidelity
        };
        let mut rng = SeedKey::new("sim-icl")
            .u64(sc.seed)
            .str(query_id)
            .u64(class.index() as u64)
            .u64(repeat as u64)
            .rng();
        let correct_sign = if correct_true { 1.0 } else { -1.0 };
        let z = if rng.random::<f64>() < fidelity {
            correct_sign
        } else {
            -correct_sign
        };
        let noise = if sc.logit_noise_sigma > 0.0 {
            Normal::new(0.0, sc.logit_noise_sigma)
                .expect("validated sigma")
                .sample(&mut rng)
        } else {
            0.0
        };
        let half = sc.margin * z + noise / 2.0;
        IclScore::new(half, -half)
    }
}

impl Backend for SimBackend {
    fn capabilities(&self) -> Result<BackendCapabilities> {
        let feature_dim = self.spec.classifier.feature_dim;
        Ok(BackendCapabilities {
            num_classes: self.spec.num_classes,
            class_names: self.class_names.clone(),
            feature_dim: (feature_dim > 0).then_some(feature_dim),
            supports_finetune: false,
            metadata: BTreeMap::from([
                ("backend".to_string(), "sim".to_string()),
                ("true_false_convention".to_string(), "simulated logit pair".to_string()),
            ]),
        })
    }

    fn predict_batch(&self, item_ids: &[String]) -> Result<Vec<Result<PredictionRecord>>> {
        Ok(item_ids.iter().map(|id| self.predict_one(id)).collect())
    }

    fn score_icl(&self, instruction: &Instruction) -> Result<IclScore> {
        for e in &instruction.exemplars {
            self.known(&e.item_id)?;
        }
        let class = self.class_of(&instruction.query.class_name, instruction.query.class)?;
        self.score_query(&instruction.query.item_id, class, instruction.repeat)
    }

    fn request_finetune(&self, _records: &[FinetuneRow], _epochs: usize, _lr: f64) -> Result<FinetuneAck> {
        Err(Error::Capability(
            "the simulator does not fine-tune; export the rectified labels instead".into(),
        ))
    }
}
