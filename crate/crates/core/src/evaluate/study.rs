//! Ablation grids: every combination of overridden config values runs the
//! full pipeline against ground truth and yields one result row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::metrics::{self, RunMetrics};
use crate::backend::Backend;
use crate::config::MvtConfig;
use crate::engine::run_mvt;
use crate::error::{Error, Result};
use crate::io::{Manifest, PredictionTable};
use crate::sampler::{self, annotate, rank_by_predicted_class, SupportSet};
use crate::seeding::{sha256_hex, SeedKey};
use crate::transition::candidates::{self as cands, CandidateList};
use crate::transition::{estimate_transition, TransitionMatrix};

fn default_sampler() -> String {
    "stratified".into()
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    #[serde(default)]
    pub base: MvtConfig,
    /// Config key to the values it takes; the grid is their product.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
    pub seed: u64,
    #[serde(default = "default_sampler")]
    pub sampler: String,
    /// Each replicate reruns the whole grid with a fresh support seed;
    /// rows within a replicate share it, so they are paired.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl StudySpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: StudySpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        sampler::registry().get(&spec.sampler)?;
        Ok(spec)
    }

    /// Grid points in order; the last key varies fastest.
    pub fn grid_points(&self) -> Result<Vec<Vec<(String, Value)>>> {
        let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for (key, values) in &self.grid {
            if values.is_empty() {
                return Err(Error::Config(format!("grid key '{key}' has no values")));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        Ok(points)
    }
}

/// Support set and transition estimate for one configuration; labels come
/// from the manifest, acting as the annotator.
pub fn prepare(
    manifest: &Manifest,
    predictions: &PredictionTable,
    config: &MvtConfig,
    sampler_name: &str,
) -> Result<(SupportSet, TransitionMatrix)> {
    let sampler = sampler::registry().get(sampler_name)?;
    let buckets = rank_by_predicted_class(predictions);
    let selection = sampler.select(&buckets, config.rho, config.seed);
    let support = annotate(&selection, &manifest.labels(), predictions)?;
    let t = estimate_transition(&support, manifest.num_classes(), config.smoothing_epsilon);
    Ok((support, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    #[serde(flatten)]
    pub run: RunMetrics,
    pub candidate_coverage: f64,
    pub transition_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub index: usize,
    pub replicate: usize,
    /// SHA-256 of the row's config JSON.
    pub fingerprint: String,
    pub overrides: BTreeMap<String, Value>,
    pub config: MvtConfig,
    pub metrics: StudyMetrics,
}

pub fn run_study(
    spec: &StudySpec,
    manifest: &Manifest,
    predictions: &PredictionTable,
    backend: &dyn Backend,
    workers: usize,
) -> Result<Vec<StudyRow>> {
    let points = spec.grid_points()?;
    let reference = metrics::empirical_transition(manifest, predictions)?;
    let labelled: Vec<_> = manifest
        .items
        .iter()
        .filter_map(|i| Some((predictions.get(&i.item_id)?, i.label?)))
        .collect();
    let truth: Vec<_> = labelled.iter().map(|(_, l)| *l).collect();
    let mut rows = Vec::new();
    for replicate in 0..spec.replicates.max(1) {
        let seed = SeedKey::new("study").u64(spec.seed).u64(replicate as u64).derive();
        for overrides in &points {
            let mut config = spec.base.with_overrides([("seed", &Value::from(seed))])?;
            config = config.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v)))?;
            let (support, t) = prepare(manifest, predictions, &config, &spec.sampler)?;
            let run = run_mvt(manifest, predictions, &support, &t, backend, &config, workers)?;
            let source = cands::registry().get(&config.candidate_source)?;
            let lists = labelled
                .iter()
                .map(|(rec, _)| source.candidates(rec, &t, config.top_n))
                .collect::<Result<Vec<CandidateList>>>()?;
            let config_json = config.to_json();
            log::info!("study row {} replicate {replicate}: {config_json}", rows.len());
            rows.push(StudyRow {
                index: rows.len(),
                replicate,
                fingerprint: sha256_hex(config_json.as_bytes()),
                overrides: overrides.iter().cloned().collect(),
                metrics: StudyMetrics {
                    run: metrics::run_metrics(manifest, predictions, &run.records())?,
                    candidate_coverage: metrics::candidate_coverage(&lists, &truth)?,
                    transition_error: metrics::transition_error(&t, &reference)?,
                },
                config,
            });
        }
    }
    Ok(rows)
}

/// Fixed-width table of the main metrics, one line per row.
pub fn summary_text(rows: &[StudyRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} {:>4} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}  overrides",
        "row", "rep", "acc_pre", "acc_post", "coverage", "accepted", "t_err", "fail"
    );
    for r in rows {
        let m = &r.metrics;
        let overrides: Vec<String> = r.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            out,
            "{:>5} {:>4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>6}  {}",
            r.index,
            r.replicate,
            m.run.accuracy_before,
            m.run.accuracy_after,
            m.candidate_coverage,
            m.run.accepted_fraction,
            m.transition_error,
            m.run.failures,
            overrides.join(" ")
        );
    }
    out
}
