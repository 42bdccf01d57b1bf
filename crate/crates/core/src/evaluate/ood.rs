//! Open-class detection: which items belong to the classifier's label
//! space, judged by thresholding a per-item score.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::io::Manifest;
use crate::seeding::SeedKey;
use crate::types::{ClassId, PredictionRecord};

pub const DEFAULT_CLOSED_FRACTION: f64 = 0.6;
pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OodSplit {
    num_classes: usize,
    closed: BTreeSet<ClassId>,
}

impl OodSplit {
    pub fn new(num_classes: usize, closed: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let closed: BTreeSet<ClassId> = closed.into_iter().collect();
        if let Some(bad) = closed.iter().find(|c| c.index() >= num_classes) {
            return Err(Error::Index {
                index: bad.index(),
                num_classes,
            });
        }
        if closed.is_empty() || closed.len() == num_classes {
            return Err(Error::InvalidInput("both closed and open classes must be nonempty".into()));
        }
        Ok(OodSplit { num_classes, closed })
    }

    /// A seeded random `fraction` of the classes (rounded) is closed.
    pub fn seeded(num_classes: usize, seed: u64, fraction: f64) -> Result<Self> {
        let k = (fraction * num_classes as f64).round() as usize;
        let mut rng = SeedKey::new("ood-split").u64(seed).rng();
        let picks = index::sample(&mut rng, num_classes, k.min(num_classes)).into_vec();
        Self::new(num_classes, picks.into_iter().map(ClassId))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn closed_classes(&self) -> Vec<ClassId> {
        self.closed.iter().copied().collect()
    }

    pub fn is_closed(&self, class: ClassId) -> bool {
        self.closed.contains(&class)
    }

    /// Labelled manifest items as `(item_id, is_closed)`.
    pub fn partition(&self, manifest: &Manifest) -> Vec<(String, bool)> {
        manifest
            .items
            .iter()
            .filter_map(|i| Some((i.item_id.clone(), self.is_closed(i.label?))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Curve {
    pub thresholds: Vec<f64>,
    pub f1: Vec<f64>,
}

impl F1Curve {
    /// `(threshold, f1)` at the highest F1; the lowest such threshold wins.
    pub fn best(&self) -> (f64, f64) {
        let mut best = (self.thresholds[0], self.f1[0]);
        for (t, f) in self.thresholds.iter().zip(&self.f1) {
            if *f > best.1 {
                best = (*t, *f);
            }
        }
        best
    }
}

/// F1 of "closed when score > threshold", closed being the positive class.
/// Zero when nothing is predicted closed.
pub fn f1_at(scores: &[f64], closed: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, c) in scores.iter().zip(closed) {
        match (*s > threshold, *c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// F1 over `points` evenly spaced thresholds in `[0, 1]`.
pub fn f1_sweep(scores: &[f64], closed: &[bool], points: usize) -> Result<F1Curve> {
    if scores.len() != closed.len() || scores.is_empty() {
        return Err(Error::InvalidInput("scores and labels must be equal nonempty lists".into()));
    }
    if points < 2 {
        return Err(Error::InvalidInput("a threshold grid needs at least 2 points".into()));
    }
    let thresholds: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let f1 = thresholds.iter().map(|t| f1_at(scores, closed, *t)).collect();
    Ok(F1Curve { thresholds, f1 })
}

/// Per-item detection criteria from the diagnose stage alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub item_id: String,
    pub closed: bool,
    pub confidence: f64,
    pub g0: f64,
    pub delta: f64,
}

/// Runs diagnose on every item; failed items are returned
/// separately with their error message.
pub fn detection_scores(
    engine: &Engine<'_>,
    items: &[(&PredictionRecord, bool)],
    workers: usize,
) -> Result<(Vec<DetectionRow>, Vec<(String, String)>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<DetectionRow>> = pool.install(|| {
        items
            .par_iter()
            .map(|(rec, closed)| {
                let list = engine.candidates(rec)?;
                let d = engine.diagnose(rec, &list)?;
                Ok(DetectionRow {
                    item_id: rec.item_id().to_owned(),
                    closed: *closed,
                    confidence: rec.confidence(),
                    g0: d.g0,
                    delta: d.delta,
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for ((rec, _), r) in items.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failed.push((rec.item_id().to_owned(), e.to_string())),
        }
    }
    Ok((rows, failed))
}

/// Sweeps of the three criteria, keyed `confidence`, `g0`, `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSweep {
    pub confidence: F1Curve,
    pub g0: F1Curve,
    pub delta: F1Curve,
}

impl DetectionSweep {
    pub fn from_rows(rows: &[DetectionRow], points: usize) -> Result<Self> {
        let closed: Vec<bool> = rows.iter().map(|r| r.closed).collect();
        let sweep = |f: fn(&DetectionRow) -> f64| {
            let s: Vec<f64> = rows.iter().map(f).collect();
            f1_sweep(&s, &closed, points)
        };
        Ok(DetectionSweep {
            confidence: sweep(|r| r.confidence)?,
            g0: sweep(|r| r.g0)?,
            delta: sweep(|r| r.delta)?,
        })
    }

    pub fn curves(&self) -> [(&'static str, &F1Curve); 3] {
        [("confidence", &self.confidence), ("g0", &self.g0), ("delta", &self.delta)]
    }
}

/// Line plot of the F1 curves as a standalone SVG document.
pub fn render_svg(sweep: &DetectionSweep) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c"];
    let x = |t: f64| PAD + t * (W - 2.0 * PAD);
    let y = |f: f64| H - PAD - f * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">threshold</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(svg, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">F1</text>"#, H / 2.0, H / 2.0);
    for (i, ((name, curve), color)) in sweep.curves().iter().zip(colors).enumerate() {
        let points: Vec<String> = curve
            .thresholds
            .iter()
            .zip(&curve.f1)
            .map(|(t, f)| format!("{:.2},{:.2}", x(*t), y(*f)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            W - PAD - 70.0,
            PAD + 16.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
