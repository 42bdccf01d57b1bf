//! Line-delimited JSON readers and writers for manifests, prediction
//! tables, support labels and rectified-label exports.
//!
//! Every reader rejects malformed lines with the offending line number;
//! every writer produces deterministic bytes and replaces its target
//! atomically.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassId, LogitVector, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, items: Vec<ManifestItem>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a manifest needs at least 2 classes, got {}",
                class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate item_id {}",
                    item.item_id
                )));
            }
            if let Some(l) = item.label {
                ClassId::checked(l.0, class_names.len())?;
            }
        }
        Ok(Manifest { class_names, items })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Known clean labels keyed by item id.
    pub fn labels(&self) -> HashMap<String, ClassId> {
        self.items
            .iter()
            .filter_map(|i| i.label.map(|l| (i.item_id.clone(), l)))
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<ClassId> {
        self.class_names.iter().position(|n| n == name).map(ClassId)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = json_line(&ManifestHeader {
            class_names: self.class_names.clone(),
        });
        for item in &self.items {
            out.push_str(&json_line(item));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub item_id: String,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl From<&PredictionRecord> for PredictionRow {
    fn from(r: &PredictionRecord) -> Self {
        PredictionRow {
            item_id: r.item_id().to_owned(),
            logits: r.logits().as_slice().to_vec(),
            features: r.features().map(<[f64]>::to_vec),
        }
    }
}

/// Prediction records in manifest order, all sharing one class count and
/// (when present) one feature dimension.
#[derive(Debug, Clone)]
pub struct PredictionTable {
    num_classes: usize,
    feature_dim: Option<usize>,
    records: Vec<PredictionRecord>,
    index: HashMap<String, usize>,
}

impl PredictionTable {
    pub fn new(num_classes: usize, records: Vec<PredictionRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        let mut feature_dim = None;
        for (i, r) in records.iter().enumerate() {
            if r.num_classes() != num_classes {
                return Err(Error::InvalidInput(format!(
                    "{} has {} logits, expected {num_classes}",
                    r.item_id(),
                    r.num_classes()
                )));
            }
            if let Some(f) = r.features() {
                match feature_dim {
                    None => feature_dim = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(Error::InvalidInput(format!(
                            "{} has {} features, expected {d}",
                            r.item_id(),
                            f.len()
                        )))
                    }
                    _ => {}
                }
            }
            if index.insert(r.item_id().to_owned(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate prediction for {}",
                    r.item_id()
                )));
            }
        }
        Ok(PredictionTable {
            num_classes,
            feature_dim,
            records,
            index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    pub fn get(&self, item_id: &str) -> Option<&PredictionRecord> {
        self.index.get(item_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| json_line(&PredictionRow::from(r)))
            .collect()
    }
}

/// One row of the rectified-label export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectifiedRecord {
    pub item_id: String,
    pub original_pred: ClassId,
    pub rectified_label: ClassId,
    pub delta: f64,
    pub accepted: bool,
    pub candidate_classes: Vec<ClassId>,
    pub candidate_true_probs: Vec<f64>,
}

impl RectifiedRecord {
    /// Checks the threshold-free invariants of a record.
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(format!("{}: {m}", self.item_id)));
        if !(0.0..=1.0).contains(&self.delta) {
            return fail(format!("delta {} outside [0, 1]", self.delta));
        }
        if self.accepted && self.rectified_label != self.original_pred {
            return fail("accepted record must keep the original prediction".into());
        }
        if self.candidate_classes.len() != self.candidate_true_probs.len() {
            return fail("candidate lists differ in length".into());
        }
        if self
            .candidate_true_probs
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return fail("candidate probability outside [0, 1]".into());
        }
        Ok(())
    }
}

/// Support-set labels as edited by an annotator. A `null` label marks an
/// item still awaiting annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportLabelRow {
    pub item_id: String,
    pub clean_label: Option<ClassId>,
}

/// Fine-tuning pair exported for the vision model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRow {
    pub item_id: String,
    pub label: ClassId,
}

pub fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("serializable row");
    s.push('\n');
    s
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(json_line).collect()
}

/// Parses every nonblank-terminated line of `text` as `T`; errors name the line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 1;
            serde_json::from_str(line)
                .map(|v| (line_no, v))
                .map_err(|e| Error::Format {
                    path: origin.to_owned(),
                    line: line_no,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::EmptyManifest(origin.into()))?;
    let header: ManifestHeader = serde_json::from_str(header_line).map_err(|e| Error::Format {
        path: origin.to_owned(),
        line: 1,
        message: format!("header must carry class_names: {e}"),
    })?;
    let c = header.class_names.len();
    if c < 2 {
        return Err(Error::Format {
            path: origin.to_owned(),
            line: 1,
            message: format!("need at least 2 class names, got {c}"),
        });
    }
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let fmt_err = |message: String| Error::Format {
            path: origin.to_owned(),
            line: line_no,
            message,
        };
        let item: ManifestItem = serde_json::from_str(line).map_err(|e| fmt_err(e.to_string()))?;
        if let Some(l) = item.label {
            if l.0 >= c {
                return Err(fmt_err(format!("label {} out of range for {c} classes", l.0)));
            }
        }
        if !seen.insert(item.item_id.clone()) {
            return Err(fmt_err(format!("duplicate item_id {}", item.item_id)));
        }
        items.push(item);
    }
    Ok(Manifest {
        class_names: header.class_names,
        items,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyManifest(path.to_owned()));
    }
    parse_manifest(&text, &path.display().to_string())
}

pub fn parse_prediction_table(text: &str, origin: &str, manifest: &Manifest) -> Result<PredictionTable> {
    let c = manifest.num_classes();
    let known: HashSet<&str> = manifest.items.iter().map(|i| i.item_id.as_str()).collect();
    let mut by_id: HashMap<String, PredictionRecord> = HashMap::new();
    for (line_no, row) in parse_jsonl::<PredictionRow>(text, origin)? {
        let fmt_err = |message: String| Error::Format {
            path: origin.to_owned(),
            line: line_no,
            message,
        };
        if !known.contains(row.item_id.as_str()) {
            return Err(fmt_err(format!("unknown item_id {}", row.item_id)));
        }
        if row.logits.len() != c {
            return Err(fmt_err(format!(
                "{} logits given, manifest has {c} classes",
                row.logits.len()
            )));
        }
        if by_id.contains_key(&row.item_id) {
            return Err(fmt_err(format!("duplicate item_id {}", row.item_id)));
        }
        let logits = LogitVector::new(row.logits).map_err(|e| fmt_err(e.to_string()))?;
        let record = PredictionRecord::new(row.item_id.clone(), logits, row.features)
            .map_err(|e| fmt_err(e.to_string()))?;
        by_id.insert(row.item_id, record);
    }
    let missing: Vec<String> = manifest
        .items
        .iter()
        .filter(|i| !by_id.contains_key(&i.item_id))
        .map(|i| i.item_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let records = manifest
        .items
        .iter()
        .map(|i| by_id.remove(&i.item_id).expect("checked above"))
        .collect();
    PredictionTable::new(c, records).map_err(|e| Error::Format {
        path: origin.to_owned(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn load_prediction_table(path: &Path, manifest: &Manifest) -> Result<PredictionTable> {
    parse_prediction_table(&read_text(path)?, &path.display().to_string(), manifest)
}

pub fn write_rectified(records: &[RectifiedRecord], path: &Path) -> Result<()> {
    for r in records {
        r.check()?;
    }
    write_atomic(path, to_jsonl(records).as_bytes())
}

pub fn read_rectified(path: &Path) -> Result<Vec<RectifiedRecord>> {
    let origin = path.display().to_string();
    parse_jsonl::<RectifiedRecord>(&read_text(path)?, &origin)?
        .into_iter()
        .map(|(line, r)| {
            r.check().map(|_| r).map_err(|e| Error::Format {
                path: origin.clone(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_support_labels(path: &Path) -> Result<Vec<SupportLabelRow>> {
    let origin = path.display().to_string();
    let rows: Vec<SupportLabelRow> = parse_jsonl(&read_text(path)?, &origin)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    Ok(rows)
}

pub fn write_support_labels(rows: &[SupportLabelRow], path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(rows).as_bytes())
}
