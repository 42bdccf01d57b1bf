//! Support-set construction: bucket items by predicted class, rank each
//! bucket by confidence, pick a small budget per bucket and attach the
//! annotator's clean labels.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::io::{PredictionTable, SupportLabelRow};
use crate::registry::{Named, Registry};
use crate::seeding::SeedKey;
use crate::types::{ClassId, PredictionRecord};

/// Items bucketed by predicted class, each bucket sorted by confidence
/// descending with ties broken by item id. Every class has a bucket.
pub type Buckets<'a> = Vec<Vec<&'a PredictionRecord>>;

/// Item ids picked for annotation, indexed by predicted class.
pub type Selection = Vec<Vec<String>>;

pub fn rank_by_predicted_class(table: &PredictionTable) -> Buckets<'_> {
    let mut buckets: Buckets<'_> = vec![Vec::new(); table.num_classes()];
    for r in table.records() {
        buckets[r.pred().index()].push(r);
    }
    for bucket in &mut buckets {
        bucket.sort_by(|a, b| {
            b.confidence()
                .total_cmp(&a.confidence())
                .then_with(|| a.item_id().cmp(b.item_id()))
        });
    }
    buckets
}

/// 1-indexed positions `ceil(j * m / rho)` for `j = 1..=rho`, or every
/// position when the bucket holds fewer than `rho` items.
pub fn stride_positions(m: usize, rho: usize) -> Vec<usize> {
    if m <= rho {
        return (1..=m).collect();
    }
    (1..=rho).map(|j| (j * m).div_ceil(rho)).collect()
}

pub trait SupportSampler: Named + Send + Sync {
    /// Picks at most `rho` item ids from each bucket.
    fn select(&self, buckets: &Buckets<'_>, rho: usize, seed: u64) -> Selection;
}

/// Evenly strided picks down the confidence ranking; always includes the
/// least confident item of a bucket.
pub struct Stratified;

impl Named for Stratified {
    fn name(&self) -> &'static str {
        "stratified"
    }
}

impl SupportSampler for Stratified {
    fn select(&self, buckets: &Buckets<'_>, rho: usize, _seed: u64) -> Selection {
        buckets
            .iter()
            .map(|bucket| {
                stride_positions(bucket.len(), rho)
                    .into_iter()
                    .map(|p| bucket[p - 1].item_id().to_owned())
                    .collect()
            })
            .collect()
    }
}

/// Uniform picks without replacement within each bucket; the baseline the
/// stratified sampler is compared against.
pub struct UniformRandom;

impl Named for UniformRandom {
    fn name(&self) -> &'static str {
        "random"
    }
}

impl SupportSampler for UniformRandom {
    fn select(&self, buckets: &Buckets<'_>, rho: usize, seed: u64) -> Selection {
        buckets
            .iter()
            .enumerate()
            .map(|(class, bucket)| {
                let k = rho.min(bucket.len());
                let mut rng = SeedKey::new("uniform-support")
                    .u64(seed)
                    .u64(class as u64)
                    .rng();
                let mut picks = index::sample(&mut rng, bucket.len(), k).into_vec();
                picks.sort_unstable();
                picks
                    .into_iter()
                    .map(|i| bucket[i].item_id().to_owned())
                    .collect()
            })
            .collect()
    }
}

pub fn registry() -> Registry<dyn SupportSampler> {
    let mut reg: Registry<dyn SupportSampler> = Registry::new("support sampler");
    reg.register(Arc::new(Stratified))
        .register(Arc::new(UniformRandom));
    reg
}

/// Convenience wrapper for the default sampler.
pub fn stratified_sample(buckets: &Buckets<'_>, rho: usize) -> Selection {
    Stratified.select(buckets, rho, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub item_id: String,
    pub clean_label: ClassId,
    pub prediction: PredictionRecord,
}

/// Human-labelled items grouped by clean label.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    by_class: Vec<Vec<SupportItem>>,
}

impl SupportSet {
    pub fn new(num_classes: usize, items: Vec<SupportItem>) -> Result<Self> {
        let mut by_class: Vec<Vec<SupportItem>> = vec![Vec::new(); num_classes];
        let mut seen = HashSet::new();
        for item in items {
            ClassId::checked(item.clean_label.index(), num_classes)?;
            if item.prediction.num_classes() != num_classes {
                return Err(Error::InvalidInput(format!(
                    "support item {} has {} classes, expected {num_classes}",
                    item.item_id,
                    item.prediction.num_classes()
                )));
            }
            if !seen.insert(item.item_id.clone()) {
                return Err(Error::InvalidInput(format!(
                    "support item {} appears twice",
                    item.item_id
                )));
            }
            by_class[item.clean_label.index()].push(item);
        }
        Ok(SupportSet { by_class })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class(&self, class: ClassId) -> &[SupportItem] {
        self.by_class
            .get(class.index())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn has_class(&self, class: ClassId) -> bool {
        !self.class(class).is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SupportItem> {
        self.by_class.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clean classes without a single exemplar.
    pub fn missing_classes(&self) -> Vec<ClassId> {
        (0..self.by_class.len())
            .map(ClassId)
            .filter(|c| !self.has_class(*c))
            .collect()
    }
}

/// Attaches clean labels to a selection. Every selected id must be
/// labelled and present in `table`.
pub fn annotate(
    selection: &Selection,
    labels: &HashMap<String, ClassId>,
    table: &PredictionTable,
) -> Result<SupportSet> {
    let ids: Vec<&String> = selection.iter().flatten().collect();
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !labels.contains_key(id.as_str()))
        .map(|id| (*id).clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::AnnotationIncomplete(missing));
    }
    let items = ids
        .into_iter()
        .map(|id| {
            let prediction = table.get(id).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("selected item {id} has no prediction"))
            })?;
            Ok(SupportItem {
                item_id: id.clone(),
                clean_label: labels[id.as_str()],
                prediction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = SupportSet::new(table.num_classes(), items)?;
    let absent = set.missing_classes();
    if !absent.is_empty() {
        log::warn!(
            "support set has no exemplars for classes {:?}",
            absent.iter().map(|c| c.index()).collect::<Vec<_>>()
        );
    }
    Ok(set)
}

/// Support set from annotator rows; any row still lacking a label fails
/// the whole set.
pub fn support_from_rows(rows: &[SupportLabelRow], table: &PredictionTable) -> Result<SupportSet> {
    let labels: HashMap<String, ClassId> = rows
        .iter()
        .filter_map(|r| Some((r.item_id.clone(), r.clean_label?)))
        .collect();
    let selection = vec![rows.iter().map(|r| r.item_id.clone()).collect()];
    annotate(&selection, &labels, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Logits whose softmax puts `conf` on `pred` and splits the rest evenly.
    fn rec(id: &str, pred: usize, conf: f64, c: usize) -> PredictionRecord {
        let rest = (1.0 - conf) / (c - 1) as f64;
        let logits = (0..c)
            .map(|k| if k == pred { conf.ln() } else { rest.ln() })
            .collect();
        PredictionRecord::from_logits(id, logits).unwrap()
    }

    fn table(recs: Vec<PredictionRecord>, c: usize) -> PredictionTable {
        PredictionTable::new(c, recs).unwrap()
    }

    #[test]
    fn ranking_orders_by_confidence_then_id() {
        let t = table(
            vec![
                rec("b", 0, 0.7, 3),
                rec("a", 0, 0.9, 3),
                rec("d", 1, 0.6, 3),
                rec("c", 1, 0.6, 3),
            ],
            3,
        );
        let buckets = rank_by_predicted_class(&t);
        let ids = |k: usize| buckets[k].iter().map(|r| r.item_id()).collect::<Vec<_>>();
        assert_eq!(ids(0), vec!["a", "b"]);
        assert_eq!(ids(1), vec!["c", "d"]);
        assert!(buckets[2].is_empty());
        assert_eq!(buckets.len(), 3);
    }

    #[test]
    fn stride_examples() {
        assert_eq!(stride_positions(12, 3), vec![4, 8, 12]);
        assert_eq!(stride_positions(3, 3), vec![1, 2, 3]);
        assert_eq!(stride_positions(2, 3), vec![1, 2]);
        assert_eq!(stride_positions(0, 3), Vec::<usize>::new());
    }

    #[test]
    fn annotate_groups_by_clean_label() {
        let t = table(vec![rec("x", 2, 0.8, 6), rec("y", 0, 0.8, 6)], 6);
        let selection: Selection = vec![vec!["y".into()], vec![], vec!["x".into()]];
        let labels = HashMap::from([("x".to_string(), ClassId(5)), ("y".to_string(), ClassId(0))]);
        let set = annotate(&selection, &labels, &t).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.class(ClassId(5))[0].item_id, "x");
        assert_eq!(set.class(ClassId(5))[0].prediction.pred(), ClassId(2));
        assert!(set.class(ClassId(2)).is_empty());
    }

    #[test]
    fn annotate_reports_missing_labels() {
        let t = table(vec![rec("x", 0, 0.8, 2), rec("y", 1, 0.8, 2)], 2);
        let selection: Selection = vec![vec!["x".into()], vec!["y".into()]];
        let labels = HashMap::from([("x".to_string(), ClassId(0))]);
        match annotate(&selection, &labels, &t) {
            Err(Error::AnnotationIncomplete(ids)) => assert_eq!(ids, vec!["y".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn random_sampler_is_seeded() {
        let recs: Vec<_> = (0..40)
            .map(|i| rec(&format!("i{i:02}"), i % 2, 0.5 + i as f64 / 100.0, 2))
            .collect();
        let t = table(recs, 2);
        let b = rank_by_predicted_class(&t);
        let s1 = UniformRandom.select(&b, 3, 11);
        let s2 = UniformRandom.select(&b, 3, 11);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|v| v.len() == 3));
        assert!(registry().get("random").is_ok());
        assert!(registry().get("stratified").is_ok());
    }

    proptest! {
        #[test]
        fn stratified_properties(
            confs in prop::collection::vec((0usize..4, 0.3f64..0.99), 1..80),
            rho in 1usize..8,
        ) {
            let recs: Vec<_> = confs
                .iter()
                .enumerate()
                .map(|(i, (p, c))| rec(&format!("id{i:03}"), *p, *c, 4))
                .collect();
            let t = table(recs, 4);
            let buckets = rank_by_predicted_class(&t);
            prop_assert_eq!(buckets.iter().map(Vec::len).sum::<usize>(), t.len());
            let sel = stratified_sample(&buckets, rho);
            prop_assert_eq!(sel.clone(), stratified_sample(&buckets, rho));
            let mut total = 0;
            for (bucket, picks) in buckets.iter().zip(&sel) {
                total += picks.len();
                prop_assert_eq!(picks.len(), bucket.len().min(rho));
                let confs: Vec<f64> = picks
                    .iter()
                    .map(|id| t.get(id).unwrap().confidence())
                    .collect();
                prop_assert!(confs.windows(2).all(|w| w[0] >= w[1]));
                if let Some(last) = bucket.last() {
                    prop_assert_eq!(picks.last().unwrap(), last.item_id());
                }
                let unique: HashSet<_> = picks.iter().collect();
                prop_assert_eq!(unique.len(), picks.len());
            }
            prop_assert!(total <= rho * 4);
        }
    }
}
