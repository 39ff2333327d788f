//! Scene-graph ranking metrics and relation-classification accuracy.
//!
//! Recall@K ranks, per image, one candidate per subject-object pair (its best
//! non-background relation, scored by the full composed probability) or,
//! without the graph constraint, every (pair, relation) candidate. Ties are
//! broken by `sample_id` then relation id, both ascending. Images without
//! ground-truth relations are skipped, and classes that never occur in the
//! ground truth are left out of the class means.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RelationSample, TripletInventory};
use crate::ensemble::EnsembleOutput;
use crate::error::{RelbiasError, Result};
use crate::io::{LogitTable, TableValues};
use crate::math::argmax;

/// Per-sample probabilities over background plus the `k` relations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    k: usize,
    by_id: HashMap<String, Vec<f64>>,
}

impl Predictions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            by_id: HashMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn insert(&mut self, sample_id: &str, full: Vec<f64>) -> Result<()> {
        if full.len() != self.k + 1 {
            return Err(RelbiasError::Dimension {
                expected: self.k + 1,
                found: full.len(),
                context: format!("prediction for {sample_id}"),
            });
        }
        if full.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(RelbiasError::InvalidArgument(format!(
                "prediction for {sample_id} has a negative or non-finite entry"
            )));
        }
        if self.by_id.insert(sample_id.to_string(), full).is_some() {
            return Err(RelbiasError::DuplicateSample(sample_id.to_string()));
        }
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&[f64]> {
        self.by_id.get(sample_id).map(Vec::as_slice)
    }

    /// Reads a background=1 probability table.
    pub fn from_table(table: &LogitTable) -> Result<Self> {
        if !table.background || table.values != TableValues::Probs {
            return Err(RelbiasError::InvalidArgument(
                "predictions must be a background=1 probability table".into(),
            ));
        }
        let mut preds = Self::new(table.k);
        for row in &table.rows {
            preds.insert(&row.sample_id, row.values.clone())?;
        }
        Ok(preds)
    }

    /// Pairs `outputs` with the samples of `ds`, in order.
    pub fn from_outputs(ds: &Dataset, outputs: &[EnsembleOutput]) -> Result<Self> {
        if outputs.len() != ds.len() {
            return Err(RelbiasError::Dimension {
                expected: ds.len(),
                found: outputs.len(),
                context: "ensemble outputs vs samples".into(),
            });
        }
        let mut preds = Self::new(ds.k());
        for (s, out) in ds.samples().iter().zip(outputs) {
            preds.insert(&s.sample_id, out.full())?;
        }
        Ok(preds)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphConstraint {
    /// One predicted relation per pair.
    #[default]
    On,
    /// Every relation of every pair is a candidate.
    Off,
}

/// The pairs of one image and its annotated relations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroundTruth {
    pub image_id: String,
    /// Every pair in the image, sorted.
    pub pairs: Vec<String>,
    /// `(sample_id, relation)` with relation in `1..=k`.
    pub gt_triplets: BTreeSet<(String, usize)>,
}

/// Groups samples by image. Only non-background samples for which `keep`
/// holds count as ground truth; every pair stays a candidate.
pub fn scenes(
    ds: &Dataset,
    mut keep: impl FnMut(&RelationSample) -> bool,
) -> Vec<SceneGroundTruth> {
    let mut by_image: BTreeMap<&str, SceneGroundTruth> = BTreeMap::new();
    for s in ds.samples() {
        let scene = by_image
            .entry(s.image_id.as_str())
            .or_insert_with(|| SceneGroundTruth {
                image_id: s.image_id.clone(),
                pairs: Vec::new(),
                gt_triplets: BTreeSet::new(),
            });
        scene.pairs.push(s.sample_id.clone());
        if !s.is_background() && keep(s) {
            scene.gt_triplets.insert((s.sample_id.clone(), s.gt_label));
        }
    }
    by_image
        .into_values()
        .map(|mut scene| {
            scene.pairs.sort();
            scene
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallFragment {
    pub recall_at: BTreeMap<usize, f64>,
    pub mrecall_at: BTreeMap<usize, f64>,
    /// Indexed by relation `r - 1`; `None` for classes absent from the ground truth.
    pub per_class_recall: BTreeMap<usize, Vec<Option<f64>>>,
    /// Images with at least one ground-truth relation.
    pub images: usize,
}

struct Candidate<'a> {
    score: f64,
    sample_id: &'a str,
    relation: usize,
}

fn ranked_candidates<'a>(
    scene: &'a SceneGroundTruth,
    preds: &Predictions,
    graph: GraphConstraint,
) -> Vec<Candidate<'a>> {
    let mut out = Vec::new();
    for sid in &scene.pairs {
        let Some(full) = preds.get(sid) else { continue };
        match graph {
            GraphConstraint::On => {
                let r = argmax(&full[1..]) + 1;
                out.push(Candidate {
                    score: full[r],
                    sample_id: sid,
                    relation: r,
                });
            }
            GraphConstraint::Off => {
                out.extend((1..full.len()).map(|r| Candidate {
                    score: full[r],
                    sample_id: sid,
                    relation: r,
                }));
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.sample_id.cmp(b.sample_id))
            .then_with(|| a.relation.cmp(&b.relation))
    });
    out
}

fn check_cutoffs(cutoffs: &[usize]) -> Result<()> {
    if cutoffs.is_empty() {
        return Err(RelbiasError::InvalidArgument(
            "no recall cutoffs given".into(),
        ));
    }
    if let Some(c) = cutoffs.iter().find(|c| **c < 1) {
        return Err(RelbiasError::InvalidArgument(format!(
            "recall cutoff {c} < 1"
        )));
    }
    Ok(())
}

/// Recall@K and mean Recall@K over the scenes.
///
/// Mean recall averages, for each relation class, the per-image recall of
/// that class over the images where it occurs, then averages over classes.
pub fn recall_at_k(
    preds: &Predictions,
    scenes: &[SceneGroundTruth],
    cutoffs: &[usize],
    graph: GraphConstraint,
) -> Result<RecallFragment> {
    check_cutoffs(cutoffs)?;
    let k = preds.k();
    let mut recall_sum: BTreeMap<usize, f64> = cutoffs.iter().map(|&c| (c, 0.0)).collect();
    let mut class_sum: BTreeMap<usize, Vec<f64>> =
        cutoffs.iter().map(|&c| (c, vec![0.0; k])).collect();
    let mut class_images = vec![0usize; k];
    let mut images = 0usize;

    for scene in scenes.iter().filter(|s| !s.gt_triplets.is_empty()) {
        for (sid, _) in &scene.gt_triplets {
            if preds.get(sid).is_none() {
                return Err(RelbiasError::MissingPrediction(sid.clone()));
            }
        }
        let mut gt_per_class = vec![0usize; k];
        for (_, r) in &scene.gt_triplets {
            gt_per_class[r - 1] += 1;
        }
        for (c, n) in gt_per_class.iter().enumerate() {
            if *n > 0 {
                class_images[c] += 1;
            }
        }
        images += 1;

        let ranked = ranked_candidates(scene, preds, graph);
        for &cutoff in cutoffs {
            let mut hits_per_class = vec![0usize; k];
            let mut hits = 0usize;
            for cand in ranked.iter().take(cutoff) {
                if scene
                    .gt_triplets
                    .contains(&(cand.sample_id.to_string(), cand.relation))
                {
                    hits += 1;
                    hits_per_class[cand.relation - 1] += 1;
                }
            }
            *recall_sum.get_mut(&cutoff).unwrap() += hits as f64 / scene.gt_triplets.len() as f64;
            let sums = class_sum.get_mut(&cutoff).unwrap();
            for c in 0..k {
                if gt_per_class[c] > 0 {
                    sums[c] += hits_per_class[c] as f64 / gt_per_class[c] as f64;
                }
            }
        }
    }
    if images == 0 {
        return Err(RelbiasError::EmptyDataset(
            "no image has a ground-truth relation",
        ));
    }

    let mut frag = RecallFragment {
        recall_at: BTreeMap::new(),
        mrecall_at: BTreeMap::new(),
        per_class_recall: BTreeMap::new(),
        images,
    };
    for &cutoff in cutoffs {
        frag.recall_at
            .insert(cutoff, recall_sum[&cutoff] / images as f64);
        let per_class: Vec<Option<f64>> = class_sum[&cutoff]
            .iter()
            .zip(&class_images)
            .map(|(s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        frag.mrecall_at.insert(cutoff, mean_present(&per_class));
        frag.per_class_recall.insert(cutoff, per_class);
    }
    Ok(frag)
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyFragment {
    pub acc: f64,
    pub macc: f64,
    pub per_class: Vec<Option<f64>>,
    pub count: usize,
}

/// Top-1 relation accuracy on non-background samples for which `keep`
/// holds, predicting the best relation with background excluded.
pub fn classification_acc(
    preds: &Predictions,
    ds: &Dataset,
    mut keep: impl FnMut(&RelationSample) -> bool,
) -> Result<AccuracyFragment> {
    let k = ds.k();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for s in ds
        .samples()
        .iter()
        .filter(|s| !s.is_background() && keep(s))
    {
        let full = preds
            .get(&s.sample_id)
            .ok_or_else(|| RelbiasError::MissingPrediction(s.sample_id.clone()))?;
        let predicted = argmax(&full[1..]) + 1;
        total[s.gt_label - 1] += 1;
        if predicted == s.gt_label {
            correct[s.gt_label - 1] += 1;
        }
    }
    let count: usize = total.iter().sum();
    if count == 0 {
        return Err(RelbiasError::EmptyDataset(
            "accuracy needs at least one non-background sample",
        ));
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    Ok(AccuracyFragment {
        acc: correct.iter().sum::<usize>() as f64 / count as f64,
        macc: mean_present(&per_class),
        per_class,
        count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Ground-truth (non-background) samples covered.
    pub count: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub mrecall_at: BTreeMap<usize, f64>,
    pub per_class_recall: BTreeMap<usize, Vec<Option<f64>>>,
    pub acc: f64,
    pub macc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<Split, SplitEntry>,
}

/// A split's report, `None` when the split has no ground-truth samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    pub report: Option<MetricReport>,
}

impl MetricReport {
    /// Every metric lies in `[0, 1]`, recursively.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        let scalars = self
            .recall_at
            .values()
            .chain(self.mrecall_at.values())
            .chain([&self.acc, &self.macc])
            .copied();
        let per_class = self
            .per_class_recall
            .values()
            .flatten()
            .chain(&self.per_class_acc)
            .flatten()
            .copied();
        if let Some(bad) = scalars.chain(per_class).find(|x| !in_unit(*x)) {
            return Err(RelbiasError::InvalidArgument(format!(
                "metric value {bad} outside [0, 1]"
            )));
        }
        for entry in self.splits.values() {
            if let Some(r) = &entry.report {
                r.validate()?;
            }
        }
        Ok(())
    }
}

/// Report over ground-truth samples for which `keep` holds, or `None` when
/// there are none.
pub fn evaluate_subset(
    preds: &Predictions,
    ds: &Dataset,
    mut keep: impl FnMut(&RelationSample) -> bool,
    cutoffs: &[usize],
    graph: GraphConstraint,
) -> Result<Option<MetricReport>> {
    check_cutoffs(cutoffs)?;
    let scene_list = scenes(ds, &mut keep);
    if scene_list.iter().all(|s| s.gt_triplets.is_empty()) {
        return Ok(None);
    }
    let recall = recall_at_k(preds, &scene_list, cutoffs, graph)?;
    let acc = classification_acc(preds, ds, &mut keep)?;
    Ok(Some(MetricReport {
        count: acc.count,
        recall_at: recall.recall_at,
        mrecall_at: recall.mrecall_at,
        per_class_recall: recall.per_class_recall,
        acc: acc.acc,
        macc: acc.macc,
        per_class_acc: acc.per_class,
        splits: BTreeMap::new(),
    }))
}

/// Report over every non-background sample.
pub fn evaluate(
    preds: &Predictions,
    ds: &Dataset,
    cutoffs: &[usize],
    graph: GraphConstraint,
) -> Result<MetricReport> {
    evaluate_subset(preds, ds, |_| true, cutoffs, graph)?.ok_or(RelbiasError::EmptyDataset(
        "no non-background samples to evaluate",
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Seen,
    Unseen,
    Frequent,
    Medium,
    Rare,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::All,
        Split::Seen,
        Split::Unseen,
        Split::Frequent,
        Split::Medium,
        Split::Rare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Frequent => "frequent",
            Split::Medium => "medium",
            Split::Rare => "rare",
        }
    }

    fn bucket(self) -> Option<Bucket> {
        match self {
            Split::Frequent => Some(Bucket::Frequent),
            Split::Medium => Some(Bucket::Medium),
            Split::Rare => Some(Bucket::Rare),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = RelbiasError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.as_str() == s)
            .ok_or_else(|| RelbiasError::InvalidArgument(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Frequent,
    Medium,
    Rare,
}

/// How relation classes are split into frequent/medium/rare by training count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketSpec {
    #[default]
    /// Rank classes by count: the top 30% are frequent, the bottom 30% rare
    /// (15/20/15 at k = 50). Ties rank the lower class id first.
    Auto,
    /// Count `>= frequent_min` is frequent, `<= rare_max` is rare.
    Thresholds { frequent_min: f64, rare_max: f64 },
}

/// Bucket of each relation class (index `r - 1`).
pub fn frequency_buckets(class_counts: &[f64], spec: BucketSpec) -> Vec<Bucket> {
    let k = class_counts.len();
    match spec {
        BucketSpec::Auto => {
            let edge = ((k as f64 * 0.3).round() as usize).min(k / 2);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                class_counts[b]
                    .partial_cmp(&class_counts[a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut buckets = vec![Bucket::Medium; k];
            for (rank, &c) in order.iter().enumerate() {
                if rank < edge {
                    buckets[c] = Bucket::Frequent;
                } else if rank >= k - edge {
                    buckets[c] = Bucket::Rare;
                }
            }
            buckets
        }
        BucketSpec::Thresholds {
            frequent_min,
            rare_max,
        } => class_counts
            .iter()
            .map(|&n| {
                if n >= frequent_min {
                    Bucket::Frequent
                } else if n <= rare_max {
                    Bucket::Rare
                } else {
                    Bucket::Medium
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SplitOptions<'a> {
    pub cutoffs: Vec<usize>,
    pub graph: GraphConstraint,
    pub splits: Vec<Split>,
    /// Training triplets; defaults to the dataset's own inventory.
    pub inventory: Option<&'a TripletInventory>,
    pub buckets: BucketSpec,
    /// Training count (or any proportional weight) per relation class;
    /// defaults to the dataset's label counts.
    pub class_counts: Option<Vec<f64>>,
}

impl SplitOptions<'_> {
    pub fn new(cutoffs: Vec<usize>) -> Self {
        Self {
            cutoffs,
            graph: GraphConstraint::On,
            splits: vec![Split::All],
            inventory: None,
            buckets: BucketSpec::Auto,
            class_counts: None,
        }
    }
}

/// Overall report with nested reports for the requested sample splits
/// (seen/unseen training triplets) and class splits (frequency buckets).
pub fn split_report(
    preds: &Predictions,
    ds: &Dataset,
    opts: &SplitOptions<'_>,
) -> Result<MetricReport> {
    let mut report = evaluate(preds, ds, &opts.cutoffs, opts.graph)?;
    let needs_inventory = opts
        .splits
        .iter()
        .any(|s| matches!(s, Split::Seen | Split::Unseen));
    let inventory = opts.inventory.or(ds.inventory());
    if needs_inventory && inventory.is_none() {
        return Err(RelbiasError::InvalidArgument(
            "seen/unseen splits need a training triplet inventory".into(),
        ));
    }
    let counts = match &opts.class_counts {
        Some(c) => {
            if c.len() != ds.k() {
                return Err(RelbiasError::Dimension {
                    expected: ds.k(),
                    found: c.len(),
                    context: "class counts for frequency buckets".into(),
                });
            }
            c.clone()
        }
        None => ds.label_counts()[1..].iter().map(|&n| n as f64).collect(),
    };
    let buckets = frequency_buckets(&counts, opts.buckets);

    let mut splits = BTreeMap::new();
    for &split in &opts.splits {
        let keep = |s: &RelationSample| -> bool {
            match split {
                Split::All => true,
                Split::Seen => inventory.is_some_and(|inv| inv.contains(&s.triplet())),
                Split::Unseen => !inventory.is_some_and(|inv| inv.contains(&s.triplet())),
                _ => Some(buckets[s.gt_label - 1]) == split.bucket(),
            }
        };
        let entry = match evaluate_subset(preds, ds, keep, &opts.cutoffs, opts.graph)? {
            Some(r) => SplitEntry {
                count: r.count,
                report: Some(r),
            },
            None => SplitEntry {
                count: 0,
                report: None,
            },
        };
        splits.insert(split, entry);
    }
    report.splits = splits;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RelationLabelSpace;

    fn preds_from(k: usize, rows: &[(&str, usize, f64)]) -> Predictions {
        // Puts `score` on the given relation and spreads the rest evenly.
        let mut p = Predictions::new(k);
        for &(id, r, score) in rows {
            let rest = (1.0 - score) / k as f64;
            let mut full = vec![rest; k + 1];
            full[r] = score;
            p.insert(id, full).unwrap();
        }
        p
    }

    #[test]
    fn recall_hand_enumeration() {
        let scene = SceneGroundTruth {
            image_id: "img".into(),
            pairs: vec!["A".into(), "B".into(), "C".into()],
            gt_triplets: [("A".to_string(), 1), ("B".to_string(), 2)].into(),
        };
        let preds = preds_from(3, &[("A", 1, 0.9), ("B", 3, 0.8), ("C", 2, 0.7)]);
        let r = recall_at_k(&preds, &[scene], &[1, 2, 3], GraphConstraint::On).unwrap();
        assert_eq!(r.recall_at[&1], 0.5);
        assert_eq!(r.recall_at[&2], 0.5);
        assert_eq!(r.recall_at[&3], 0.5);
    }

    #[test]
    fn missing_prediction_and_bad_cutoff_are_errors() {
        let scene = SceneGroundTruth {
            image_id: "img".into(),
            pairs: vec!["A".into()],
            gt_triplets: [("A".to_string(), 1)].into(),
        };
        let empty = Predictions::new(2);
        assert!(matches!(
            recall_at_k(
                &empty,
                std::slice::from_ref(&scene),
                &[1],
                GraphConstraint::On
            ),
            Err(RelbiasError::MissingPrediction(_))
        ));
        let preds = preds_from(2, &[("A", 1, 0.9)]);
        assert!(recall_at_k(&preds, &[scene], &[0], GraphConstraint::On).is_err());
    }

    fn ds_with(labels: &[(&str, &str, usize)], k: usize) -> Dataset {
        let samples = labels
            .iter()
            .map(|&(id, img, y)| RelationSample {
                sample_id: id.into(),
                image_id: img.into(),
                subject_class: 0,
                object_class: 1,
                gt_label: y,
                zs_logits: vec![0.0; k],
                sg_logits: vec![0.0; k + 1],
            })
            .collect();
        Dataset::new(RelationLabelSpace::new(k, None).unwrap(), samples, None).unwrap()
    }

    #[test]
    fn accuracy_hand_count() {
        let ds = ds_with(
            &[("a", "i", 1), ("b", "i", 2), ("c", "i", 2), ("d", "i", 0)],
            2,
        );
        let preds = preds_from(
            2,
            &[("a", 1, 0.9), ("b", 1, 0.9), ("c", 2, 0.9), ("d", 1, 0.9)],
        );
        let acc = classification_acc(&preds, &ds, |_| true).unwrap();
        assert!((acc.acc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc.per_class, vec![Some(1.0), Some(0.5)]);
        assert_eq!(acc.macc, 0.75);
    }

    #[test]
    fn accuracy_edge_cases() {
        let ds = ds_with(&[("a", "i", 1), ("b", "i", 1)], 3);
        let wrong = preds_from(3, &[("a", 2, 0.9), ("b", 3, 0.9)]);
        let acc = classification_acc(&wrong, &ds, |_| true).unwrap();
        assert_eq!((acc.acc, acc.macc), (0.0, 0.0));
        assert_eq!(acc.per_class, vec![Some(0.0), None, None]);
        let bg = ds_with(&[("a", "i", 0)], 2);
        assert!(classification_acc(&preds_from(2, &[("a", 1, 0.9)]), &bg, |_| true).is_err());
    }

    #[test]
    fn mean_recall_weighs_classes_equally() {
        // Three class-1 relations recalled, the single class-2 relation missed.
        let ds = ds_with(
            &[("a", "i", 1), ("b", "i", 1), ("c", "i", 1), ("d", "i", 2)],
            2,
        );
        let preds = preds_from(
            2,
            &[("a", 1, 0.9), ("b", 1, 0.8), ("c", 1, 0.7), ("d", 1, 0.6)],
        );
        let r = recall_at_k(&preds, &scenes(&ds, |_| true), &[10], GraphConstraint::On).unwrap();
        assert_eq!(r.recall_at[&10], 0.75);
        assert_eq!(r.mrecall_at[&10], 0.5);
        assert_eq!(r.per_class_recall[&10], vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn graph_constraint_off_ranks_every_relation() {
        let ds = ds_with(&[("a", "i", 2)], 2);
        // Best relation for the pair is 1; relation 2 is second.
        let mut preds = Predictions::new(2);
        preds.insert("a", vec![0.1, 0.5, 0.4]).unwrap();
        let s = scenes(&ds, |_| true);
        let on = recall_at_k(&preds, &s, &[2], GraphConstraint::On).unwrap();
        let off = recall_at_k(&preds, &s, &[2], GraphConstraint::Off).unwrap();
        assert_eq!(on.recall_at[&2], 0.0);
        assert_eq!(off.recall_at[&2], 1.0);
    }

    #[test]
    fn auto_buckets_split_fifty_classes_fifteen_twenty_fifteen() {
        let counts: Vec<f64> = (0..50).map(|i| (100 - i) as f64).collect();
        let b = frequency_buckets(&counts, BucketSpec::Auto);
        let n = |x: Bucket| b.iter().filter(|y| **y == x).count();
        assert_eq!(
            (n(Bucket::Frequent), n(Bucket::Medium), n(Bucket::Rare)),
            (15, 20, 15)
        );
        assert_eq!(b[0], Bucket::Frequent);
        assert_eq!(b[49], Bucket::Rare);

        let t = frequency_buckets(
            &[10.0, 5.0, 1.0],
            BucketSpec::Thresholds {
                frequent_min: 8.0,
                rare_max: 2.0,
            },
        );
        assert_eq!(t, vec![Bucket::Frequent, Bucket::Medium, Bucket::Rare]);
    }

    #[test]
    fn split_names_parse() {
        assert_eq!("unseen".parse::<Split>().unwrap(), Split::Unseen);
        assert!("nope".parse::<Split>().is_err());
    }
}
