//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

/// Plain softmax with max-subtraction, written out separately from the crate.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn first_max(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Posterior of a unit-covariance Gaussian mixture, from squared distances.
pub fn gaussian_posterior(x: &[f64], means: &[Vec<f64>], prior: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = means
        .iter()
        .zip(prior)
        .map(|(m, p)| {
            let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            p.ln() - 0.5 * d2
        })
        .collect();
    softmax(&scores)
}

/// Label frequencies over `1..=k`, ignoring background.
pub fn frequencies(labels: impl IntoIterator<Item = usize>, k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    let mut n = 0usize;
    for y in labels {
        if y > 0 {
            counts[y - 1] += 1;
            n += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

/// One evaluation pair for the exhaustive recall reference.
#[derive(Debug, Clone)]
pub struct OraclePair {
    pub sample_id: String,
    pub image_id: String,
    pub gt_label: usize,
    /// Background first, then relations.
    pub full: Vec<f64>,
}

/// Recall@K and mRecall@K without sorting: a candidate is in the top K of
/// its image when fewer than K candidates beat it, where a candidate beats
/// another by a higher score, or an equal score with a smaller
/// `(sample_id, relation)`.
pub fn exhaustive_recall(
    pairs: &[OraclePair],
    k: usize,
    cutoffs: &[usize],
    graph: bool,
) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut images: BTreeMap<&str, Vec<&OraclePair>> = BTreeMap::new();
    for p in pairs {
        images.entry(p.image_id.as_str()).or_default().push(p);
    }
    let mut recall = BTreeMap::new();
    let mut mrecall = BTreeMap::new();
    for &cutoff in cutoffs {
        let mut recall_sum = 0.0;
        let mut counted = 0usize;
        let mut class_sum = vec![0.0; k];
        let mut class_images = vec![0usize; k];
        for members in images.values() {
            let gt: Vec<(&str, usize)> = members
                .iter()
                .filter(|p| p.gt_label > 0)
                .map(|p| (p.sample_id.as_str(), p.gt_label))
                .collect();
            if gt.is_empty() {
                continue;
            }
            counted += 1;
            let mut candidates: Vec<(f64, &str, usize)> = Vec::new();
            for p in members {
                if graph {
                    let r = first_max(&p.full[1..]) + 1;
                    candidates.push((p.full[r], &p.sample_id, r));
                } else {
                    for r in 1..=k {
                        candidates.push((p.full[r], &p.sample_id, r));
                    }
                }
            }
            let beats = |a: &(f64, &str, usize), b: &(f64, &str, usize)| {
                a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
            };
            let in_top =
                |c: &(f64, &str, usize)| candidates.iter().filter(|o| beats(o, c)).count() < cutoff;
            let hit = |sid: &str, r: usize| {
                candidates
                    .iter()
                    .any(|c| c.1 == sid && c.2 == r && in_top(c))
            };
            let hits = gt.iter().filter(|(s, r)| hit(s, *r)).count();
            recall_sum += hits as f64 / gt.len() as f64;
            let mut per_class: HashMap<usize, (usize, usize)> = HashMap::new();
            for (s, r) in &gt {
                let e = per_class.entry(*r).or_default();
                e.1 += 1;
                if hit(s, *r) {
                    e.0 += 1;
                }
            }
            for (r, (h, n)) in per_class {
                class_sum[r - 1] += h as f64 / n as f64;
                class_images[r - 1] += 1;
            }
        }
        recall.insert(cutoff, recall_sum / counted as f64);
        let present: Vec<f64> = class_sum
            .iter()
            .zip(&class_images)
            .filter(|(_, n)| **n > 0)
            .map(|(s, n)| s / *n as f64)
            .collect();
        mrecall.insert(cutoff, present.iter().sum::<f64>() / present.len() as f64);
    }
    (recall, mrecall)
}
