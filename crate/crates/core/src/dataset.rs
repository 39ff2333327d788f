//! Domain types: label space, samples, priors and datasets.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{RelbiasError, Result};

/// Label id of the background ("no relation") class.
pub const BACKGROUND: usize = 0;

/// Lower bound applied to every prior entry before any logarithm is taken.
pub const PROB_FLOOR: f64 = 1e-8;

/// Absolute tolerance on the sum of a prior.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Relation labels `{0} ∪ {1..=k}` where 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationLabelSpace {
    k: usize,
    class_names: Option<Vec<String>>,
}

impl RelationLabelSpace {
    pub fn new(k: usize, class_names: Option<Vec<String>>) -> Result<Self> {
        if k < 2 {
            return Err(RelbiasError::LabelSpace(format!(
                "need at least 2 relation classes, got {k}"
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != k {
                return Err(RelbiasError::LabelSpace(format!(
                    "{} class names for k={k}",
                    names.len()
                )));
            }
            let mut seen = HashSet::new();
            for name in names {
                if name.is_empty() {
                    return Err(RelbiasError::LabelSpace("empty class name".into()));
                }
                if !seen.insert(name.as_str()) {
                    return Err(RelbiasError::LabelSpace(format!(
                        "duplicate class name {name:?}"
                    )));
                }
            }
        }
        Ok(Self { k, class_names })
    }

    /// Number of non-background relation classes.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Display name of relation `r` in `1..=k`.
    pub fn name(&self, r: usize) -> String {
        match &self.class_names {
            Some(names) => names[r - 1].clone(),
            None => format!("rel{r}"),
        }
    }
}

/// A (subject class, relation, object class) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub subject: u32,
    pub relation: usize,
    pub object: u32,
}

pub type TripletInventory = BTreeSet<Triplet>;

/// One subject-object pair with both branches' logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSample {
    pub sample_id: String,
    pub image_id: String,
    pub subject_class: u32,
    pub object_class: u32,
    /// 0 is background, `1..=k` are relations.
    pub gt_label: usize,
    /// Zero-shot branch logits over the `k` relations.
    pub zs_logits: Vec<f64>,
    /// Task branch logits, index 0 is background.
    pub sg_logits: Vec<f64>,
}

impl RelationSample {
    /// Task-branch logits without the background entry.
    pub fn sg_relation_logits(&self) -> &[f64] {
        &self.sg_logits[1..]
    }

    pub fn triplet(&self) -> Triplet {
        Triplet {
            subject: self.subject_class,
            relation: self.gt_label,
            object: self.object_class,
        }
    }

    pub fn is_background(&self) -> bool {
        self.gt_label == BACKGROUND
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(RelbiasError::Sample {
                sample_id: String::new(),
                message: "empty sample_id".into(),
            });
        }
        if self.image_id.is_empty() {
            return Err(RelbiasError::Sample {
                sample_id: self.sample_id.clone(),
                message: "missing image_id".into(),
            });
        }
        if self.gt_label > k {
            return Err(RelbiasError::Sample {
                sample_id: self.sample_id.clone(),
                message: format!("gt_label {} outside 0..={k}", self.gt_label),
            });
        }
        if self.zs_logits.len() != k {
            return Err(RelbiasError::Dimension {
                expected: k,
                found: self.zs_logits.len(),
                context: format!("zs logits of {}", self.sample_id),
            });
        }
        if self.sg_logits.len() != k + 1 {
            return Err(RelbiasError::Dimension {
                expected: k + 1,
                found: self.sg_logits.len(),
                context: format!("sg logits of {}", self.sample_id),
            });
        }
        if self
            .zs_logits
            .iter()
            .chain(&self.sg_logits)
            .any(|x| !x.is_finite())
        {
            return Err(RelbiasError::NonFinite {
                sample_id: self.sample_id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    Counted,
    Estimated,
    Uniform,
    File,
}

impl PriorSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorSource::Counted => "counted",
            PriorSource::Estimated => "estimated",
            PriorSource::Uniform => "uniform",
            PriorSource::File => "file",
        }
    }
}

impl fmt::Display for PriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A point on the probability simplex over the `k` relation classes.
///
/// Construction validates the simplex constraints and then applies the
/// clamping rule: entries are raised to at least [`PROB_FLOOR`] and the rest
/// rescaled so the total is one. Every stored entry is therefore strictly
/// positive and safe to take the logarithm of.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDistribution {
    probs: Vec<f64>,
    source: PriorSource,
}

impl PriorDistribution {
    pub fn new(probs: Vec<f64>, source: PriorSource) -> Result<Self> {
        if probs.len() < 2 {
            return Err(RelbiasError::Prior(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(RelbiasError::Prior(format!(
                "entry {bad} is not a probability"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(RelbiasError::Prior(format!(
                "entries sum to {total}, not 1"
            )));
        }
        Ok(Self {
            probs: clamp_to_floor(probs),
            source,
        })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(RelbiasError::Prior(format!(
                "uniform prior needs k >= 2, got {k}"
            )));
        }
        Ok(Self {
            probs: vec![1.0 / k as f64; k],
            source: PriorSource::Uniform,
        })
    }

    /// Normalizes non-negative weights (counts, unnormalized densities).
    pub fn from_weights(weights: &[f64], source: PriorSource) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(RelbiasError::Prior(
                "weights must be non-negative with a positive sum".into(),
            ));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Self::new(probs, source)
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn source(&self) -> PriorSource {
        self.source
    }

    pub fn with_source(mut self, source: PriorSource) -> Self {
        self.source = source;
        self
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn ensure_k(&self, k: usize, what: &str) -> Result<()> {
        if self.k() != k {
            return Err(RelbiasError::Dimension {
                expected: k,
                found: self.k(),
                context: what.to_string(),
            });
        }
        Ok(())
    }
}

/// Raises entries below the floor to exactly the floor and rescales the
/// remaining mass so the total stays one. Rescaling can push another entry
/// under the floor, so this repeats until stable (at most `k` rounds).
fn clamp_to_floor(mut probs: Vec<f64>) -> Vec<f64> {
    let k = probs.len();
    let mut pinned = vec![false; k];
    loop {
        let mut changed = false;
        for (p, pin) in probs.iter_mut().zip(pinned.iter_mut()) {
            if !*pin && *p < PROB_FLOOR {
                *p = PROB_FLOOR;
                *pin = true;
                changed = true;
            }
        }
        let pinned_mass = PROB_FLOOR * pinned.iter().filter(|p| **p).count() as f64;
        let free_mass: f64 = probs
            .iter()
            .zip(&pinned)
            .filter(|(_, pin)| !**pin)
            .map(|(p, _)| *p)
            .sum();
        let scale = (1.0 - pinned_mass) / free_mass;
        if scale != 1.0 {
            for (p, pin) in probs.iter_mut().zip(&pinned) {
                if !*pin {
                    *p *= scale;
                }
            }
        }
        if !changed && probs.iter().all(|p| *p >= PROB_FLOOR) {
            return probs;
        }
    }
}

/// Validated collection of samples over one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    space: RelationLabelSpace,
    samples: Vec<RelationSample>,
    inventory: Option<TripletInventory>,
}

impl Dataset {
    /// Validates every sample. Sample order is kept as given.
    pub fn new(
        space: RelationLabelSpace,
        samples: Vec<RelationSample>,
        inventory: Option<TripletInventory>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate(space.k())?;
            if !ids.insert(s.sample_id.as_str()) {
                return Err(RelbiasError::DuplicateSample(s.sample_id.clone()));
            }
        }
        if let Some(inv) = &inventory {
            if let Some(t) = inv
                .iter()
                .find(|t| t.relation == 0 || t.relation > space.k())
            {
                return Err(RelbiasError::LabelSpace(format!(
                    "training triplet relation {} outside 1..={}",
                    t.relation,
                    space.k()
                )));
            }
        }
        Ok(Self {
            space,
            samples,
            inventory,
        })
    }

    /// Like [`Dataset::new`] but sorts samples into canonical (ascending
    /// `sample_id`) order.
    pub fn canonical(
        space: RelationLabelSpace,
        mut samples: Vec<RelationSample>,
        inventory: Option<TripletInventory>,
    ) -> Result<Self> {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Self::new(space, samples, inventory)
    }

    pub fn space(&self) -> &RelationLabelSpace {
        &self.space
    }

    pub fn k(&self) -> usize {
        self.space.k()
    }

    pub fn samples(&self) -> &[RelationSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inventory(&self) -> Option<&TripletInventory> {
        self.inventory.as_ref()
    }

    pub fn with_inventory(mut self, inventory: Option<TripletInventory>) -> Self {
        self.inventory = inventory;
        self
    }

    /// Keeps samples with a non-background label, in order.
    pub fn filter_nonbackground(&self) -> Dataset {
        Dataset {
            space: self.space.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| !s.is_background())
                .cloned()
                .collect(),
            inventory: self.inventory.clone(),
        }
    }

    /// Keeps the samples for which `keep` returns true, in order.
    pub fn retain(&self, mut keep: impl FnMut(&RelationSample) -> bool) -> Dataset {
        Dataset {
            space: self.space.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            inventory: self.inventory.clone(),
        }
    }

    /// Count of each label `0..=k`.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k() + 1];
        for s in &self.samples {
            counts[s.gt_label] += 1;
        }
        counts
    }
}
