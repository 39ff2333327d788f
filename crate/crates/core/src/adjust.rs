//! Post-hoc logit adjustment and temperature-calibrated probabilities.
//!
//! Adjusting from a training prior to a target prior adds
//! `log target(r) - log train(r)` to each class logit. The constant term
//! that appears when the adjustment is derived from Bayes' rule is dropped
//! since softmax removes it. The temperature is applied after adjustment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PriorDistribution};
use crate::error::{RelbiasError, Result};
use crate::math::{log_sum_exp, softmax_in_place};

/// Which branch's relation logits an operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Zero-shot branch, `k` relation logits.
    Zs,
    /// Task branch; its background logit is skipped.
    Sg,
}

impl Branch {
    pub fn relation_logits(self, sample: &crate::RelationSample) -> &[f64] {
        match self {
            Branch::Zs => &sample.zs_logits,
            Branch::Sg => sample.sg_relation_logits(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Zs => "zs",
            Branch::Sg => "sg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentSpec {
    train_prior: PriorDistribution,
    target_prior: PriorDistribution,
    tau: f64,
    /// `log target - log train`, per class.
    offset: Vec<f64>,
}

impl AdjustmentSpec {
    pub fn new(
        train_prior: PriorDistribution,
        target_prior: PriorDistribution,
        tau: f64,
    ) -> Result<Self> {
        target_prior.ensure_k(train_prior.k(), "target prior vs training prior")?;
        check_tau(tau)?;
        let offset = train_prior
            .probs()
            .iter()
            .zip(target_prior.probs())
            .map(|(tr, ta)| ta.ln() - tr.ln())
            .collect();
        Ok(Self {
            train_prior,
            target_prior,
            tau,
            offset,
        })
    }

    pub fn k(&self) -> usize {
        self.train_prior.k()
    }

    pub fn train_prior(&self) -> &PriorDistribution {
        &self.train_prior
    }

    pub fn target_prior(&self) -> &PriorDistribution {
        &self.target_prior
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        self.tau = tau;
        Ok(self)
    }

    /// Adjusted logits followed by the calibrated softmax.
    pub fn probs(&self, logits: &[f64]) -> Result<Vec<f64>> {
        calibrated_probs(&adjust_logits(logits, self)?, self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(RelbiasError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `o(r) - log train(r) + log target(r)` for every class.
pub fn adjust_logits(logits: &[f64], spec: &AdjustmentSpec) -> Result<Vec<f64>> {
    if logits.len() != spec.k() {
        return Err(RelbiasError::Dimension {
            expected: spec.k(),
            found: logits.len(),
            context: "logits vs adjustment priors".into(),
        });
    }
    Ok(logits
        .iter()
        .zip(&spec.offset)
        .map(|(o, d)| o + d)
        .collect())
}

/// `softmax(adjusted / tau)`.
pub fn calibrated_probs(adjusted: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let mut out: Vec<f64> = adjusted.iter().map(|a| a / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Log-spaced temperature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for TauGrid {
    fn default() -> Self {
        Self {
            min: 0.1,
            max: 10.0,
            points: 50,
        }
    }
}

impl TauGrid {
    /// Grid values in ascending order.
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0 && self.max >= self.min && self.points >= 1) {
            return Err(RelbiasError::InvalidArgument(format!(
                "invalid temperature grid {self:?}"
            )));
        }
        if self.points == 1 {
            return Ok(vec![self.min]);
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        let step = (hi - lo) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| {
                if i + 1 == self.points {
                    self.max
                } else {
                    (lo + step * i as f64).exp()
                }
            })
            .collect())
    }
}

/// Mean negative log-likelihood of `softmax(adjusted / tau)` at the labels.
fn mean_nll(adjusted: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let mut scaled = Vec::new();
    let terms: Vec<f64> = adjusted
        .iter()
        .zip(labels)
        .map(|(a, &y)| {
            scaled.clear();
            scaled.extend(a.iter().map(|x| x / tau));
            log_sum_exp(&scaled) - scaled[y]
        })
        .collect();
    crate::math::pairwise_sum(&terms) / labels.len() as f64
}

/// Picks the grid temperature with the lowest held-out NLL on the
/// non-background samples of `ds`. Ties go to the smaller temperature.
pub fn fit_tau(ds: &Dataset, branch: Branch, spec: &AdjustmentSpec, grid: &TauGrid) -> Result<f64> {
    let taus = grid.values()?;
    let mut adjusted = Vec::new();
    let mut labels = Vec::new();
    for s in ds.samples().iter().filter(|s| !s.is_background()) {
        adjusted.push(adjust_logits(branch.relation_logits(s), spec)?);
        labels.push(s.gt_label - 1);
    }
    if labels.is_empty() {
        return Err(RelbiasError::EmptyDataset(
            "temperature fitting needs at least one non-background sample",
        ));
    }
    let scores: Vec<f64> = taus
        .par_iter()
        .map(|&tau| mean_nll(&adjusted, &labels, tau))
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(taus[best])
}
