//! Certainty-aware fusion of the zero-shot and task branches.

use serde::{Deserialize, Serialize};

use crate::adjust::{AdjustmentSpec, Branch};
use crate::dataset::RelationSample;
use crate::error::{RelbiasError, Result};
use crate::math::{sigmoid, softmax};

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub conf_zs: f64,
    pub conf_sg: f64,
    pub scale: f64,
    /// Weight on the task branch, `sigmoid((conf_sg - conf_zs) / scale)`.
    pub w_cer: f64,
}

/// Ensemble prediction over background plus the `k` relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub p_background: f64,
    /// Relation probabilities scaled by `1 - p_background`.
    pub p_relations: Vec<f64>,
    pub weights: EnsembleWeights,
}

impl EnsembleOutput {
    /// `[p_background, p_relations...]`.
    pub fn full(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p_relations.len() + 1);
        out.push(self.p_background);
        out.extend_from_slice(&self.p_relations);
        out
    }
}

fn check_probs(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|x| x.is_nan() || *x < 0.0) || (total - 1.0).abs() > NORM_TOLERANCE {
        return Err(RelbiasError::InvalidArgument(format!(
            "{what} is not a probability vector (sum {total})"
        )));
    }
    Ok(())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(RelbiasError::Dimension {
            expected: a.len(),
            found: b.len(),
            context: "zs vs sg probabilities".into(),
        });
    }
    Ok(())
}

/// Confidence of each branch (its maximum class probability) and the
/// resulting task-branch weight.
pub fn certainty_weight(p_zs: &[f64], p_sg: &[f64], scale: f64) -> Result<EnsembleWeights> {
    check_same_len(p_zs, p_sg)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RelbiasError::InvalidArgument(format!(
            "ensemble scale must be positive, got {scale}"
        )));
    }
    let max = |p: &[f64]| p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let conf_zs = max(p_zs);
    let conf_sg = max(p_sg);
    Ok(EnsembleWeights {
        conf_zs,
        conf_sg,
        scale,
        w_cer: sigmoid((conf_sg - conf_zs) / scale),
    })
}

/// `w_cer * p_sg + (1 - w_cer) * p_zs`.
pub fn fuse_relations(p_zs: &[f64], p_sg: &[f64], w: &EnsembleWeights) -> Result<Vec<f64>> {
    check_same_len(p_zs, p_sg)?;
    let w_sg = w.w_cer;
    let w_zs = 1.0 - w_sg;
    Ok(p_sg
        .iter()
        .zip(p_zs)
        .map(|(s, z)| w_sg * s + w_zs * z)
        .collect())
}

/// Attaches the task branch's background probability, taken from its raw
/// (unadjusted) logits, to the fused relation distribution.
pub fn compose_full(
    sample: &RelationSample,
    p_ens_relations: &[f64],
    weights: EnsembleWeights,
) -> Result<EnsembleOutput> {
    if p_ens_relations.len() + 1 != sample.sg_logits.len() {
        return Err(RelbiasError::Dimension {
            expected: sample.sg_logits.len() - 1,
            found: p_ens_relations.len(),
            context: format!("fused relations for {}", sample.sample_id),
        });
    }
    check_probs(p_ens_relations, "fused relation distribution")?;
    let p_background = softmax(&sample.sg_logits)[0];
    let foreground = 1.0 - p_background;
    Ok(EnsembleOutput {
        p_background,
        p_relations: p_ens_relations.iter().map(|p| foreground * p).collect(),
        weights,
    })
}

/// Per-branch adjustment and the fusion scale.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub zs: AdjustmentSpec,
    pub sg: AdjustmentSpec,
    pub scale: f64,
}

/// Full pipeline for one sample: adjust and calibrate both branches, weight,
/// fuse, and attach background.
pub fn ensemble_sample(sample: &RelationSample, cfg: &EnsembleConfig) -> Result<EnsembleOutput> {
    let p_zs = cfg.zs.probs(Branch::Zs.relation_logits(sample))?;
    let p_sg = cfg.sg.probs(Branch::Sg.relation_logits(sample))?;
    ensemble_probs(sample, &p_zs, &p_sg, cfg.scale)
}

/// Fusion from already calibrated branch probabilities.
pub fn ensemble_probs(
    sample: &RelationSample,
    p_zs: &[f64],
    p_sg: &[f64],
    scale: f64,
) -> Result<EnsembleOutput> {
    let weights = certainty_weight(p_zs, p_sg, scale)?;
    let fused = fuse_relations(p_zs, p_sg, &weights)?;
    compose_full(sample, &fused, weights)
}

/// Background from raw task logits combined with the task branch's own
/// calibrated relation distribution; the no-ensemble baseline.
pub fn single_branch(sample: &RelationSample, p_relations: &[f64]) -> Result<EnsembleOutput> {
    let conf = p_relations
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let weights = EnsembleWeights {
        conf_zs: conf,
        conf_sg: conf,
        scale: 1.0,
        w_cer: 0.5,
    };
    compose_full(sample, p_relations, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(sg: Vec<f64>) -> RelationSample {
        RelationSample {
            sample_id: "s".into(),
            image_id: "i".into(),
            subject_class: 0,
            object_class: 0,
            gt_label: 1,
            zs_logits: vec![0.0; sg.len() - 1],
            sg_logits: sg,
        }
    }

    #[test]
    fn equal_confidence_gives_even_weight() {
        let w = certainty_weight(&[0.3, 0.7], &[0.7, 0.3], 1.0).unwrap();
        assert_eq!(w.w_cer, 0.5);
    }

    #[test]
    fn weight_hand_values() {
        let w = certainty_weight(&[0.4, 0.35, 0.25], &[0.9, 0.05, 0.05], 1.0).unwrap();
        assert!((w.w_cer - 0.622_459).abs() < 1e-6);
        let w = certainty_weight(&[0.4, 0.35, 0.25], &[0.9, 0.05, 0.05], 0.1).unwrap();
        assert!((w.w_cer - 0.993_307).abs() < 1e-6);
        assert!(certainty_weight(&[0.5, 0.5], &[1.0], 1.0).is_err());
        assert!(certainty_weight(&[0.5, 0.5], &[0.5, 0.5], 0.0).is_err());
    }

    fn weights(w_cer: f64) -> EnsembleWeights {
        EnsembleWeights {
            conf_zs: 0.0,
            conf_sg: 0.0,
            scale: 1.0,
            w_cer,
        }
    }

    #[test]
    fn fusion_endpoints_and_hand_value() {
        let (p_sg, p_zs) = ([0.7, 0.3], [0.2, 0.8]);
        assert_eq!(fuse_relations(&p_zs, &p_sg, &weights(1.0)).unwrap(), p_sg);
        assert_eq!(fuse_relations(&p_zs, &p_sg, &weights(0.0)).unwrap(), p_zs);
        let f = fuse_relations(&p_zs, &p_sg, &weights(0.622_459)).unwrap();
        assert!((f[0] - 0.511_230).abs() < 1e-6);
        assert!((f[1] - 0.488_770).abs() < 1e-6);
    }

    #[test]
    fn compose_hand_value() {
        let out = compose_full(&sample(vec![1.0, 0.0, 0.0]), &[0.5, 0.5], weights(0.5)).unwrap();
        assert!((out.p_background - 0.576_117).abs() < 1e-6);
        assert!((out.p_relations[0] - 0.211_942).abs() < 1e-6);
        assert!((out.p_relations[1] - 0.211_942).abs() < 1e-6);
        assert!((out.full().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_with_vanishing_background() {
        let out =
            compose_full(&sample(vec![-1e30, 0.3, 2.0]), &[0.25, 0.75], weights(0.5)).unwrap();
        assert_eq!(out.p_background, 0.0);
        assert!((out.p_relations[0] - 0.25).abs() < 1e-9);
        assert!((out.p_relations[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn compose_symmetric_case() {
        let k = 4;
        let out = compose_full(&sample(vec![0.7; k + 1]), &[0.25; 4], weights(0.5)).unwrap();
        let expect = 1.0 / (k as f64 + 1.0);
        assert!((out.p_background - expect).abs() < 1e-12);
        assert!(out.p_relations.iter().all(|p| (p - expect).abs() < 1e-12));
    }

    #[test]
    fn compose_rejects_invalid_distributions() {
        let s = sample(vec![0.0, 0.0, 0.0]);
        assert!(compose_full(&s, &[0.6, 0.6], weights(0.5)).is_err());
        assert!(compose_full(&s, &[1.0], weights(0.5)).is_err());
        assert!(compose_full(&s, &[1.5, -0.5], weights(0.5)).is_err());
    }
}
