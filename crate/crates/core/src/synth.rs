//! Synthetic label-shift worlds with exact Bayes logits.
//!
//! Features are drawn from unit-covariance Gaussians around per-class means,
//! so the log joint of class `r` at `x` is
//! `log prior(r) + x·mean_r - |mean_r|^2 / 2` up to a term shared by all
//! classes. The zero-shot branch scores with the pretraining prior, the
//! task branch with the task prior plus a background logit.
//!
//! All randomness comes from PCG-64 (XSL-RR 128/64 with multiplier
//! `0x2360ed051fc65da44385df649fccf645`), seeded through
//! `SeedableRng::seed_from_u64`, whose PCG-32 expansion of the `u64` fills
//! both the 128-bit state and the stream increment. Class means use the model seed; each regime
//! uses the model seed plus a fixed per-regime offset. Per sample the draws
//! are, in order: background coin, class, `dim` feature noises,
//! underrepresented coin, subject id, object id, and `k` task-logit noises
//! when underrepresented.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal, StandardUniform};
use rand_pcg::rand_core::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Dataset, PriorDistribution, PriorSource, RelationLabelSpace, RelationSample, Triplet,
};
use crate::error::{RelbiasError, Result};
use crate::io::read_prior;
use crate::math::{log_sum_exp, softmax};

/// Share of samples whose ground truth is background.
pub const BACKGROUND_RATE: f64 = 0.2;
/// Extra task-branch background logit on background samples.
pub const BACKGROUND_BOOST: f64 = 2.0;
/// Object classes `0..4` are ordinary, `4..8` mark underrepresented pairs.
pub const OBJECT_CLASSES: u32 = 4;
/// Pairs per image.
pub const PAIRS_PER_IMAGE: usize = 8;

const MEANS_OFFSET: u64 = 0;
const REGIME_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Pretrain,
    Sgg,
    Target,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Pretrain => "pretrain",
            Regime::Sgg => "sgg",
            Regime::Target => "target",
        }
    }

    fn index(self) -> u64 {
        match self {
            Regime::Pretrain => 1,
            Regime::Sgg => 2,
            Regime::Target => 3,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = RelbiasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Regime::Pretrain),
            "sgg" => Ok(Regime::Sgg),
            "target" => Ok(Regime::Target),
            _ => Err(RelbiasError::InvalidArgument(format!(
                "unknown regime {s:?}"
            ))),
        }
    }
}

/// Normalized Zipf weights `1 / r^a` for `r = 1..=k`.
pub fn zipf_prior(k: usize, exponent: f64) -> Result<PriorDistribution> {
    if !exponent.is_finite() {
        return Err(RelbiasError::Prior(format!("zipf exponent {exponent}")));
    }
    let w: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-exponent)).collect();
    PriorDistribution::from_weights(&w, PriorSource::File)
}

/// Parses `uniform`, `zipf:<a>`, a comma-separated weight list, or a prior
/// file path.
pub fn parse_prior_spec(k: usize, spec: &str) -> Result<PriorDistribution> {
    let spec = spec.trim();
    if spec == "uniform" {
        return PriorDistribution::uniform(k);
    }
    if let Some(a) = spec.strip_prefix("zipf:") {
        let a: f64 = a
            .parse()
            .map_err(|_| RelbiasError::InvalidArgument(format!("bad zipf exponent in {spec:?}")))?;
        return zipf_prior(k, a);
    }
    if spec.contains(',') {
        let w = spec
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| RelbiasError::InvalidArgument(format!("bad weight list {spec:?}")))?;
        let prior = PriorDistribution::from_weights(&w, PriorSource::File)?;
        prior.ensure_k(k, "prior weight list")?;
        return Ok(prior);
    }
    let prior = read_prior(std::path::Path::new(spec))?;
    prior.ensure_k(k, spec)?;
    Ok(prior)
}

/// Generator settings; [`SynthModel::new`] draws the class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub k: usize,
    pub dim: usize,
    pub separation: f64,
    pub pretrain_prior: Vec<f64>,
    pub sgg_prior: Vec<f64>,
    pub target_prior: Vec<f64>,
    pub underrep_fraction: f64,
    pub noise_sg: f64,
    pub seed: u64,
}

impl SynthParams {
    /// The standard world: Zipf(1.0) pretraining, Zipf(0.7) task, uniform target.
    pub fn standard(k: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            k,
            dim: 8,
            separation: 2.0,
            pretrain_prior: zipf_prior(k, 1.0)?.probs().to_vec(),
            sgg_prior: zipf_prior(k, 0.7)?.probs().to_vec(),
            target_prior: PriorDistribution::uniform(k)?.probs().to_vec(),
            underrep_fraction: 0.1,
            noise_sg: 3.0,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    params: SynthParams,
    pretrain_prior: PriorDistribution,
    sgg_prior: PriorDistribution,
    target_prior: PriorDistribution,
    class_means: Vec<Vec<f64>>,
    half_sq_norms: Vec<f64>,
}

impl SynthModel {
    pub fn new(params: SynthParams) -> Result<Self> {
        let k = params.k;
        let prior = |p: &[f64], what: &str| -> Result<PriorDistribution> {
            let d = PriorDistribution::new(p.to_vec(), PriorSource::File)?;
            d.ensure_k(k, what)?;
            Ok(d)
        };
        let pretrain_prior = prior(&params.pretrain_prior, "pretrain prior")?;
        let sgg_prior = prior(&params.sgg_prior, "sgg prior")?;
        let target_prior = prior(&params.target_prior, "target prior")?;
        if params.dim == 0 {
            return Err(RelbiasError::InvalidArgument(
                "feature dimension must be >= 1".into(),
            ));
        }
        if !(params.separation > 0.0 && params.separation.is_finite()) {
            return Err(RelbiasError::InvalidArgument(format!(
                "separation must be positive, got {}",
                params.separation
            )));
        }
        if !(0.0..1.0).contains(&params.underrep_fraction) {
            return Err(RelbiasError::InvalidArgument(format!(
                "underrep fraction {} outside [0, 1)",
                params.underrep_fraction
            )));
        }
        if !(params.noise_sg >= 0.0 && params.noise_sg.is_finite()) {
            return Err(RelbiasError::InvalidArgument(format!(
                "noise_sg {}",
                params.noise_sg
            )));
        }

        let mut rng = Pcg64::seed_from_u64(params.seed.wrapping_add(MEANS_OFFSET));
        let class_means: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..params.dim).map(|_| normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm * params.separation).collect()
            })
            .collect();
        let half_sq_norms = class_means
            .iter()
            .map(|m| 0.5 * m.iter().map(|x| x * x).sum::<f64>())
            .collect();
        Ok(Self {
            params,
            pretrain_prior,
            sgg_prior,
            target_prior,
            class_means,
            half_sq_norms,
        })
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn pretrain_prior(&self) -> &PriorDistribution {
        &self.pretrain_prior
    }

    pub fn sgg_prior(&self) -> &PriorDistribution {
        &self.sgg_prior
    }

    pub fn target_prior(&self) -> &PriorDistribution {
        &self.target_prior
    }

    pub fn regime_prior(&self, regime: Regime) -> &PriorDistribution {
        match regime {
            Regime::Pretrain => &self.pretrain_prior,
            Regime::Sgg => &self.sgg_prior,
            Regime::Target => &self.target_prior,
        }
    }

    /// Log joint of each class at `x` under `prior`, dropping the term
    /// shared by all classes.
    pub fn bayes_logits(&self, x: &[f64], prior: &PriorDistribution) -> Vec<f64> {
        self.class_means
            .iter()
            .zip(&self.half_sq_norms)
            .zip(prior.probs())
            .map(|((m, h), p)| p.ln() + dot(x, m) - h)
            .collect()
    }

    /// Every ordinary (subject, relation, object) combination; the
    /// underrepresented object ids never appear.
    pub fn training_inventory(&self) -> BTreeSet<Triplet> {
        let mut inv = BTreeSet::new();
        for subject in 0..OBJECT_CLASSES {
            for object in 0..OBJECT_CLASSES {
                for relation in 1..=self.k() {
                    inv.insert(Triplet {
                        subject,
                        relation,
                        object,
                    });
                }
            }
        }
        inv
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// True class posterior at `x` under `prior`.
pub fn bayes_posterior(
    model: &SynthModel,
    x: &[f64],
    prior: &PriorDistribution,
) -> Result<Vec<f64>> {
    prior.ensure_k(model.k(), "posterior prior")?;
    if x.len() != model.params.dim {
        return Err(RelbiasError::Dimension {
            expected: model.params.dim,
            found: x.len(),
            context: "synthetic features".into(),
        });
    }
    Ok(softmax(&model.bayes_logits(x, prior)))
}

/// A generated dataset plus the hidden variables behind it, aligned with
/// the samples.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub regime: Regime,
    pub dataset: Dataset,
    pub features: Vec<Vec<f64>>,
    /// Drawn class (0-based) of every sample, including background ones.
    pub classes: Vec<usize>,
    pub underrepresented: Vec<bool>,
}

fn uniform(rng: &mut Pcg64) -> f64 {
    StandardUniform.sample(rng)
}

fn normal(rng: &mut Pcg64) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_class(rng: &mut Pcg64, cdf: &[f64]) -> usize {
    let u = uniform(rng) * cdf[cdf.len() - 1];
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

/// Draws `n` samples from `regime`. Sample ids are zero-padded so
/// generation order equals canonical order.
pub fn generate(model: &SynthModel, n: usize, regime: Regime) -> Result<SynthOutput> {
    if n == 0 {
        return Err(RelbiasError::InvalidArgument(
            "synthetic sample count must be >= 1".into(),
        ));
    }
    let p = &model.params;
    let k = p.k;
    let seed = p
        .seed
        .wrapping_add(REGIME_OFFSET.wrapping_mul(regime.index()));
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut cdf = Vec::with_capacity(k);
    let mut acc = 0.0;
    for q in model.regime_prior(regime).probs() {
        acc += q;
        cdf.push(acc);
    }
    let bg_offset = (BACKGROUND_RATE / (1.0 - BACKGROUND_RATE)).ln();

    let mut samples = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    let mut underrepresented = Vec::with_capacity(n);
    for i in 0..n {
        let background = uniform(&mut rng) < BACKGROUND_RATE;
        let class = draw_class(&mut rng, &cdf);
        let x: Vec<f64> = model.class_means[class]
            .iter()
            .map(|m| m + normal(&mut rng))
            .collect();
        let under = uniform(&mut rng) < p.underrep_fraction;
        let base = if under { OBJECT_CLASSES } else { 0 };
        let subject_class = base + (uniform(&mut rng) * OBJECT_CLASSES as f64) as u32;
        let object_class = base + (uniform(&mut rng) * OBJECT_CLASSES as f64) as u32;

        let zs_logits = model.bayes_logits(&x, &model.pretrain_prior);
        let mut relation = model.bayes_logits(&x, &model.sgg_prior);
        let mut bg_logit = bg_offset + log_sum_exp(&relation);
        if background {
            bg_logit += BACKGROUND_BOOST;
        }
        if under {
            for r in relation.iter_mut() {
                *r += p.noise_sg * normal(&mut rng);
            }
        }
        let mut sg_logits = Vec::with_capacity(k + 1);
        sg_logits.push(bg_logit);
        sg_logits.extend(relation);

        samples.push(RelationSample {
            sample_id: format!("s{i:08}"),
            image_id: format!("img{:06}", i / PAIRS_PER_IMAGE),
            subject_class: subject_class.min(base + OBJECT_CLASSES - 1),
            object_class: object_class.min(base + OBJECT_CLASSES - 1),
            gt_label: if background { 0 } else { class + 1 },
            zs_logits,
            sg_logits,
        });
        features.push(x);
        classes.push(class);
        underrepresented.push(under);
    }
    let space = RelationLabelSpace::new(k, None)?;
    let dataset = Dataset::new(space, samples, Some(model.training_inventory()))?;
    Ok(SynthOutput {
        regime,
        dataset,
        features,
        classes,
        underrepresented,
    })
}
