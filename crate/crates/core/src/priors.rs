//! Empirical prior counting and estimation of a classifier's hidden training
//! prior from labelled data.
//!
//! The estimator finds the prior `pi` that minimizes the mean cross-entropy
//! of `softmax(logits - log pi + log pi_data)` against the labels, subject to
//! `pi` lying on the simplex. The constraint is handled by parameterizing
//! `pi = softmax(theta)` over unconstrained `theta`, so every iterate is
//! feasible and stationary points coincide with the KKT points of the
//! constrained problem.
//!
//! Updates are full-batch gradient steps on `theta`, diagonally
//! preconditioned by the per-class curvature `mean_i p_ir (1 - p_ir)`, with
//! step halving whenever a step would raise the loss. The loss history is
//! therefore non-increasing.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PriorDistribution, PriorSource, RelationLabelSpace};
use crate::error::{RelbiasError, Result};
use crate::io;
use crate::math::{log_sum_exp, pairwise_sum};

const BLOCK: usize = 512;
const MAX_HALVINGS: usize = 60;
const CURVATURE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverInit {
    /// `theta = 0`, i.e. the uniform prior.
    Uniform,
    /// `theta = log pi_data`.
    Counted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Initial step size; halved as needed within an iteration.
    pub learning_rate: f64,
    /// Stop once the L2 norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Recorded for provenance. The full-batch solver draws no random numbers.
    pub seed: u64,
    pub init: SolverInit,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            learning_rate: 0.1,
            grad_tol: 1e-6,
            seed: 0,
            init: SolverInit::Uniform,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(RelbiasError::InvalidArgument(
                "max_iters must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RelbiasError::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return Err(RelbiasError::InvalidArgument(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    /// Accepted parameter updates.
    pub iterations_run: usize,
    /// Objective at the starting point and after every accepted update.
    pub loss_history: Vec<f64>,
    pub final_grad_norm: f64,
    pub converged: bool,
}

impl SolverTrace {
    pub fn final_loss(&self) -> f64 {
        *self
            .loss_history
            .last()
            .expect("history holds the initial loss")
    }
}

/// Label frequencies of the non-background samples.
pub fn count_prior(ds: &Dataset) -> Result<PriorDistribution> {
    let counts = ds.label_counts();
    let total: usize = counts[1..].iter().sum();
    if total == 0 {
        return Err(RelbiasError::EmptyDataset(
            "counting a prior needs at least one non-background sample",
        ));
    }
    let probs = counts[1..]
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    PriorDistribution::new(probs, PriorSource::Counted)
}

/// Labels as 0-based relation indices plus zs logits shifted by `log pi_data`.
struct Problem {
    k: usize,
    shifted: Vec<f64>,
    labels: Vec<usize>,
    label_freq: Vec<f64>,
}

impl Problem {
    fn new(ds: &Dataset, pi_data: &PriorDistribution) -> Result<Self> {
        pi_data.ensure_k(ds.k(), "data prior")?;
        let k = ds.k();
        let log_data = pi_data.log_probs();
        let mut shifted = Vec::new();
        let mut labels = Vec::new();
        for s in ds.samples().iter().filter(|s| !s.is_background()) {
            shifted.extend(s.zs_logits.iter().zip(&log_data).map(|(o, l)| o + l));
            labels.push(s.gt_label - 1);
        }
        if labels.is_empty() {
            return Err(RelbiasError::EmptyDataset(
                "prior estimation needs at least one non-background sample",
            ));
        }
        let mut label_freq = vec![0.0; k];
        for &y in &labels {
            label_freq[y] += 1.0;
        }
        let n = labels.len() as f64;
        label_freq.iter_mut().for_each(|q| *q /= n);
        Ok(Self {
            k,
            shifted,
            labels,
            label_freq,
        })
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    /// Mean loss, and when `with_moments` the mean posterior and mean
    /// per-class curvature, for the given log prior.
    fn evaluate(&self, log_prior: &[f64], with_moments: bool) -> Evaluation {
        let k = self.k;
        let blocks: Vec<Evaluation> = self
            .shifted
            .par_chunks(BLOCK * k)
            .zip(self.labels.par_chunks(BLOCK))
            .map(|(rows, labels)| {
                let mut losses = Vec::with_capacity(labels.len());
                let mut mean_post = vec![0.0; if with_moments { k } else { 0 }];
                let mut curvature = mean_post.clone();
                let mut adjusted = vec![0.0; k];
                for (row, &y) in rows.chunks_exact(k).zip(labels) {
                    for ((a, o), l) in adjusted.iter_mut().zip(row).zip(log_prior) {
                        *a = o - l;
                    }
                    let lse = log_sum_exp(&adjusted);
                    losses.push(lse - adjusted[y]);
                    if with_moments {
                        for r in 0..k {
                            let p = (adjusted[r] - lse).exp();
                            mean_post[r] += p;
                            curvature[r] += p * (1.0 - p);
                        }
                    }
                }
                Evaluation {
                    loss: pairwise_sum(&losses),
                    mean_post,
                    curvature,
                }
            })
            .collect();

        // Combine block partials in block order so the result does not depend
        // on thread scheduling.
        let n = self.n() as f64;
        let losses: Vec<f64> = blocks.iter().map(|b| b.loss).collect();
        let mut total = Evaluation {
            loss: pairwise_sum(&losses) / n,
            mean_post: vec![0.0; if with_moments { k } else { 0 }],
            curvature: vec![0.0; if with_moments { k } else { 0 }],
        };
        if with_moments {
            for r in 0..k {
                let post: Vec<f64> = blocks.iter().map(|b| b.mean_post[r]).collect();
                let curv: Vec<f64> = blocks.iter().map(|b| b.curvature[r]).collect();
                total.mean_post[r] = pairwise_sum(&post) / n;
                total.curvature[r] = pairwise_sum(&curv) / n;
            }
        }
        total
    }
}

struct Evaluation {
    loss: f64,
    mean_post: Vec<f64>,
    curvature: Vec<f64>,
}

fn log_softmax(theta: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(theta);
    theta.iter().map(|t| t - lse).collect()
}

/// Gradient with respect to `theta` given the moments at `log_prior`.
fn theta_gradient(problem: &Problem, log_prior: &[f64], eval: &Evaluation) -> Vec<f64> {
    // d loss / d log_prior_r = q_r - mean_post_r; chain through the softmax.
    let g_log: Vec<f64> = problem
        .label_freq
        .iter()
        .zip(&eval.mean_post)
        .map(|(q, p)| q - p)
        .collect();
    let g_sum: f64 = g_log.iter().sum();
    g_log
        .iter()
        .zip(log_prior)
        .map(|(g, l)| g - l.exp() * g_sum)
        .collect()
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cross-entropy of `softmax(zs - log pi_model + log pi_data)` against
/// the labels of the non-background samples of `ds`.
pub fn lm_objective(
    ds: &Dataset,
    pi_model: &PriorDistribution,
    pi_data: &PriorDistribution,
) -> Result<f64> {
    pi_model.ensure_k(ds.k(), "model prior")?;
    let problem = Problem::new(ds, pi_data)?;
    Ok(problem.evaluate(&pi_model.log_probs(), false).loss)
}

/// Estimates the training prior implied by the zero-shot logits of `ds`,
/// whose labels follow `pi_data`.
///
/// Non-convergence is not an error: the best iterate is returned with
/// `converged = false`.
pub fn estimate_prior(
    ds: &Dataset,
    pi_data: &PriorDistribution,
    cfg: &SolverConfig,
) -> Result<(PriorDistribution, SolverTrace)> {
    cfg.validate()?;
    let problem = Problem::new(ds, pi_data)?;
    let k = problem.k;

    let mut theta = match cfg.init {
        SolverInit::Uniform => vec![0.0; k],
        SolverInit::Counted => pi_data.log_probs(),
    };
    let mut log_prior = log_softmax(&theta);
    let mut eval = problem.evaluate(&log_prior, true);
    let mut grad = theta_gradient(&problem, &log_prior, &eval);
    let mut grad_norm = l2(&grad);
    let mut history = vec![eval.loss];
    let mut iterations = 0;

    while grad_norm >= cfg.grad_tol && iterations < cfg.max_iters {
        let mut direction: Vec<f64> = grad
            .iter()
            .zip(&eval.curvature)
            .map(|(g, h)| g / h.max(CURVATURE_FLOOR))
            .collect();
        // theta is only identified up to a constant; keep it centred.
        let mean = direction.iter().sum::<f64>() / k as f64;
        direction.iter_mut().for_each(|d| *d -= mean);

        let mut step = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<f64> = theta
                .iter()
                .zip(&direction)
                .map(|(t, d)| t - step * d)
                .collect();
            let candidate_log = log_softmax(&candidate);
            let candidate_eval = problem.evaluate(&candidate_log, true);
            if candidate_eval.loss <= eval.loss {
                accepted = Some((candidate, candidate_log, candidate_eval));
                break;
            }
            step *= 0.5;
        }
        // No decrease possible along the direction: treat as a stall.
        let Some((t, l, e)) = accepted else {
            break;
        };
        theta = t;
        log_prior = l;
        eval = e;
        grad = theta_gradient(&problem, &log_prior, &eval);
        grad_norm = l2(&grad);
        history.push(eval.loss);
        iterations += 1;
    }

    let probs: Vec<f64> = log_prior.iter().map(|l| l.exp()).collect();
    let total: f64 = probs.iter().sum();
    let prior = PriorDistribution::new(
        probs.iter().map(|p| p / total).collect(),
        PriorSource::Estimated,
    )?;
    let trace = SolverTrace {
        iterations_run: iterations,
        loss_history: history,
        final_grad_norm: grad_norm,
        converged: grad_norm < cfg.grad_tol,
    };
    Ok((prior, trace))
}

/// Where the target prior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Uniform,
    Training,
    File,
}

#[derive(Debug, Clone)]
pub enum TargetArg {
    Prior(PriorDistribution),
    Path(PathBuf),
}

/// Resolves the distribution that adjusted logits should reflect.
///
/// `Training` takes the counted data prior as `arg`; `File` takes a prior
/// file path.
pub fn target_prior(
    space: &RelationLabelSpace,
    mode: TargetMode,
    arg: Option<TargetArg>,
) -> Result<PriorDistribution> {
    let prior = match (mode, arg) {
        (TargetMode::Uniform, _) => PriorDistribution::uniform(space.k())?,
        (TargetMode::Training, Some(TargetArg::Prior(p))) => p,
        (TargetMode::Training, _) => {
            return Err(RelbiasError::InvalidArgument(
                "target mode `training` needs the counted training prior".into(),
            ))
        }
        (TargetMode::File, Some(TargetArg::Path(path))) => load_target_file(&path)?,
        (TargetMode::File, _) => {
            return Err(RelbiasError::InvalidArgument(
                "target mode `file` needs a prior file path".into(),
            ))
        }
    };
    prior.ensure_k(space.k(), "target prior")?;
    Ok(prior)
}

fn load_target_file(path: &Path) -> Result<PriorDistribution> {
    Ok(io::read_prior(path)?.with_source(PriorSource::File))
}
