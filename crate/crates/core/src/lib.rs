//! Prior estimation, logit adjustment, branch ensembling and scene-graph
//! metrics over exported relation-classifier logits.

pub mod adjust;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod math;
pub mod metrics;
pub mod priors;
pub mod synth;

pub use adjust::{adjust_logits, calibrated_probs, fit_tau, AdjustmentSpec, Branch, TauGrid};
pub use dataset::{
    Dataset, PriorDistribution, PriorSource, RelationLabelSpace, RelationSample, Triplet,
    TripletInventory, BACKGROUND,
};
pub use ensemble::{ensemble_sample, EnsembleConfig, EnsembleOutput, EnsembleWeights};
pub use error::{RelbiasError, Result};
pub use metrics::{evaluate, recall_at_k, GraphConstraint, MetricReport, Predictions, Split};
pub use priors::{
    count_prior, estimate_prior, target_prior, SolverConfig, SolverTrace, TargetMode,
};
pub use synth::{bayes_posterior, generate, Regime, SynthModel, SynthParams};
