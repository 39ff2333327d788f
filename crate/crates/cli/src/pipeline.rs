//! estimate → adjust → ensemble → eval, with a content-addressed cache for
//! the estimated zero-shot prior.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use relbias_core::adjust::{adjust_logits, calibrated_probs, fit_tau, AdjustmentSpec, Branch};
use relbias_core::ensemble::{ensemble_probs, single_branch, EnsembleOutput};
use relbias_core::io::{
    format_float, load_dataset, read_prior_file, write_json, write_table, zs_table, LogitTable,
    PriorFile, TableValues,
};
use relbias_core::metrics::{
    split_report, BucketSpec, GraphConstraint, Predictions, Split, SplitOptions,
};
use relbias_core::priors::TargetArg;
use relbias_core::{
    count_prior, estimate_prior, target_prior, Dataset, PriorDistribution, RelbiasError,
    SolverConfig, SolverTrace,
};

use crate::config::{ConfigError, PipelineConfig, TargetSpec, TauSetting};
use crate::provenance::{dataset_hash, sha256_hex, short, tool_version};
use crate::report::ReportFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Estimate,
    Adjust,
    Ensemble,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Estimate => "estimate",
            Stage::Adjust => "adjust",
            Stage::Ensemble => "ensemble",
            Stage::Eval => "eval",
        })
    }
}

fn at_path(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| format!(" ({})", p.display()))
        .unwrap_or_default()
}

#[derive(Debug, Error)]
#[error("{stage} stage failed{}: {source}", at_path(.path))]
pub struct StageError {
    pub stage: Stage,
    pub path: Option<PathBuf>,
    #[source]
    pub source: RelbiasError,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stage(#[from] StageError),
}

fn stage_err(stage: Stage, path: Option<&Path>) -> impl FnOnce(RelbiasError) -> StageError {
    let path = path.map(Path::to_path_buf);
    move |source| StageError {
        stage,
        path,
        source,
    }
}

/// Solver trace as written next to an estimated prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub tool: String,
    pub config_hash: String,
    pub iterations_run: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
}

impl TraceFile {
    pub fn new(trace: &SolverTrace, config_hash: &str) -> Self {
        Self {
            tool: tool_version(),
            config_hash: config_hash.to_string(),
            iterations_run: trace.iterations_run,
            final_loss: trace.final_loss(),
            final_grad_norm: trace.final_grad_norm,
            converged: trace.converged,
        }
    }
}

/// Prior file carrying the tool stamp and a hash of what produced it.
pub fn stamped_prior(prior: &PriorDistribution, config_hash: &str) -> PriorFile {
    let mut file = PriorFile::from_prior(prior);
    file.extra.insert("tool".into(), json!(tool_version()));
    file.extra.insert("config_hash".into(), json!(config_hash));
    file
}

/// Key of the zero-shot prior cache: the zero-shot logits the solver sees,
/// the task prior, and the solver settings.
pub fn estimate_key(est: &Dataset, pi_sg: &PriorDistribution, solver: &SolverConfig) -> String {
    let zs = zs_table(est).render();
    let prior = serde_json::to_vec(&PriorFile::from_prior(pi_sg)).expect("serializable prior");
    let solver = serde_json::to_vec(solver).expect("serializable config");
    sha256_hex(&[b"pi_pt-v1", zs.as_bytes(), &prior, &solver])
}

/// Adjusted logits of one branch as a background=0 table.
pub fn adjusted_table(
    ds: &Dataset,
    branch: Branch,
    spec: &AdjustmentSpec,
) -> Result<LogitTable, RelbiasError> {
    let mut table = LogitTable::new(ds.k(), false, TableValues::Logits);
    table.extras.push(("branch".into(), branch.as_str().into()));
    table.extras.push(("tau".into(), format_float(spec.tau())));
    table.extras.push(("tool".into(), tool_version()));
    for s in ds.samples() {
        table.push_row(s, adjust_logits(branch.relation_logits(s), spec)?);
    }
    Ok(table)
}

/// Fuses two adjusted tables sample by sample. Background comes from the
/// raw task logits in `ds`.
pub fn ensemble_from_tables(
    ds: &Dataset,
    adjusted_zs: &LogitTable,
    adjusted_sg: &LogitTable,
    tau_zs: f64,
    tau_sg: f64,
    scale: f64,
) -> Result<Vec<EnsembleOutput>, RelbiasError> {
    for t in [adjusted_zs, adjusted_sg] {
        if t.background || t.k != ds.k() {
            return Err(RelbiasError::Dimension {
                expected: ds.k(),
                found: t.width(),
                context: "adjusted table columns".into(),
            });
        }
    }
    let zs = adjusted_zs.index()?;
    let sg = adjusted_sg.index()?;
    ds.samples()
        .iter()
        .map(|s| {
            let row = |idx: &std::collections::HashMap<&str, &relbias_core::io::TableRow>| {
                idx.get(s.sample_id.as_str())
                    .map(|r| r.values.clone())
                    .ok_or_else(|| RelbiasError::MissingPrediction(s.sample_id.clone()))
            };
            let p_zs = calibrated_probs(&row(&zs)?, tau_zs)?;
            let p_sg = calibrated_probs(&row(&sg)?, tau_sg)?;
            ensemble_probs(s, &p_zs, &p_sg, scale)
        })
        .collect()
}

/// Task branch alone, with background from its raw logits.
pub fn baseline_from_table(
    ds: &Dataset,
    adjusted_sg: &LogitTable,
    tau_sg: f64,
) -> Result<Vec<EnsembleOutput>, RelbiasError> {
    let sg = adjusted_sg.index()?;
    ds.samples()
        .iter()
        .map(|s| {
            let row = sg
                .get(s.sample_id.as_str())
                .ok_or_else(|| RelbiasError::MissingPrediction(s.sample_id.clone()))?;
            single_branch(s, &calibrated_probs(&row.values, tau_sg)?)
        })
        .collect()
}

/// Background=1 probability table of composed predictions.
pub fn probability_table(
    ds: &Dataset,
    outputs: &[EnsembleOutput],
    extras: Vec<(String, String)>,
) -> LogitTable {
    let mut table = LogitTable::new(ds.k(), true, TableValues::Probs);
    table.extras = extras;
    for (s, out) in ds.samples().iter().zip(outputs) {
        table.push_row(s, out.full());
    }
    table
}

/// Splits to report when none are configured.
pub fn default_splits(ds: &Dataset) -> Vec<Split> {
    let mut splits = vec![Split::All];
    if ds.inventory().is_some() {
        splits.extend([Split::Seen, Split::Unseen]);
    }
    splits.extend([Split::Frequent, Split::Medium, Split::Rare]);
    splits
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub config_hash: String,
    /// Whether the zero-shot prior came from the cache.
    pub cache_hit: bool,
    pub pi_sg: PriorDistribution,
    pub pi_pt: PriorDistribution,
    pub trace: TraceFile,
    pub tau_zs: f64,
    pub tau_sg: f64,
    pub report: ReportFile,
    pub baseline: ReportFile,
    pub files: Vec<PathBuf>,
}

pub const CACHE_DIR: &str = "cache";

struct Writer {
    out_dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.files.push(p.clone());
        p
    }
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    log: &dyn Fn(&str),
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let mut w = Writer {
        out_dir: cfg.out_dir.clone(),
        files: Vec::new(),
    };

    // load
    let ds = load_dataset(&cfg.manifest).map_err(stage_err(Stage::Load, Some(&cfg.manifest)))?;
    let est_path = cfg.estimate_manifest().to_path_buf();
    let est_full = if est_path == cfg.manifest {
        ds.clone()
    } else {
        load_dataset(&est_path).map_err(stage_err(Stage::Load, Some(&est_path)))?
    };
    let ds_hash = dataset_hash(&ds);
    log(&format!(
        "loaded {} samples (k={}) from {}",
        ds.len(),
        ds.k(),
        cfg.manifest.display()
    ));

    // estimate
    let est = est_full.filter_nonbackground();
    if est.is_empty() {
        return Err(
            stage_err(Stage::Estimate, Some(&est_path))(RelbiasError::EmptyDataset(
                "no non-background samples to estimate priors from",
            ))
            .into(),
        );
    }
    if est.k() != ds.k() {
        return Err(
            stage_err(Stage::Estimate, Some(&est_path))(RelbiasError::Dimension {
                expected: ds.k(),
                found: est.k(),
                context: "estimation data vs evaluation data".into(),
            })
            .into(),
        );
    }
    let pi_sg = match &cfg.prior_sg {
        Some(p) => {
            let prior =
                relbias_core::io::read_prior(p).map_err(stage_err(Stage::Estimate, Some(p)))?;
            prior
                .ensure_k(ds.k(), "task prior file")
                .map_err(stage_err(Stage::Estimate, Some(p)))?;
            prior
        }
        None => count_prior(&est).map_err(stage_err(Stage::Estimate, Some(&est_path)))?,
    };
    let solver = cfg.solver_config();
    let key = estimate_key(&est, &pi_sg, &solver);
    let out = |e| stage_err(Stage::Estimate, Some(&cfg.out_dir))(e);
    write_json(&w.path("pi_sg.json"), &stamped_prior(&pi_sg, &key)).map_err(out)?;

    let cache_dir = cfg.out_dir.join(CACHE_DIR);
    let cached_prior = cache_dir.join(format!("pi_pt-{}.json", short(&key)));
    let cached_trace = cache_dir.join(format!("pi_pt_trace-{}.json", short(&key)));
    let cache_hit = cached_prior.is_file() && cached_trace.is_file();
    if cache_hit {
        log(&format!(
            "reusing cached zero-shot prior {}",
            cached_prior.display()
        ));
    } else {
        let (pi_pt, trace) = estimate_prior(&est, &pi_sg, &solver)
            .map_err(stage_err(Stage::Estimate, Some(&est_path)))?;
        log(&format!(
            "estimated zero-shot prior: {} iterations, converged={}, grad norm {:.3e}",
            trace.iterations_run, trace.converged, trace.final_grad_norm
        ));
        write_json(&cached_prior, &stamped_prior(&pi_pt, &key)).map_err(out)?;
        write_json(&cached_trace, &TraceFile::new(&trace, &key)).map_err(out)?;
    }
    let pi_pt_file = read_prior_file(&cached_prior).map_err(out)?;
    let pi_pt = pi_pt_file.to_prior().map_err(out)?;
    let trace: TraceFile = serde_json::from_slice(&fs::read(&cached_trace).map_err(|e| {
        out(RelbiasError::Io {
            path: cached_trace.clone(),
            source: e,
        })
    })?)
    .map_err(|source| {
        out(RelbiasError::Json {
            path: cached_trace.clone(),
            source,
        })
    })?;
    for (src, name) in [
        (&cached_prior, "pi_pt.json"),
        (&cached_trace, "pi_pt_trace.json"),
    ] {
        let dst = w.path(name);
        fs::copy(src, &dst).map_err(|e| {
            out(RelbiasError::Io {
                path: dst.clone(),
                source: e,
            })
        })?;
    }

    // adjust
    let target_path = match &cfg.target {
        TargetSpec::File(p) => Some(p.clone()),
        _ => None,
    };
    let adjust_err = |e| stage_err(Stage::Adjust, target_path.as_deref())(e);
    let arg = match &cfg.target {
        TargetSpec::Uniform => None,
        TargetSpec::Training => Some(TargetArg::Prior(pi_sg.clone())),
        TargetSpec::File(p) => Some(TargetArg::Path(p.clone())),
    };
    let target = target_prior(ds.space(), cfg.target.mode(), arg).map_err(adjust_err)?;
    let resolve_tau = |setting: TauSetting,
                       branch: Branch,
                       spec: AdjustmentSpec|
     -> Result<AdjustmentSpec, StageError> {
        match setting {
            TauSetting::Fixed(t) => spec.with_tau(t).map_err(stage_err(Stage::Adjust, None)),
            TauSetting::Fit => {
                let t = fit_tau(&est, branch, &spec, &cfg.tau_grid)
                    .map_err(stage_err(Stage::Adjust, Some(&est_path)))?;
                spec.with_tau(t).map_err(stage_err(Stage::Adjust, None))
            }
        }
    };
    let zs_spec = AdjustmentSpec::new(pi_pt.clone(), target.clone(), 1.0).map_err(adjust_err)?;
    let sg_spec = AdjustmentSpec::new(pi_sg.clone(), target.clone(), 1.0).map_err(adjust_err)?;
    let zs_spec = resolve_tau(cfg.tau_zs, Branch::Zs, zs_spec)?;
    let sg_spec = resolve_tau(cfg.tau_sg, Branch::Sg, sg_spec)?;
    let (tau_zs, tau_sg) = (zs_spec.tau(), sg_spec.tau());
    log(&format!(
        "target {}; tau zs {tau_zs}, sg {tau_sg}",
        cfg.target
    ));

    let adjust_out = |e| stage_err(Stage::Adjust, Some(&cfg.out_dir))(e);
    let stamp = |t: &mut LogitTable| {
        t.extras.push(("config".into(), short(&config_hash).into()));
        t.extras.push(("dataset".into(), ds_hash.clone()));
    };
    let mut adj_zs = adjusted_table(&ds, Branch::Zs, &zs_spec).map_err(adjust_out)?;
    let mut adj_sg = adjusted_table(&ds, Branch::Sg, &sg_spec).map_err(adjust_out)?;
    stamp(&mut adj_zs);
    stamp(&mut adj_sg);
    write_json(
        &w.path("target.json"),
        &stamped_prior(&target, &config_hash),
    )
    .map_err(adjust_out)?;
    write_table(&w.path("adjusted_zs.tsv"), &adj_zs).map_err(adjust_out)?;
    write_table(&w.path("adjusted_sg.tsv"), &adj_sg).map_err(adjust_out)?;

    // ensemble
    let ens_err = |e| stage_err(Stage::Ensemble, Some(&cfg.out_dir))(e);
    let fused =
        ensemble_from_tables(&ds, &adj_zs, &adj_sg, tau_zs, tau_sg, cfg.scale).map_err(ens_err)?;
    let baseline = baseline_from_table(&ds, &adj_sg, tau_sg).map_err(ens_err)?;
    let extras = |what: &str| {
        vec![
            ("predictions".to_string(), what.to_string()),
            ("scale".to_string(), format_float(cfg.scale)),
            ("tool".to_string(), tool_version()),
            ("config".to_string(), short(&config_hash).to_string()),
            ("dataset".to_string(), ds_hash.clone()),
        ]
    };
    write_table(
        &w.path("ensemble.tsv"),
        &probability_table(&ds, &fused, extras("ensemble")),
    )
    .map_err(ens_err)?;
    write_table(
        &w.path("baseline_sg.tsv"),
        &probability_table(&ds, &baseline, extras("sg")),
    )
    .map_err(ens_err)?;

    // eval
    let eval_err = |e| stage_err(Stage::Eval, Some(&cfg.manifest))(e);
    let mut opts = SplitOptions::new(cfg.cutoffs.clone());
    opts.graph = cfg.graph_constraint;
    opts.splits = cfg.splits.clone().unwrap_or_else(|| default_splits(&ds));
    opts.buckets = cfg.buckets;
    opts.class_counts = Some(pi_sg.probs().to_vec());

    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), cfg.manifest.display().to_string());
    inputs.insert(
        "estimate_manifest".to_string(),
        est_path.display().to_string(),
    );
    if let Some(p) = &cfg.prior_sg {
        inputs.insert("prior_sg".to_string(), p.display().to_string());
    }
    let mut settings = BTreeMap::new();
    settings.insert("target".to_string(), json!(cfg.target.to_string()));
    settings.insert("tau_zs".to_string(), json!(tau_zs));
    settings.insert("tau_sg".to_string(), json!(tau_sg));
    settings.insert("scale".to_string(), json!(cfg.scale));
    settings.insert("buckets".to_string(), json!(bucket_label(cfg.buckets)));
    settings.insert("estimate_key".to_string(), json!(key));

    let make_report = |outputs: &[EnsembleOutput], what: &str| -> Result<ReportFile, StageError> {
        let preds = Predictions::from_outputs(&ds, outputs).map_err(eval_err)?;
        let metrics = split_report(&preds, &ds, &opts).map_err(eval_err)?;
        metrics.validate().map_err(eval_err)?;
        Ok(ReportFile {
            tool: tool_version(),
            config_hash: config_hash.clone(),
            dataset_hash: ds_hash.clone(),
            predictions: what.to_string(),
            inputs: inputs.clone(),
            settings: settings.clone(),
            graph_constraint: cfg.graph_constraint,
            metrics,
        })
    };
    let report = make_report(&fused, "ensemble")?;
    let baseline_report = make_report(&baseline, "sg")?;
    let eval_out = |e| stage_err(Stage::Eval, Some(&cfg.out_dir))(e);
    write_json(&w.path("report.json"), &report).map_err(eval_out)?;
    write_json(&w.path("report_sg.json"), &baseline_report).map_err(eval_out)?;
    relbias_core::io::write_text(
        &w.path("distribution.tsv"),
        &distribution_tsv(&ds, &pi_sg, &pi_pt, &target),
    )
    .map_err(eval_out)?;
    log(&format!(
        "wrote {} artifacts to {}",
        w.files.len(),
        cfg.out_dir.display()
    ));

    Ok(PipelineOutcome {
        out_dir: cfg.out_dir.clone(),
        config_hash,
        cache_hit,
        pi_sg,
        pi_pt,
        trace,
        tau_zs,
        tau_sg,
        report,
        baseline: baseline_report,
        files: w.files,
    })
}

fn bucket_label(b: BucketSpec) -> String {
    match b {
        BucketSpec::Auto => "auto".into(),
        BucketSpec::Thresholds {
            frequent_min,
            rare_max,
        } => format!("{frequent_min},{rare_max}"),
    }
}

/// Per-class priors for plotting: class id, name, task prior, estimated
/// zero-shot prior, target.
pub fn distribution_tsv(
    ds: &Dataset,
    pi_sg: &PriorDistribution,
    pi_pt: &PriorDistribution,
    target: &PriorDistribution,
) -> String {
    let mut out = String::from("class\tname\tpi_sg\tpi_pt\ttarget\n");
    for r in 1..=ds.k() {
        out.push_str(&format!(
            "{r}\t{}\t{}\t{}\t{}\n",
            ds.space().name(r),
            format_float(pi_sg.probs()[r - 1]),
            format_float(pi_pt.probs()[r - 1]),
            format_float(target.probs()[r - 1]),
        ));
    }
    out
}

/// Graph-constraint flag as stored in configs and reports.
pub fn graph_from_flag(no_graph_constraint: bool) -> GraphConstraint {
    if no_graph_constraint {
        GraphConstraint::Off
    } else {
        GraphConstraint::On
    }
}
