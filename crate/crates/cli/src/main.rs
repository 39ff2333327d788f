use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use relbias_cli::config::{
    parse_buckets, parse_cutoffs, parse_splits, PipelineConfig, TargetSpec, TauSetting,
};
use relbias_cli::pipeline::{
    adjusted_table, default_splits, ensemble_from_tables, graph_from_flag, probability_table,
    run_pipeline, stamped_prior, TraceFile,
};
use relbias_cli::provenance::{dataset_hash, json_hash, tool_version};
use relbias_cli::report::{diff_reports, read_report, ReportFile};
use relbias_core::adjust::{AdjustmentSpec, Branch};
use relbias_core::io::{
    format_float, load_dataset, read_prior, read_table, write_dataset, write_json, write_table,
};
use relbias_core::metrics::{split_report, BucketSpec, Predictions, Split, SplitOptions};
use relbias_core::priors::{SolverInit, TargetArg};
use relbias_core::synth::{generate, parse_prior_spec, Regime, SynthModel, SynthParams};
use relbias_core::{count_prior, estimate_prior, target_prior, PriorDistribution, SolverConfig};

#[derive(Parser)]
#[command(
    name = "relbias",
    version,
    about = "Label-bias correction for relation classifiers"
)]
struct Cli {
    /// Seed for synthetic data and solver provenance.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (synth, pipeline).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Pipeline config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known priors.
    Synth(SynthArgs),
    /// Estimate the zero-shot branch's training prior.
    Estimate(EstimateArgs),
    /// Write prior-adjusted logits for one branch.
    Adjust(AdjustArgs),
    /// Fuse two adjusted branches into relation probabilities.
    Ensemble(EnsembleArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Run estimate, adjust, ensemble and eval end to end.
    Pipeline(PipelineArgs),
    /// Compare two report files.
    Diff(DiffArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Evaluation samples (target regime).
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    /// Estimation samples (task-training regime); defaults to `--n`.
    #[arg(long)]
    n_estimate: Option<usize>,
    /// `uniform`, `zipf:<a>`, comma-separated weights, or a prior file.
    #[arg(long, default_value = "zipf:1.0")]
    pretrain_prior: String,
    #[arg(long, default_value = "zipf:0.7")]
    sgg_prior: String,
    #[arg(long, default_value = "uniform")]
    target_prior: String,
    /// Distance between class means.
    #[arg(long, default_value_t = 2.0)]
    sep: f64,
    /// Fraction of pairs with underrepresented objects.
    #[arg(long, default_value_t = 0.1)]
    underrep: f64,
    /// Noise added to task logits of underrepresented pairs.
    #[arg(long, default_value_t = 3.0)]
    noise_sg: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Uniform,
    Counted,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Task-branch prior file; counted from the manifest when absent.
    #[arg(long)]
    prior_sg: Option<PathBuf>,
    /// Prior output; the trace goes next to it as `<stem>_trace.json`.
    #[arg(long, default_value = "pi_pt.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    init: InitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Zs,
    Sg,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Branch {
        match b {
            BranchArg::Zs => Branch::Zs,
            BranchArg::Sg => Branch::Sg,
        }
    }
}

#[derive(Args)]
struct AdjustArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    branch: BranchArg,
    /// Training prior of the branch.
    #[arg(long)]
    prior_train: PathBuf,
    /// `uniform`, `training` (the branch's own prior), or `file:<path>`.
    #[arg(long, alias = "target", default_value = "uniform")]
    prior_target: TargetSpec,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    adjusted_zs: PathBuf,
    #[arg(long)]
    adjusted_sg: PathBuf,
    /// Defaults to the temperature recorded in the adjusted table.
    #[arg(long)]
    tau_zs: Option<f64>,
    #[arg(long)]
    tau_sg: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value = "ensemble.tsv")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Probability table with a background column.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "20,50,100", value_parser = parse_cutoffs)]
    cutoffs: ::std::vec::Vec<usize>,
    /// Comma-separated subset of all, seen, unseen, frequent, medium, rare.
    #[arg(long, value_parser = parse_splits)]
    splits: Option<::std::vec::Vec<Split>>,
    /// `auto` or `<frequent_min>,<rare_max>`.
    #[arg(long, default_value = "auto", value_parser = parse_buckets)]
    buckets: BucketSpec,
    /// Prior file whose masses define frequency buckets; label counts of the
    /// manifest otherwise.
    #[arg(long)]
    bucket_prior: Option<PathBuf>,
    #[arg(long)]
    no_graph_constraint: bool,
    /// Score predictions produced from a different dataset.
    #[arg(long)]
    allow_hash_mismatch: bool,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    estimate_manifest: Option<PathBuf>,
    #[arg(long)]
    prior_sg: Option<PathBuf>,
    #[arg(long)]
    target: Option<TargetSpec>,
    /// A number or `fit`.
    #[arg(long)]
    tau_zs: Option<TauSetting>,
    #[arg(long)]
    tau_sg: Option<TauSetting>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_parser = parse_cutoffs)]
    cutoffs: Option<::std::vec::Vec<usize>>,
    #[arg(long)]
    no_graph_constraint: bool,
}

#[derive(Args)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
}

struct Log {
    quiet: bool,
}

impl Log {
    fn say(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let log = Log { quiet: cli.quiet };
    match cli.command {
        Command::Synth(a) => synth(
            a,
            cli.seed.unwrap_or(0),
            cli.out_dir.unwrap_or_else(|| "synth".into()),
            &log,
        ),
        Command::Estimate(a) => estimate(a, cli.seed.unwrap_or(0), &log),
        Command::Adjust(a) => adjust(a, &log),
        Command::Ensemble(a) => ensemble(a, &log),
        Command::Eval(a) => eval(a, &log),
        Command::Pipeline(a) => pipeline(a, cli.config, cli.seed, cli.out_dir, &log),
        Command::Diff(a) => diff(a),
    }
}

fn synth(a: SynthArgs, seed: u64, dir: PathBuf, log: &Log) -> Result<()> {
    let prior = |spec: &str, what: &str| {
        parse_prior_spec(a.k, spec)
            .map(|p| p.probs().to_vec())
            .with_context(|| format!("--{what}"))
    };
    let params = SynthParams {
        k: a.k,
        dim: a.dim,
        separation: a.sep,
        pretrain_prior: prior(&a.pretrain_prior, "pretrain-prior")?,
        sgg_prior: prior(&a.sgg_prior, "sgg-prior")?,
        target_prior: prior(&a.target_prior, "target-prior")?,
        underrep_fraction: a.underrep,
        noise_sg: a.noise_sg,
        seed,
    };
    let model = SynthModel::new(params.clone())?;
    let eval = generate(&model, a.n, Regime::Target)?;
    let est = generate(&model, a.n_estimate.unwrap_or(a.n), Regime::Sgg)?;
    let manifest = write_dataset(&eval.dataset, &dir, "", "manifest.json")?;
    let est_manifest = write_dataset(&est.dataset, &dir, "estimate_", "estimate_manifest.json")?;
    for (name, p) in [
        ("pi_pretrain.json", model.pretrain_prior()),
        ("pi_sgg.json", model.sgg_prior()),
        ("pi_target.json", model.target_prior()),
    ] {
        write_json(&dir.join(name), &stamped_prior(p, &json_hash(&params)))?;
    }
    write_json(
        &dir.join("synth.json"),
        &json!({
            "tool": tool_version(),
            "params": params,
            "eval_samples": a.n,
            "estimate_samples": a.n_estimate.unwrap_or(a.n),
        }),
    )?;
    let cfg = json!({
        "manifest": "manifest.json",
        "estimate_manifest": "estimate_manifest.json",
        "seed": seed,
        "out_dir": "run",
    });
    write_json(&dir.join("pipeline.json"), &cfg)?;
    log.say(&format!(
        "wrote {} and {} to {}",
        manifest.display(),
        est_manifest.display(),
        dir.display()
    ));
    Ok(())
}

fn trace_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("prior");
    out.with_file_name(format!("{stem}_trace.json"))
}

fn estimate(a: EstimateArgs, seed: u64, log: &Log) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let est = ds.filter_nonbackground();
    if est.is_empty() {
        bail!(
            "estimate stage failed ({}): no non-background samples",
            a.manifest.display()
        );
    }
    let pi_sg = match &a.prior_sg {
        Some(p) => {
            let prior = read_prior(p)?;
            prior.ensure_k(ds.k(), "task prior file")?;
            prior
        }
        None => count_prior(&est)?,
    };
    let cfg = SolverConfig {
        max_iters: a.iters,
        learning_rate: a.lr,
        grad_tol: a.tol,
        seed,
        init: match a.init {
            InitArg::Uniform => SolverInit::Uniform,
            InitArg::Counted => SolverInit::Counted,
        },
    };
    let (pi_pt, trace) = estimate_prior(&est, &pi_sg, &cfg)?;
    let key = relbias_cli::pipeline::estimate_key(&est, &pi_sg, &cfg);
    write_json(&a.out, &stamped_prior(&pi_pt, &key))?;
    write_json(&trace_path(&a.out), &TraceFile::new(&trace, &key))?;
    log.say(&format!(
        "{} iterations, converged={}, final loss {:.6}, grad norm {:.3e}",
        trace.iterations_run,
        trace.converged,
        trace.final_loss(),
        trace.final_grad_norm
    ));
    if !trace.converged {
        log.say("warning: solver stopped at the iteration limit");
    }
    Ok(())
}

fn adjust(a: AdjustArgs, log: &Log) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let train = read_prior(&a.prior_train)?;
    train.ensure_k(ds.k(), "training prior")?;
    let arg = match &a.prior_target {
        TargetSpec::Uniform => None,
        TargetSpec::Training => Some(TargetArg::Prior(train.clone())),
        TargetSpec::File(p) => Some(TargetArg::Path(p.clone())),
    };
    let target = target_prior(ds.space(), a.prior_target.mode(), arg)?;
    let spec = AdjustmentSpec::new(train, target, a.tau)?;
    let mut table = adjusted_table(&ds, a.branch.into(), &spec)?;
    table.extras.push(("dataset".into(), dataset_hash(&ds)));
    write_table(&a.out, &table)?;
    log.say(&format!(
        "wrote {} adjusted rows to {}",
        table.rows.len(),
        a.out.display()
    ));
    Ok(())
}

fn recorded_tau(table: &relbias_core::io::LogitTable, path: &Path) -> Result<f64> {
    match table.extra("tau") {
        Some(t) => t
            .parse()
            .with_context(|| format!("{}: bad tau in header: {t:?}", path.display())),
        None => Ok(1.0),
    }
}

fn ensemble(a: EnsembleArgs, log: &Log) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let zs = read_table(&a.adjusted_zs)?;
    let sg = read_table(&a.adjusted_sg)?;
    let tau_zs = match a.tau_zs {
        Some(t) => t,
        None => recorded_tau(&zs, &a.adjusted_zs)?,
    };
    let tau_sg = match a.tau_sg {
        Some(t) => t,
        None => recorded_tau(&sg, &a.adjusted_sg)?,
    };
    let outputs = ensemble_from_tables(&ds, &zs, &sg, tau_zs, tau_sg, a.scale)?;
    let extras = vec![
        ("predictions".to_string(), "ensemble".to_string()),
        ("scale".to_string(), format_float(a.scale)),
        ("tool".to_string(), tool_version()),
        ("dataset".to_string(), dataset_hash(&ds)),
    ];
    write_table(&a.out, &probability_table(&ds, &outputs, extras))?;
    log.say(&format!(
        "wrote {} fused rows to {}",
        outputs.len(),
        a.out.display()
    ));
    Ok(())
}

fn eval(a: EvalArgs, log: &Log) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let table = read_table(&a.pred)?;
    let ds_hash = dataset_hash(&ds);
    if let Some(h) = table.extra("dataset") {
        if h != ds_hash && !a.allow_hash_mismatch {
            bail!(
                "{} was produced from a different dataset (hash {h}, manifest has {ds_hash}); \
                 pass --allow-hash-mismatch to score it anyway",
                a.pred.display()
            );
        }
    }
    let preds = Predictions::from_table(&table)?;
    let class_counts: Vec<f64> = match &a.bucket_prior {
        Some(p) => {
            let prior: PriorDistribution = read_prior(p)?;
            prior.ensure_k(ds.k(), "bucket prior")?;
            prior.probs().to_vec()
        }
        None => ds.label_counts()[1..].iter().map(|&c| c as f64).collect(),
    };
    let mut opts = SplitOptions::new(a.cutoffs.clone());
    opts.graph = graph_from_flag(a.no_graph_constraint);
    opts.splits = a.splits.clone().unwrap_or_else(|| default_splits(&ds));
    opts.buckets = a.buckets;
    opts.class_counts = Some(class_counts);
    let metrics = split_report(&preds, &ds, &opts)?;
    metrics.validate()?;

    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("manifest".to_string(), a.manifest.display().to_string());
    inputs.insert("predictions".to_string(), a.pred.display().to_string());
    if let Some(p) = &a.bucket_prior {
        inputs.insert("bucket_prior".to_string(), p.display().to_string());
    }
    let mut settings = std::collections::BTreeMap::new();
    settings.insert("cutoffs".to_string(), json!(a.cutoffs));
    let report = ReportFile {
        tool: tool_version(),
        config_hash: json_hash(&(&a.cutoffs, &opts.splits, a.buckets, opts.graph)),
        dataset_hash: ds_hash,
        predictions: table.extra("predictions").unwrap_or("unknown").to_string(),
        inputs,
        settings,
        graph_constraint: opts.graph,
        metrics,
    };
    write_json(&a.out, &report)?;
    print_summary(&report);
    log.say(&format!("wrote {}", a.out.display()));
    Ok(())
}

fn print_summary(r: &ReportFile) {
    let m = &r.metrics;
    for (k, v) in &m.recall_at {
        println!("R@{k}\t{:.1}", v * 100.0);
    }
    for (k, v) in &m.mrecall_at {
        println!("mR@{k}\t{:.1}", v * 100.0);
    }
    println!("Acc\t{:.1}", m.acc * 100.0);
    println!("mAcc\t{:.1}", m.macc * 100.0);
}

fn pipeline(
    a: PipelineArgs,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    log: &Log,
) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = a.manifest {
        cfg.manifest = m;
    }
    if cfg.manifest.as_os_str().is_empty() {
        bail!("no manifest: pass --manifest or a --config that names one");
    }
    if a.estimate_manifest.is_some() {
        cfg.estimate_manifest = a.estimate_manifest;
    }
    if a.prior_sg.is_some() {
        cfg.prior_sg = a.prior_sg;
    }
    if let Some(t) = a.target {
        cfg.target = t;
    }
    if let Some(t) = a.tau_zs {
        cfg.tau_zs = t;
    }
    if let Some(t) = a.tau_sg {
        cfg.tau_sg = t;
    }
    if let Some(s) = a.scale {
        cfg.scale = s;
    }
    if let Some(c) = a.cutoffs {
        cfg.cutoffs = c;
    }
    if a.no_graph_constraint {
        cfg.graph_constraint = graph_from_flag(true);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let outcome = run_pipeline(&cfg, &|m| log.say(m))?;
    if outcome.cache_hit {
        log.say("zero-shot prior: cache hit");
    }
    print!(
        "{}",
        diff_reports(&outcome.baseline.metrics, &outcome.report.metrics)?
    );
    Ok(())
}

fn diff(a: DiffArgs) -> Result<()> {
    let ra = read_report(&a.a)?;
    let rb = read_report(&a.b)?;
    print!("{}", diff_reports(&ra.metrics, &rb.metrics)?);
    Ok(())
}
