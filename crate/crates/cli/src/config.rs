//! Pipeline configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use relbias_core::adjust::TauGrid;
use relbias_core::metrics::{BucketSpec, GraphConstraint, Split};
use relbias_core::priors::TargetMode;
use relbias_core::SolverConfig;

/// Sub-seed offsets derived from the config seed.
pub const SOLVER_SEED_OFFSET: u64 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{what} not found: {path}")]
    Missing { what: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

/// Target distribution as written on the command line:
/// `uniform`, `training`, or `file:<path>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TargetSpec {
    Uniform,
    Training,
    File(PathBuf),
}

impl TargetSpec {
    pub fn mode(&self) -> TargetMode {
        match self {
            TargetSpec::Uniform => TargetMode::Uniform,
            TargetSpec::Training => TargetMode::Training,
            TargetSpec::File(_) => TargetMode::File,
        }
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Uniform => f.write_str("uniform"),
            TargetSpec::Training => f.write_str("training"),
            TargetSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for TargetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(TargetSpec::Uniform),
            "training" => Ok(TargetSpec::Training),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(TargetSpec::File(PathBuf::from(p))),
                _ => Err(format!(
                    "target must be uniform, training or file:<path>, got {s:?}"
                )),
            },
        }
    }
}

impl TryFrom<String> for TargetSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TargetSpec> for String {
    fn from(t: TargetSpec) -> String {
        t.to_string()
    }
}

/// A fixed temperature or `fit` (grid search on the estimation data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TauRepr", into = "TauRepr")]
pub enum TauSetting {
    Fixed(f64),
    Fit,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TauRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<TauRepr> for TauSetting {
    type Error = String;

    fn try_from(r: TauRepr) -> Result<Self, String> {
        match r {
            TauRepr::Number(t) => Ok(TauSetting::Fixed(t)),
            TauRepr::Word(w) => w.parse(),
        }
    }
}

impl From<TauSetting> for TauRepr {
    fn from(t: TauSetting) -> TauRepr {
        match t {
            TauSetting::Fixed(v) => TauRepr::Number(v),
            TauSetting::Fit => TauRepr::Word("fit".into()),
        }
    }
}

impl FromStr for TauSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "fit" {
            return Ok(TauSetting::Fit);
        }
        s.parse::<f64>()
            .map(TauSetting::Fixed)
            .map_err(|_| format!("tau must be a number or `fit`, got {s:?}"))
    }
}

impl Default for TauSetting {
    fn default() -> Self {
        TauSetting::Fixed(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Evaluation data.
    pub manifest: PathBuf,
    /// Data for counting the task prior and estimating the zero-shot prior;
    /// the evaluation data when absent.
    pub estimate_manifest: Option<PathBuf>,
    /// Task-branch training prior file; counted from the estimation data
    /// when absent.
    pub prior_sg: Option<PathBuf>,
    pub target: TargetSpec,
    pub solver: SolverConfig,
    pub tau_zs: TauSetting,
    pub tau_sg: TauSetting,
    pub tau_grid: TauGrid,
    pub scale: f64,
    pub cutoffs: Vec<usize>,
    pub graph_constraint: GraphConstraint,
    /// `None` reports all, the frequency buckets, and seen/unseen when the
    /// evaluation manifest lists training triplets.
    pub splits: Option<Vec<Split>>,
    pub buckets: BucketSpec,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            estimate_manifest: None,
            prior_sg: None,
            target: TargetSpec::Uniform,
            solver: SolverConfig::default(),
            tau_zs: TauSetting::default(),
            tau_sg: TauSetting::default(),
            tau_grid: TauGrid::default(),
            scale: 1.0,
            cutoffs: vec![20, 50, 100],
            graph_constraint: GraphConstraint::On,
            splits: None,
            buckets: BucketSpec::Auto,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        self.manifest = join(&self.manifest);
        self.estimate_manifest = self.estimate_manifest.as_deref().map(join);
        self.prior_sg = self.prior_sg.as_deref().map(join);
        if let TargetSpec::File(p) = &self.target {
            self.target = TargetSpec::File(join(p));
        }
        self.out_dir = join(&self.out_dir);
    }

    pub fn estimate_manifest(&self) -> &Path {
        self.estimate_manifest.as_deref().unwrap_or(&self.manifest)
    }

    /// The solver settings with the seed derived from the config seed.
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            seed: self.seed.wrapping_add(SOLVER_SEED_OFFSET),
            ..self.solver.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let exists = |what: &'static str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(ConfigError::Missing {
                    what,
                    path: p.to_path_buf(),
                })
            }
        };
        exists("manifest", &self.manifest)?;
        if let Some(p) = &self.estimate_manifest {
            exists("estimate manifest", p)?;
        }
        if let Some(p) = &self.prior_sg {
            exists("task prior file", p)?;
        }
        if let TargetSpec::File(p) = &self.target {
            exists("target prior file", p)?;
        }
        self.solver
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for tau in [self.tau_zs, self.tau_sg] {
            if let TauSetting::Fixed(t) = tau {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(ConfigError::Invalid(format!(
                        "tau must be positive, got {t}"
                    )));
                }
            }
        }
        self.tau_grid
            .values()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.cutoffs.is_empty() || self.cutoffs[0] < 1 {
            return Err(ConfigError::Invalid(
                "cutoffs must be non-empty and >= 1".into(),
            ));
        }
        if self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Invalid(format!(
                "cutoffs must be strictly ascending, got {:?}",
                self.cutoffs
            )));
        }
        Ok(())
    }

    /// Hash of everything that affects artifact contents. The output
    /// directory is left out so identical runs in different places agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        crate::provenance::json_hash(&c)
    }
}

/// Parses `20,50,100` into sorted, deduplicated cutoffs.
pub fn parse_cutoffs(s: &str) -> Result<Vec<usize>, String> {
    let mut out = s
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad cutoff {c:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn parse_splits(s: &str) -> Result<Vec<Split>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<Split>().map_err(|e| e.to_string()))
        .collect()
}

/// `auto` or `<frequent_min>,<rare_max>` training-count thresholds.
pub fn parse_buckets(s: &str) -> Result<BucketSpec, String> {
    if s == "auto" {
        return Ok(BucketSpec::Auto);
    }
    match s.split_once(',') {
        Some((f, r)) => {
            let frequent_min = f
                .trim()
                .parse()
                .map_err(|_| format!("bad threshold {f:?}"))?;
            let rare_max = r
                .trim()
                .parse()
                .map_err(|_| format!("bad threshold {r:?}"))?;
            Ok(BucketSpec::Thresholds {
                frequent_min,
                rare_max,
            })
        }
        None => Err(format!(
            "buckets must be `auto` or `<frequent_min>,<rare_max>`, got {s:?}"
        )),
    }
}
