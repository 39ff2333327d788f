//! On-disk formats: logit/probability tables (TSV), priors and manifests
//! (JSON), and training-triplet inventories (TSV).
//!
//! Table layout:
//!
//! ```text
//! #relbias-logits v1<TAB>k=<int><TAB>background=<0|1>[<TAB>key=value ...]
//! sample_id<TAB>image_id<TAB>subject_class<TAB>object_class<TAB>gt_label<TAB>l0<TAB>...
//! <rows>
//! ```
//!
//! Value column `l<r>` holds label `r`, so background=1 tables run `l0..lk`
//! and background=0 tables run `l1..lk`. Floats are written with 17
//! significant digits, which round-trips every `f64` exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    Dataset, PriorDistribution, PriorSource, RelationLabelSpace, RelationSample, Triplet,
    TripletInventory,
};
use crate::error::{RelbiasError, Result};

pub const TABLE_MAGIC: &str = "#relbias-logits v1";
const KEY_COLUMNS: [&str; 5] = [
    "sample_id",
    "image_id",
    "subject_class",
    "object_class",
    "gt_label",
];

/// What the value columns of a table hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableValues {
    Logits,
    Probs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub sample_id: String,
    pub image_id: String,
    pub subject_class: u32,
    pub object_class: u32,
    pub gt_label: usize,
    pub values: Vec<f64>,
}

/// A logit or probability table as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    pub k: usize,
    /// Whether column `l0` (background) is present.
    pub background: bool,
    pub values: TableValues,
    /// Additional `key=value` header fields, kept in order.
    pub extras: Vec<(String, String)>,
    pub rows: Vec<TableRow>,
}

impl LogitTable {
    pub fn new(k: usize, background: bool, values: TableValues) -> Self {
        Self {
            k,
            background,
            values,
            extras: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        if self.background {
            self.k + 1
        } else {
            self.k
        }
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_row(&mut self, sample: &RelationSample, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.width());
        self.rows.push(TableRow {
            sample_id: sample.sample_id.clone(),
            image_id: sample.image_id.clone(),
            subject_class: sample.subject_class,
            object_class: sample.object_class,
            gt_label: sample.gt_label,
            values,
        });
    }

    /// Rows keyed by sample id. Fails on duplicates.
    pub fn index(&self) -> Result<HashMap<&str, &TableRow>> {
        let mut map = HashMap::with_capacity(self.rows.len());
        for row in &self.rows {
            if map.insert(row.sample_id.as_str(), row).is_some() {
                return Err(RelbiasError::DuplicateSample(row.sample_id.clone()));
            }
        }
        Ok(map)
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(64 + self.rows.len() * (40 + 24 * self.width()));
        out.push_str(TABLE_MAGIC);
        let _ = write!(
            out,
            "\tk={}\tbackground={}",
            self.k,
            u8::from(self.background)
        );
        if self.values == TableValues::Probs {
            out.push_str("\tvalues=probs");
        }
        for (key, value) in &self.extras {
            let _ = write!(out, "\t{key}={value}");
        }
        out.push('\n');
        out.push_str(&KEY_COLUMNS.join("\t"));
        let first = if self.background { 0 } else { 1 };
        for r in first..=self.k {
            let _ = write!(out, "\tl{r}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                row.sample_id, row.image_id, row.subject_class, row.object_class, row.gt_label
            );
            for v in &row.values {
                out.push('\t');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| RelbiasError::parse(path, 1, "empty file"))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(TABLE_MAGIC) {
            return Err(RelbiasError::parse(
                path,
                1,
                format!("expected header starting with {TABLE_MAGIC:?}"),
            ));
        }
        let mut k = None;
        let mut background = None;
        let mut values = TableValues::Logits;
        let mut extras = Vec::new();
        for field in fields {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                RelbiasError::parse(path, 1, format!("malformed header field {field:?}"))
            })?;
            match key {
                "k" => {
                    k = Some(value.parse::<usize>().map_err(|_| {
                        RelbiasError::parse(path, 1, format!("invalid k {value:?}"))
                    })?)
                }
                "background" => {
                    background = Some(match value {
                        "0" => false,
                        "1" => true,
                        _ => {
                            return Err(RelbiasError::parse(
                                path,
                                1,
                                format!("background must be 0 or 1, got {value:?}"),
                            ))
                        }
                    })
                }
                "values" => {
                    values = match value {
                        "logits" => TableValues::Logits,
                        "probs" => TableValues::Probs,
                        _ => {
                            return Err(RelbiasError::parse(
                                path,
                                1,
                                format!("unknown values kind {value:?}"),
                            ))
                        }
                    }
                }
                _ => extras.push((key.to_string(), value.to_string())),
            }
        }
        let k = k.ok_or_else(|| RelbiasError::parse(path, 1, "header lacks k="))?;
        let background =
            background.ok_or_else(|| RelbiasError::parse(path, 1, "header lacks background="))?;
        let mut table = LogitTable {
            k,
            background,
            values,
            extras,
            rows: Vec::new(),
        };
        let width = table.width();

        let (_, columns) = lines
            .next()
            .ok_or_else(|| RelbiasError::parse(path, 2, "missing column header"))?;
        let found = columns.split('\t').count();
        if found != KEY_COLUMNS.len() + width {
            return Err(RelbiasError::Dimension {
                expected: width,
                found: found.saturating_sub(KEY_COLUMNS.len()),
                context: format!("value columns in {}", path.display()),
            });
        }

        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != KEY_COLUMNS.len() + width {
                return Err(RelbiasError::Dimension {
                    expected: width,
                    found: cells.len().saturating_sub(KEY_COLUMNS.len()),
                    context: format!("row width at {}:{lineno}", path.display()),
                });
            }
            let int = |idx: usize| -> Result<u64> {
                cells[idx].parse::<u64>().map_err(|_| {
                    RelbiasError::parse(
                        path,
                        lineno,
                        format!(
                            "{} must be a nonnegative integer, got {:?}",
                            KEY_COLUMNS[idx], cells[idx]
                        ),
                    )
                })
            };
            let sample_id = cells[0].to_string();
            let subject_class = u32::try_from(int(2)?)
                .map_err(|_| RelbiasError::parse(path, lineno, "subject_class out of range"))?;
            let object_class = u32::try_from(int(3)?)
                .map_err(|_| RelbiasError::parse(path, lineno, "object_class out of range"))?;
            let gt_label = int(4)? as usize;
            let mut values = Vec::with_capacity(width);
            for cell in &cells[KEY_COLUMNS.len()..] {
                let v: f64 = cell.parse().map_err(|_| {
                    RelbiasError::parse(path, lineno, format!("invalid number {cell:?}"))
                })?;
                if !v.is_finite() {
                    return Err(RelbiasError::NonFinite { sample_id });
                }
                values.push(v);
            }
            table.rows.push(TableRow {
                sample_id,
                image_id: cells[1].to_string(),
                subject_class,
                object_class,
                gt_label,
                values,
            });
        }
        Ok(table)
    }
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn read_table(path: &Path) -> Result<LogitTable> {
    let text = fs::read_to_string(path).map_err(|e| RelbiasError::io(path, e))?;
    LogitTable::parse(&text, path)
}

pub fn write_table(path: &Path, table: &LogitTable) -> Result<()> {
    write_text(path, &table.render())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| RelbiasError::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| RelbiasError::io(path, e))
}

/// Dataset manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub zs_logits: PathBuf,
    pub sg_logits: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_triplets: Option<PathBuf>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    fn resolve(&self, base: &Path) -> Manifest {
        let join = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        Manifest {
            zs_logits: join(&self.zs_logits),
            sg_logits: join(&self.sg_logits),
            class_names: self.class_names.clone(),
            train_triplets: self.train_triplets.as_deref().map(join),
        }
    }

    /// Paths with relative entries resolved against `manifest_path`'s directory.
    pub fn resolved(&self, manifest_path: &Path) -> Manifest {
        self.resolve(manifest_path.parent().unwrap_or(Path::new("")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| RelbiasError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| RelbiasError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value))
}

/// Loads the dataset a manifest describes, joining the two logit tables on
/// `sample_id`. Samples come back in canonical (ascending `sample_id`) order.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?.resolved(manifest_path);
    let zs = read_table(&manifest.zs_logits)?;
    let sg = read_table(&manifest.sg_logits)?;
    let inventory = manifest
        .train_triplets
        .as_deref()
        .map(read_triplets)
        .transpose()?;
    join_tables(
        &zs,
        &sg,
        manifest.class_names.clone(),
        inventory,
        (&manifest.zs_logits, &manifest.sg_logits),
    )
}

fn join_tables(
    zs: &LogitTable,
    sg: &LogitTable,
    class_names: Option<Vec<String>>,
    inventory: Option<TripletInventory>,
    (zs_path, sg_path): (&Path, &Path),
) -> Result<Dataset> {
    if zs.background {
        return Err(RelbiasError::parse(
            zs_path,
            1,
            "zs table must have background=0",
        ));
    }
    if !sg.background {
        return Err(RelbiasError::parse(
            sg_path,
            1,
            "sg table must have background=1",
        ));
    }
    if zs.values != TableValues::Logits || sg.values != TableValues::Logits {
        return Err(RelbiasError::InvalidArgument(
            "dataset tables must hold logits, not probabilities".into(),
        ));
    }
    if zs.k != sg.k {
        return Err(RelbiasError::Dimension {
            expected: zs.k,
            found: sg.k,
            context: format!("k of {} vs {}", zs_path.display(), sg_path.display()),
        });
    }
    let space = RelationLabelSpace::new(zs.k, class_names)?;
    let zs_rows = zs.index()?;
    let sg_rows = sg.index()?;
    if let Some(orphan) = sg
        .rows
        .iter()
        .find(|r| !zs_rows.contains_key(r.sample_id.as_str()))
    {
        return Err(RelbiasError::Orphan {
            sample_id: orphan.sample_id.clone(),
            present: sg_path.display().to_string(),
            missing: zs_path.display().to_string(),
        });
    }
    let mut samples = Vec::with_capacity(zs.rows.len());
    for z in &zs.rows {
        let s = sg_rows
            .get(z.sample_id.as_str())
            .ok_or_else(|| RelbiasError::Orphan {
                sample_id: z.sample_id.clone(),
                present: zs_path.display().to_string(),
                missing: sg_path.display().to_string(),
            })?;
        if (&z.image_id, z.subject_class, z.object_class, z.gt_label)
            != (&s.image_id, s.subject_class, s.object_class, s.gt_label)
        {
            return Err(RelbiasError::Sample {
                sample_id: z.sample_id.clone(),
                message: "zs and sg tables disagree on image, classes or label".into(),
            });
        }
        samples.push(RelationSample {
            sample_id: z.sample_id.clone(),
            image_id: z.image_id.clone(),
            subject_class: z.subject_class,
            object_class: z.object_class,
            gt_label: z.gt_label,
            zs_logits: z.values.clone(),
            sg_logits: s.values.clone(),
        });
    }
    Dataset::canonical(space, samples, inventory)
}

/// Zero-shot branch table (background=0) in dataset order.
pub fn zs_table(ds: &Dataset) -> LogitTable {
    let mut table = LogitTable::new(ds.k(), false, TableValues::Logits);
    for s in ds.samples() {
        table.push_row(s, s.zs_logits.clone());
    }
    table
}

/// Task branch table (background=1) in dataset order.
pub fn sg_table(ds: &Dataset) -> LogitTable {
    let mut table = LogitTable::new(ds.k(), true, TableValues::Logits);
    for s in ds.samples() {
        table.push_row(s, s.sg_logits.clone());
    }
    table
}

pub const ZS_FILE: &str = "zs_logits.tsv";
pub const SG_FILE: &str = "sg_logits.tsv";
pub const TRIPLETS_FILE: &str = "train_triplets.tsv";

/// Writes `manifest_name` plus its tables into `dir` using fixed file names
/// prefixed by `prefix`. Returns the manifest path.
pub fn write_dataset(
    ds: &Dataset,
    dir: &Path,
    prefix: &str,
    manifest_name: &str,
) -> Result<PathBuf> {
    let zs_name = format!("{prefix}{ZS_FILE}");
    let sg_name = format!("{prefix}{SG_FILE}");
    write_table(&dir.join(&zs_name), &zs_table(ds))?;
    write_table(&dir.join(&sg_name), &sg_table(ds))?;
    let train_triplets = match ds.inventory() {
        Some(inv) => {
            let name = format!("{prefix}{TRIPLETS_FILE}");
            write_triplets(&dir.join(&name), inv)?;
            Some(PathBuf::from(name))
        }
        None => None,
    };
    let manifest = Manifest {
        zs_logits: zs_name.into(),
        sg_logits: sg_name.into(),
        class_names: ds.space().class_names().map(<[String]>::to_vec),
        train_triplets,
    };
    let path = dir.join(manifest_name);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Prior file contents. Unknown fields (provenance) are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub k: usize,
    pub probs: Vec<f64>,
    pub source: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl PriorFile {
    pub fn from_prior(prior: &PriorDistribution) -> Self {
        Self {
            k: prior.k(),
            probs: prior.probs().to_vec(),
            source: prior.source().to_string(),
            extra: BTreeMap::new(),
        }
    }

    pub fn to_prior(&self) -> Result<PriorDistribution> {
        if self.k != self.probs.len() {
            return Err(RelbiasError::Dimension {
                expected: self.k,
                found: self.probs.len(),
                context: "prior file probs".into(),
            });
        }
        let source = match self.source.as_str() {
            "counted" => PriorSource::Counted,
            "estimated" => PriorSource::Estimated,
            "uniform" => PriorSource::Uniform,
            _ => PriorSource::File,
        };
        PriorDistribution::new(self.probs.clone(), source)
    }
}

pub fn read_prior(path: &Path) -> Result<PriorDistribution> {
    read_json::<PriorFile>(path)?.to_prior()
}

pub fn read_prior_file(path: &Path) -> Result<PriorFile> {
    read_json(path)
}

pub fn write_prior(path: &Path, prior: &PriorDistribution) -> Result<()> {
    write_json(path, &PriorFile::from_prior(prior))
}

pub fn read_triplets(path: &Path) -> Result<TripletInventory> {
    let text = fs::read_to_string(path).map_err(|e| RelbiasError::io(path, e))?;
    let mut inventory = TripletInventory::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let parsed = match cells.as_slice() {
            [s, r, o] => s.parse().ok().zip(r.parse().ok()).zip(o.parse().ok()).map(
                |((subject, relation), object)| Triplet {
                    subject,
                    relation,
                    object,
                },
            ),
            _ => None,
        };
        match parsed {
            Some(t) => {
                inventory.insert(t);
            }
            // Allow a column-name header line.
            None if i == 0 && cells.first() == Some(&"subject_class") => {}
            None => {
                return Err(RelbiasError::parse(
                    path,
                    i + 1,
                    "expected subject_class<TAB>relation<TAB>object_class",
                ))
            }
        }
    }
    Ok(inventory)
}

pub fn write_triplets(path: &Path, inventory: &TripletInventory) -> Result<()> {
    let mut out = String::from("subject_class\trelation\tobject_class\n");
    for t in inventory {
        let _ = writeln!(out, "{}\t{}\t{}", t.subject, t.relation, t.object);
    }
    write_text(path, &out)
}
