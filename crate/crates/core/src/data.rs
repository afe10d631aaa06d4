//! Tabular datasets: schema-driven CSV featurization, seeded splits and
//! batches, neutralization-pair sampling, and a planted-bias generator.
//!
//! Group index 0 is the unprivileged group; the schema's privileged value maps
//! to group 1. Labels are binary with the desired outcome at index 1.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Category used for missing categorical values.
pub const MISSING_CATEGORY: &str = "<missing>";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    /// Ground-truth sensitive group.
    pub a: Option<usize>,
    /// Proxy group inferred from a bias-amplified model.
    pub proxy: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_groups: usize,
    pub desired_label: usize,
    pub feature_names: Vec<String>,
    pub encoding: FeatureEncoding,
}

/// Category order and standardization statistics for re-encoding new data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureEncoding {
    pub categories: BTreeMap<String, Vec<String>>,
    /// `(feature index, mean, std)` for every standardized column.
    pub standardization: Vec<(usize, f64, f64)>,
    /// Feature indices of continuous columns.
    pub continuous: Vec<usize>,
}

impl FeatureEncoding {
    pub fn to_sidecar(&self, feature_names: &[String]) -> String {
        let mut out = String::new();
        for (col, cats) in &self.categories {
            for (i, c) in cats.iter().enumerate() {
                out.push_str(&format!("category.{col}.{i}={c}\n"));
            }
        }
        for &(idx, mean, std) in &self.standardization {
            out.push_str(&format!("standardize.{}={mean:e},{std:e}\n", feature_names[idx]));
        }
        out
    }

    /// Reads the category section of a sidecar written by [`to_sidecar`](Self::to_sidecar).
    pub fn categories_from_sidecar(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
        let mut cats: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let Some(rest) = line.strip_prefix("category.") else { continue };
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("bad sidecar line `{line}`")))?;
            let (col, idx) = key
                .rsplit_once('.')
                .ok_or_else(|| Error::Input(format!("bad sidecar key `{key}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Input(format!("bad category index in `{key}`")))?;
            cats.entry(col.to_string()).or_default().insert(idx, value.to_string());
        }
        Ok(cats
            .into_iter()
            .map(|(k, v)| (k, v.into_values().collect()))
            .collect())
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(self.feature_names.len(), |s| s.x.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn has_sensitive(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.a.is_some())
    }

    /// Ground-truth groups of `indices`, if every one of them is annotated.
    pub fn groups_of(&self, indices: &[usize]) -> Option<Vec<usize>> {
        indices.iter().map(|&i| self.samples[i].a).collect()
    }

    pub fn proxies_of(&self, indices: &[usize]) -> Option<Vec<usize>> {
        indices.iter().map(|&i| self.samples[i].proxy).collect()
    }

    /// Attaches proxy groups; `a` is left untouched.
    pub fn set_proxy(&mut self, indices: &[usize], proxy: &[usize]) -> Result<()> {
        if indices.len() != proxy.len() {
            return Err(Error::Shape {
                expected: indices.len(),
                actual: proxy.len(),
            });
        }
        for (&i, &p) in indices.iter().zip(proxy) {
            if p >= self.num_groups {
                return Err(Error::Input(format!("proxy group {p} out of range")));
            }
            self.samples[i].proxy = Some(p);
        }
        Ok(())
    }

    /// Standardizes continuous features with statistics from `train` only.
    pub fn standardize(&mut self, train: &[usize]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Input("cannot standardize on an empty training split".into()));
        }
        let mut stats = Vec::new();
        let n = train.len() as f64;
        for &f in &self.encoding.continuous {
            let mean = train.iter().map(|&i| self.samples[i].x[f]).sum::<f64>() / n;
            let var = train.iter().map(|&i| (self.samples[i].x[f] - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            stats.push((f, mean, std));
        }
        for s in &mut self.samples {
            for &(f, mean, std) in &stats {
                s.x[f] = (s.x[f] - mean) / std;
            }
        }
        self.encoding.standardization = stats;
        Ok(())
    }

    /// Writes the encoded features as CSV (`f_*` columns, then `y`, `a`, `proxy`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.feature_names.clone();
        header.extend(["y", "a", "proxy"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            row.push(s.y.to_string());
            row.push(s.a.map(|v| v.to_string()).unwrap_or_default());
            row.push(s.proxy.map(|v| v.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Categorical,
    Continuous,
    Label,
    Sensitive,
    Ignore,
}

impl std::str::FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "categorical" => Self::Categorical,
            "continuous" => Self::Continuous,
            "label" => Self::Label,
            "sensitive" => Self::Sensitive,
            "ignore" => Self::Ignore,
            other => return Err(Error::config(format!("unknown column kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSchema {
    pub columns: BTreeMap<String, ColumnKind>,
    pub label: String,
    /// Label value of the favorable outcome.
    pub desired: String,
    pub sensitive: Option<String>,
    pub privileged: Option<String>,
    pub missing: String,
    /// One-hot encode the sensitive column as a feature as well.
    pub sensitive_is_feature: bool,
    /// When set, ingestion fails unless the encoded width matches.
    pub expected_dim: Option<usize>,
    /// Column names for files without a header row.
    pub header: Option<Vec<String>>,
    /// Drop rows with a missing value in any used column instead of
    /// encoding it as its own category.
    pub drop_incomplete: bool,
}

impl DatasetSchema {
    /// Parses the flat `key=value` schema format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = BTreeMap::new();
        let mut fields: HashMap<&str, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("schema line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(rest) = key.strip_prefix("column.") {
                let name = rest
                    .strip_suffix(".kind")
                    .ok_or_else(|| Error::config(format!("schema key `{key}`: expected column.<name>.kind")))?;
                columns.insert(name.to_string(), value.parse()?);
                continue;
            }
            match key {
                "label" | "desired" | "sensitive" | "privileged" | "missing" | "sensitive_is_feature"
                | "expected_dim" | "header" | "drop_incomplete" => {
                    fields.insert(key, value.to_string());
                }
                other => return Err(Error::config(format!("unknown schema key `{other}`"))),
            }
        }

        let labels: Vec<&String> = columns
            .iter()
            .filter(|(_, k)| **k == ColumnKind::Label)
            .map(|(n, _)| n)
            .collect();
        let label = match (fields.remove("label"), labels.as_slice()) {
            (Some(l), [only]) if *only == &l => l,
            (Some(l), []) => {
                columns.insert(l.clone(), ColumnKind::Label);
                l
            }
            (None, [only]) => (*only).clone(),
            _ => return Err(Error::config("schema needs exactly one label column")),
        };
        let sensitive_cols: Vec<String> = columns
            .iter()
            .filter(|(_, k)| **k == ColumnKind::Sensitive)
            .map(|(n, _)| n.clone())
            .collect();
        let sensitive = match (fields.remove("sensitive"), sensitive_cols.as_slice()) {
            (None, []) => None,
            (None, [only]) => Some(only.clone()),
            (Some(s), []) => {
                columns.insert(s.clone(), ColumnKind::Sensitive);
                Some(s)
            }
            (Some(s), [only]) if *only == s => Some(s),
            _ => return Err(Error::config("schema allows at most one sensitive column")),
        };
        let privileged = fields.remove("privileged");
        if sensitive.is_some() && privileged.is_none() {
            return Err(Error::config("schema names a sensitive column but no `privileged=` value"));
        }
        let desired = fields
            .remove("desired")
            .ok_or_else(|| Error::config("schema is missing `desired=`"))?;
        let mut flag = |key: &str| match fields.remove(key).as_deref() {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(v) => Err(Error::config(format!("{key}: expected true|false, got `{v}`"))),
        };
        let sensitive_is_feature = flag("sensitive_is_feature")?;
        let drop_incomplete = flag("drop_incomplete")?;
        let expected_dim = fields
            .remove("expected_dim")
            .map(|v| v.parse().map_err(|_| Error::config(format!("expected_dim: `{v}` is not an integer"))))
            .transpose()?;
        Ok(Self {
            columns,
            label,
            desired,
            sensitive,
            privileged,
            missing: fields.remove("missing").unwrap_or_else(|| "?".to_string()),
            sensitive_is_feature,
            expected_dim,
            header: fields
                .remove("header")
                .map(|h| h.split(',').map(|c| c.trim().to_string()).collect()),
            drop_incomplete,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn normalize_label(v: &str) -> &str {
    v.trim().trim_end_matches('.')
}

enum ColumnPlan {
    Skip,
    Categorical { col: usize, name: String },
    Continuous { col: usize, name: String },
}

/// Reads a CSV with a header row and featurizes it according to `schema`.
///
/// Categoricals are one-hot encoded in order of first appearance (or the
/// order in `categories`, when given); continuous columns are left raw until
/// [`Dataset::standardize`] is called with the training split.
pub fn ingest_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    ingest_csv_with(path, schema, None)
}

pub fn ingest_csv_with(
    path: &Path,
    schema: &DatasetSchema,
    categories: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(schema.header.is_none())
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = match &schema.header {
        Some(h) => h.clone(),
        None => reader.headers()?.iter().map(str::to_string).collect(),
    };
    for name in schema.columns.keys() {
        if !header.contains(name) {
            return Err(Error::Input(format!("schema column `{name}` not found in {}", path.display())));
        }
    }
    let index_of = |name: &str| header.iter().position(|h| h == name).unwrap();
    let label_col = index_of(&schema.label);
    let sensitive_col = schema.sensitive.as_deref().map(index_of);

    let mut plans = Vec::new();
    for (col, name) in header.iter().enumerate() {
        let kind = *schema
            .columns
            .get(name)
            .ok_or_else(|| Error::Input(format!("column `{name}` has no kind in the schema")))?;
        plans.push(match kind {
            ColumnKind::Categorical => ColumnPlan::Categorical { col, name: name.clone() },
            ColumnKind::Sensitive if schema.sensitive_is_feature => ColumnPlan::Categorical { col, name: name.clone() },
            ColumnKind::Continuous => ColumnPlan::Continuous { col, name: name.clone() },
            _ => ColumnPlan::Skip,
        });
    }

    let fixed = categories.is_some();
    let mut cats: BTreeMap<String, Vec<String>> = categories.cloned().unwrap_or_default();
    let mut rows: Vec<(Vec<(usize, String)>, Vec<(usize, f64)>, usize, Option<usize>)> = Vec::new();
    for (rowno, rec) in reader.records().enumerate() {
        let rec = rec?;
        let is_missing = |v: &str| v.is_empty() || v == schema.missing;
        let label_raw = rec.get(label_col).unwrap_or("");
        if is_missing(label_raw) {
            continue;
        }
        if schema.drop_incomplete {
            let used = |p: &ColumnPlan| match p {
                ColumnPlan::Skip => None,
                ColumnPlan::Categorical { col, .. } | ColumnPlan::Continuous { col, .. } => Some(*col),
            };
            let mut cols = plans.iter().filter_map(used).chain(sensitive_col);
            if cols.any(|c| is_missing(rec.get(c).unwrap_or(""))) {
                continue;
            }
        }
        let y = usize::from(normalize_label(label_raw) == normalize_label(&schema.desired));
        let a = match sensitive_col {
            Some(c) => {
                let v = rec.get(c).unwrap_or("");
                (!is_missing(v)).then(|| usize::from(Some(v) == schema.privileged.as_deref()))
            }
            None => None,
        };
        let mut cat_values = Vec::new();
        let mut num_values = Vec::new();
        for (p, plan) in plans.iter().enumerate() {
            match plan {
                ColumnPlan::Skip => {}
                ColumnPlan::Categorical { col, name } => {
                    let raw = rec.get(*col).unwrap_or("");
                    let v = if is_missing(raw) { MISSING_CATEGORY } else { raw };
                    let list = cats.entry(name.clone()).or_default();
                    if !list.iter().any(|c| c == v) {
                        if fixed {
                            return Err(Error::Input(format!("row {}: unseen category `{v}` in `{name}`", rowno + 2)));
                        }
                        list.push(v.to_string());
                    }
                    cat_values.push((p, v.to_string()));
                }
                ColumnPlan::Continuous { col, name } => {
                    let raw = rec.get(*col).unwrap_or("");
                    let v: f64 = raw.parse().map_err(|_| {
                        Error::Input(format!("row {}: column `{name}`: unparseable number `{raw}`", rowno + 2))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Input(format!("row {}: column `{name}` is not finite", rowno + 2)));
                    }
                    num_values.push((p, v));
                }
            }
        }
        rows.push((cat_values, num_values, y, a));
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no rows with a label", path.display())));
    }

    // Feature layout follows column order; each categorical expands in place.
    let mut feature_names = Vec::new();
    let mut offsets = vec![0usize; plans.len()];
    let mut continuous = Vec::new();
    for (p, plan) in plans.iter().enumerate() {
        offsets[p] = feature_names.len();
        match plan {
            ColumnPlan::Skip => {}
            ColumnPlan::Categorical { name, .. } => {
                for c in cats.get(name).map(Vec::as_slice).unwrap_or(&[]) {
                    feature_names.push(format!("{name}={c}"));
                }
            }
            ColumnPlan::Continuous { name, .. } => {
                continuous.push(feature_names.len());
                feature_names.push(name.clone());
            }
        }
    }
    let dim = feature_names.len();
    if let Some(expected) = schema.expected_dim {
        if expected != dim {
            return Err(Error::Input(format!(
                "encoded feature dimension {dim} does not match expected_dim={expected}"
            )));
        }
    }

    let samples = rows
        .into_iter()
        .map(|(cat_values, num_values, y, a)| {
            let mut x = vec![0.0; dim];
            for (p, v) in cat_values {
                let ColumnPlan::Categorical { name, .. } = &plans[p] else { unreachable!() };
                let k = cats[name].iter().position(|c| *c == v).unwrap();
                x[offsets[p] + k] = 1.0;
            }
            for (p, v) in num_values {
                x[offsets[p]] = v;
            }
            Sample { x, y, a, proxy: None }
        })
        .collect();

    let categories = plans
        .iter()
        .filter_map(|p| match p {
            ColumnPlan::Categorical { name, .. } => Some((name.clone(), cats.get(name).cloned().unwrap_or_default())),
            _ => None,
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: 2,
        num_groups: 2,
        desired_label: 1,
        feature_names,
        encoding: FeatureEncoding {
            categories,
            standardization: Vec::new(),
            continuous,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSizes {
    Counts { train: usize, valid: usize, test: usize },
    Fractions { train: f64, valid: f64, test: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

/// Disjoint train / valid / test index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into three consecutive pieces.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Partition> {
    let (train, valid, test) = match spec.sizes {
        SplitSizes::Counts { train, valid, test } => {
            if train + valid + test != n {
                return Err(Error::config(format!(
                    "split counts {train}+{valid}+{test} do not sum to dataset size {n}"
                )));
            }
            (train, valid, test)
        }
        SplitSizes::Fractions { train, valid, test } => {
            if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) || (train + valid + test - 1.0).abs() > 1e-9 {
                return Err(Error::config("split fractions must be in [0, 1] and sum to 1"));
            }
            let v = (valid * n as f64).round() as usize;
            let t = (test * n as f64).round() as usize;
            if v + t > n {
                return Err(Error::config("split fractions exceed dataset size"));
            }
            (n - v - t, v, t)
        }
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(spec.seed, rng::SHUFFLE));
    let test_part = idx.split_off(train + valid);
    let valid_part = idx.split_off(train);
    debug_assert_eq!(test_part.len(), test);
    Ok(Partition {
        train: idx,
        valid: valid_part,
        test: test_part,
    })
}

/// Seeded per-epoch shuffle of `indices` into batches; the last short batch is kept.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config(format!("batch size must be >= 2, got {batch_size}")));
    }
    let mut order = indices.to_vec();
    let mut rng = rng::from_seed(rng::indexed_seed(rng::derive_seed(seed, rng::SHUFFLE), epoch as u64));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Picks a partner for `anchor` uniformly among batch members with the same
/// label and a different group. `labels` and `groups` are indexed by dataset
/// index.
pub fn sample_pair(batch: &[usize], anchor: usize, labels: &[usize], groups: &[usize], rng: &mut Rng) -> Option<usize> {
    let candidates: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&j| j != anchor && labels[j] == labels[anchor] && groups[j] != groups[anchor])
        .collect();
    candidates.choose(rng).copied()
}

/// Two-group binary-label data with a planted correlation between group and label.
///
/// `x = group_shift * s_a * u_g + label_shift * s_y * u_y + noise * e`, where
/// `s = ±1`, `u_g` is the unit vector on the first half of the coordinates and
/// `u_y` the unit vector on the rest, and `e` is standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    /// P(y = 1 | a = g) for g = 0, 1.
    pub group_rates: [f64; 2],
    /// Fraction of samples in group 0.
    pub group_balance: f64,
    pub noise: f64,
    pub group_shift: f64,
    pub label_shift: f64,
    /// Encode the label as an XOR of two halves of the label block, so that
    /// only a nonlinear model can read it and the group block is the easy cue.
    pub xor_label: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 3000,
            d: 8,
            group_rates: [0.2, 0.6],
            group_balance: 0.5,
            noise: 1.0,
            group_shift: 2.5,
            label_shift: 1.5,
            xor_label: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.group_rates.iter().all(|r| unit(*r)) || !unit(self.group_balance) {
            return Err(Error::config("synthetic rates and balance must lie in [0, 1]"));
        }
        if self.d < 2 {
            return Err(Error::config("synthetic feature dimension must be >= 2"));
        }
        if self.xor_label && self.d < 4 {
            return Err(Error::config("XOR synthetic labels need d >= 4"));
        }
        if self.n == 0 {
            return Err(Error::config("synthetic sample count must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synthetic noise must be >= 0"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "synthetic");
    let group_dims = spec.d / 2;
    let label_dims = spec.d - group_dims;
    let g_unit = spec.group_shift / (group_dims as f64).sqrt();
    let y_unit = spec.label_shift / (label_dims as f64).sqrt();
    let samples = (0..spec.n)
        .map(|_| {
            let a = usize::from(rng.random::<f64>() >= spec.group_balance);
            let y = usize::from(rng.random::<f64>() < spec.group_rates[a]);
            let sa = if a == 1 { 1.0 } else { -1.0 };
            let sy = if y == 1 { 1.0 } else { -1.0 };
            let flip = if spec.xor_label && rng.random::<bool>() { -1.0 } else { 1.0 };
            let x = (0..spec.d)
                .map(|k| {
                    let mean = if k < group_dims {
                        sa * g_unit
                    } else if !spec.xor_label {
                        sy * y_unit
                    } else if k < group_dims + label_dims / 2 {
                        flip * y_unit
                    } else {
                        flip * sy * y_unit
                    };
                    let e: f64 = StandardNormal.sample(&mut rng);
                    mean + spec.noise * e
                })
                .collect();
            Sample {
                x,
                y,
                a: Some(a),
                proxy: None,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: 2,
        num_groups: 2,
        desired_label: 1,
        feature_names: (0..spec.d).map(|k| format!("x{k}")).collect(),
        encoding: FeatureEncoding {
            continuous: (0..spec.d).collect(),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const SCHEMA: &str = "\
# toy
column.color.kind=categorical
column.size.kind=continuous
column.income.kind=label
column.sex.kind=sensitive
desired=high
privileged=M
";

    #[test]
    fn one_hot_plus_numeric() {
        let csv = write_tmp("color,size,income,sex\nA,1.0,high,M\nB,2.0,low,F\nA,3.0,low,M\n");
        let schema = DatasetSchema::parse(SCHEMA).unwrap();
        let ds = ingest_csv(csv.path(), &schema).unwrap();
        assert_eq!(ds.feature_dim(), 3);
        assert_eq!(ds.feature_names, vec!["color=A", "color=B", "size"]);
        assert_eq!(ds.samples[1].x, vec![0.0, 1.0, 2.0]);
        assert_eq!(ds.labels(), vec![1, 0, 0]);
        assert_eq!(ds.groups_of(&[0, 1, 2]), Some(vec![1, 0, 1]));
    }

    #[test]
    fn written_synthetic_data_reingests_identically() {
        let ds = generate_synthetic(&SyntheticSpec { n: 50, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let mut schema: String = ds.feature_names.iter().map(|f| format!("column.{f}.kind=continuous\n")).collect();
        schema.push_str("column.y.kind=label\ndesired=1\ncolumn.a.kind=sensitive\nprivileged=1\ncolumn.proxy.kind=ignore\n");
        let back = ingest_csv(&path, &DatasetSchema::parse(&schema).unwrap()).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.feature_names, ds.feature_names);
        assert_eq!(back.encoding, ds.encoding);
    }

    #[test]
    fn headerless_file_and_incomplete_rows() {
        let csv = write_tmp("A,1.0,high.,M\n?,2.0,low.,F\nB,?,low.,M\nB,4.0,high,?\n");
        let text = format!("{SCHEMA}header=color,size,income,sex\ndrop_incomplete=true\n");
        let ds = ingest_csv(csv.path(), &DatasetSchema::parse(&text).unwrap()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), vec![1]);
        let text = format!("{SCHEMA}header=color,size,income,sex\n");
        let schema = DatasetSchema::parse(&text).unwrap();
        // `?` in a continuous column is still an error without dropping.
        assert!(ingest_csv(csv.path(), &schema).is_err());
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let csv = write_tmp("color,size,income,sex\nA,1.0,high,M\nB,2.0,low,F\nA,4.0,low,M\nB,9.0,high,F\nA,-3.0,low,M\n");
        let schema = DatasetSchema::parse(SCHEMA).unwrap();
        let mut ds = ingest_csv(csv.path(), &schema).unwrap();
        let train = [0, 1, 2, 3];
        ds.standardize(&train).unwrap();
        let vals: Vec<f64> = train.iter().map(|&i| ds.samples[i].x[2]).collect();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
        // The held-out row is transformed with the same statistics.
        // train values 1, 2, 4, 9: mean 4, variance 9.5
        assert!((ds.samples[4].x[2] - (-3.0 - 4.0) / 9.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn missing_values() {
        let csv = write_tmp("color,size,income,sex\n?,1.0,high,M\nB,2.0,?,F\nA,3.0,low,?\n");
        let schema = DatasetSchema::parse(SCHEMA).unwrap();
        let ds = ingest_csv(csv.path(), &schema).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_names[0], format!("color={MISSING_CATEGORY}"));
        assert_eq!(ds.samples[1].a, None);
    }

    #[test]
    fn ingestion_errors() {
        let schema = DatasetSchema::parse(SCHEMA).unwrap();
        let csv = write_tmp("color,size,income\nA,1.0,high\n");
        assert!(ingest_csv(csv.path(), &schema).is_err());
        let csv = write_tmp("color,size,income,sex\nA,abc,high,M\n");
        assert!(ingest_csv(csv.path(), &schema).is_err());
        let csv = write_tmp("color,size,income,sex\n");
        assert!(ingest_csv(csv.path(), &schema).is_err());
        let csv = write_tmp("color,size,income,sex,extra\nA,1,high,M,9\n");
        assert!(ingest_csv(csv.path(), &schema).is_err());
        let mut wrong_dim = schema.clone();
        wrong_dim.expected_dim = Some(98);
        let csv = write_tmp("color,size,income,sex\nA,1.0,high,M\n");
        assert!(ingest_csv(csv.path(), &wrong_dim).is_err());
    }

    #[test]
    fn ingestion_is_idempotent_and_sidecar_round_trips() {
        let csv = write_tmp("color,size,income,sex\nC,1.0,high,M\nB,2.0,low,F\nA,3.0,low,M\n");
        let schema = DatasetSchema::parse(SCHEMA).unwrap();
        let a = ingest_csv(csv.path(), &schema).unwrap();
        let b = ingest_csv(csv.path(), &schema).unwrap();
        assert_eq!(a, b);
        let cats = FeatureEncoding::categories_from_sidecar(&a.encoding.to_sidecar(&a.feature_names)).unwrap();
        assert_eq!(cats["color"], vec!["C", "B", "A"]);
        let c = ingest_csv_with(csv.path(), &schema, Some(&cats)).unwrap();
        assert_eq!(a.samples, c.samples);
    }

    #[test]
    fn schema_errors() {
        assert!(DatasetSchema::parse("column.a.kind=label\ncolumn.b.kind=label\ndesired=1").is_err());
        assert!(DatasetSchema::parse("column.a.kind=label\nbogus=1\ndesired=1").is_err());
        assert!(DatasetSchema::parse("column.a.kind=weird\ndesired=1").is_err());
        assert!(DatasetSchema::parse("column.a.kind=label\ncolumn.s.kind=sensitive\ndesired=1").is_err());
        assert!(DatasetSchema::parse("column.a.kind=label\ndesired=1").is_ok());
    }

    #[test]
    fn split_cases() {
        let whole = split(
            10,
            &SplitSpec {
                sizes: SplitSizes::Counts { train: 10, valid: 0, test: 0 },
                seed: 1,
            },
        )
        .unwrap();
        let mut t = whole.train.clone();
        t.sort_unstable();
        assert_eq!(t, (0..10).collect::<Vec<_>>());
        let spec = SplitSpec {
            sizes: SplitSizes::Counts {
                train: 33120,
                valid: 3000,
                test: 9102,
            },
            seed: 3,
        };
        let p = split(45222, &spec).unwrap();
        assert_eq!((p.train.len(), p.valid.len(), p.test.len()), (33120, 3000, 9102));
        assert_eq!(p, split(45222, &spec).unwrap());
        assert!(split(45221, &spec).is_err());
        let frac = SplitSpec {
            sizes: SplitSizes::Fractions { train: 0.7, valid: 0.1, test: 0.2 },
            seed: 0,
        };
        let p = split(101, &frac).unwrap();
        assert_eq!(p.train.len() + p.valid.len() + p.test.len(), 101);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let idx: Vec<usize> = (0..10).collect();
        let b = batches(&idx, 4, 5, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(&idx, 4, 5, 0).unwrap());
        assert!(batches(&idx, 1, 5, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle() {
        let idx: Vec<usize> = (0..8).collect();
        let differ = (0..100u64)
            .filter(|&s| batches(&idx, 4, s, 0).unwrap() != batches(&idx, 4, s, 1).unwrap())
            .count();
        // Two independent shuffles of 8 coincide with probability 1/8!.
        assert!(differ >= 99, "{differ}");
    }

    #[test]
    fn pair_sampling_cases() {
        let labels = [1, 1, 0];
        let groups = [0, 1, 0];
        let mut r = rng::from_seed(0);
        for _ in 0..20 {
            assert_eq!(sample_pair(&[0, 1, 2], 0, &labels, &groups, &mut r), Some(1));
        }
        assert_eq!(sample_pair(&[0, 1, 2], 2, &labels, &groups, &mut r), None);
    }

    #[test]
    fn pair_sampling_is_uniform() {
        let labels = [1, 1, 1, 1, 1];
        let groups = [0, 1, 1, 1, 0];
        let mut r = rng::from_seed(42);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_pair(&[0, 1, 2, 3, 4], 0, &labels, &groups, &mut r).unwrap()] += 1;
        }
        assert_eq!(counts[0] + counts[4], 0);
        let p = 1.0 / 3.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in &counts[1..4] {
            assert!((*c as f64 - draws as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn synthetic_base_rates() {
        let spec = SyntheticSpec {
            n: 20_000,
            group_rates: [0.3, 0.7],
            group_balance: 0.4,
            seed: 9,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert!(ds.has_sensitive());
        let n0 = ds.samples.iter().filter(|s| s.a == Some(0)).count() as f64;
        let sd = (spec.n as f64 * 0.4 * 0.6).sqrt();
        assert!((n0 - 0.4 * spec.n as f64).abs() < 3.0 * sd);
        for g in 0..2 {
            let members: Vec<&Sample> = ds.samples.iter().filter(|s| s.a == Some(g)).collect();
            let m = members.len() as f64;
            let pos = members.iter().filter(|s| s.y == 1).count() as f64;
            let r = spec.group_rates[g];
            assert!((pos - r * m).abs() < 3.0 * (m * r * (1.0 - r)).sqrt());
        }
        assert!(generate_synthetic(&SyntheticSpec { d: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn proxy_attachment_keeps_ground_truth() {
        let mut ds = generate_synthetic(&SyntheticSpec { n: 10, ..Default::default() }).unwrap();
        let before: Vec<_> = ds.samples.iter().map(|s| s.a).collect();
        ds.set_proxy(&[0, 3], &[1, 0]).unwrap();
        assert_eq!(ds.samples[0].proxy, Some(1));
        assert_eq!(ds.samples.iter().map(|s| s.a).collect::<Vec<_>>(), before);
        assert!(ds.set_proxy(&[0], &[2]).is_err());
    }
}
