//! Dataset construction: the correlated-Gaussian synthetic design, CSV
//! ingestion with one-hot/max-abs/row-norm preprocessing, seeded splits and
//! the plain-text dataset cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::noise::{derive_seed, stream};

/// Leading coefficients of the default true model; the rest are zero.
pub const TRUE_SUPPORT: [f64; 8] = [10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 0.5];

pub const CACHE_MAGIC: &str = "#dpsc-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// `y = +1` iff `p(y=1|x) >= 0.5`, i.e. `w'x >= 0`.
    Threshold,
    /// `y = +1` with probability `1/(1 + exp(-w'x))`.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub p: usize,
    /// AR(1) correlation: `cov(x_j, x_k) = rho^|j-k|`.
    pub rho: f64,
    /// Explicit coefficients; `None` means [`TRUE_SUPPORT`] padded with zeros.
    pub true_w: Option<Vec<f64>>,
    pub seed: u64,
    pub label_rule: LabelRule,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 11_000,
            p: 100,
            rho: 0.5,
            true_w: None,
            seed: 0,
            label_rule: LabelRule::Threshold,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "must be at least 1"));
        }
        if self.p < TRUE_SUPPORT.len() + 1 {
            return Err(Error::param(
                "p",
                format!(
                    "must be at least {} to hold the true support, got {}",
                    TRUE_SUPPORT.len() + 1,
                    self.p
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::param(
                "rho",
                format!("must lie in [0, 1), got {}", self.rho),
            ));
        }
        if let Some(w) = &self.true_w {
            if w.len() != self.p {
                return Err(Error::DimensionMismatch(format!(
                    "true_w has length {}, p = {}",
                    w.len(),
                    self.p
                )));
            }
        }
        Ok(())
    }

    pub fn true_w(&self) -> Array1<f64> {
        match &self.true_w {
            Some(w) => Array1::from(w.clone()),
            None => {
                let mut w = Array1::zeros(self.p);
                for (slot, &v) in w.iter_mut().zip(TRUE_SUPPORT.iter()) {
                    *slot = v;
                }
                w
            }
        }
    }
}

/// Lower Cholesky factor of the AR(1) correlation matrix.
fn ar1_cholesky(p: usize, rho: f64) -> Result<Array2<f64>> {
    let sigma = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::param("rho", "covariance matrix is not positive definite"))?;
    let l = chol.l();
    Ok(Array2::from_shape_fn((p, p), |(i, j)| l[(i, j)]))
}

/// Divides every row with norm above 1 by its norm. Returns how many rows changed.
pub fn cap_row_norms(features: &mut Array2<f64>) -> usize {
    let mut capped = 0;
    for mut row in features.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 1.0 {
            row /= norm;
            capped += 1;
        }
    }
    capped
}

/// `n` uncapped rows `x_i ~ N(0, Sigma)` with `Sigma_jk = rho^|j-k|`.
pub fn draw_features(n: usize, p: usize, rho: f64, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || p == 0 {
        return Err(Error::param("n, p", "must both be at least 1"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::param(
            "rho",
            format!("must lie in [0, 1), got {rho}"),
        ));
    }
    let chol = ar1_cholesky(p, rho)?;
    let mut rng = stream(seed);
    let normals = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut rng));
    Ok(normals.dot(&chol.t()))
}

/// Draws `x_i ~ N(0, Sigma)`, labels them from the raw `x_i`, then caps row
/// norms at 1. Scaling a row by a positive factor keeps the sign of `w'x`, so
/// capping never flips a threshold label.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, Array1<f64>)> {
    spec.validate()?;
    let mut features = draw_features(spec.n, spec.p, spec.rho, spec.seed)?;
    let true_w = spec.true_w();
    let scores = features.dot(&true_w);
    let labels: Array1<f64> = match spec.label_rule {
        LabelRule::Threshold => scores.mapv(|s| if s >= 0.0 { 1.0 } else { -1.0 }),
        LabelRule::Bernoulli => {
            let mut coin = stream(derive_seed(spec.seed, &[1]));
            scores.mapv(|s| {
                let prob = 1.0 / (1.0 + (-s).exp());
                if coin.random::<f64>() < prob {
                    1.0
                } else {
                    -1.0
                }
            })
        }
    };
    cap_row_norms(&mut features);
    Ok((Dataset::new(features, labels)?, true_w))
}

/// Index sets `(train, test)` of a seeded shuffle.
pub fn split_indices(n: usize, test_n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if test_n >= n {
        return Err(Error::param(
            "test_n",
            format!("must be below n = {n}, got {test_n}"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed));
    let train = idx.split_off(test_n);
    Ok((train, idx))
}

pub fn train_test_split(data: &Dataset, test_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(data.n(), test_n, seed)?;
    Ok((data.select(&train)?, data.select(&test)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Numeric,
    Categorical,
    Label,
    Ignore,
}

/// Column roles for CSV ingestion. Every header column must be listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: BTreeMap<String, ColumnRole>,
    /// Label value mapped to +1; every other non-empty value maps to -1.
    pub positive_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub feature_names: Vec<String>,
    /// Max absolute value of each output column before scaling.
    pub column_scales: Vec<f64>,
    pub rows_capped: usize,
    /// Categorical column -> its categories, in expanded-column order.
    pub one_hot_map: BTreeMap<String, Vec<String>>,
}

enum Slot {
    Numeric(usize),
    Categorical(String, usize),
    Label,
    Ignore,
}

struct Parsed {
    rows: Vec<Vec<String>>,
    lines: Vec<u64>,
    headers: Vec<String>,
    label_col: usize,
}

fn parse_records<R: Read>(input: R, schema: &Schema) -> Result<Parsed> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for h in &headers {
        if !schema.columns.contains_key(h) {
            return Err(Error::Parse {
                row: 1,
                column: h.clone(),
                reason: "column not listed in schema".into(),
            });
        }
    }
    for name in schema.columns.keys() {
        if !headers.contains(name) {
            return Err(Error::Parse {
                row: 1,
                column: name.clone(),
                reason: "schema column missing from header".into(),
            });
        }
    }
    let labels: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| schema.columns[*h] == ColumnRole::Label)
        .map(|(i, _)| i)
        .collect();
    let [label_col] = labels[..] else {
        return Err(Error::Parse {
            row: 1,
            column: "<label>".into(),
            reason: format!(
                "schema must name exactly one label column, found {}",
                labels.len()
            ),
        });
    };
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record?;
        lines.push(record.position().map_or(0, |p| p.line()));
        rows.push(record.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok(Parsed {
        rows,
        lines,
        headers,
        label_col,
    })
}

fn preprocess(
    parsed: Parsed,
    schema: &Schema,
    fitted: Option<&PreprocessReport>,
) -> Result<(Dataset, PreprocessReport)> {
    let Parsed {
        rows,
        lines,
        headers,
        label_col,
    } = parsed;
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 2,
            column: "<all>".into(),
            reason: "no data rows".into(),
        });
    }

    let one_hot_map: BTreeMap<String, Vec<String>> = match fitted {
        Some(report) => report.one_hot_map.clone(),
        None => {
            let mut map = BTreeMap::new();
            for (j, h) in headers.iter().enumerate() {
                if schema.columns[h] == ColumnRole::Categorical {
                    let cats: BTreeSet<&str> = rows.iter().map(|r| r[j].as_str()).collect();
                    map.insert(h.clone(), cats.into_iter().map(str::to_string).collect());
                }
            }
            map
        }
    };

    let mut slots = Vec::with_capacity(headers.len());
    let mut feature_names = Vec::new();
    for h in &headers {
        let slot = match schema.columns[h] {
            ColumnRole::Numeric => {
                feature_names.push(h.clone());
                Slot::Numeric(feature_names.len() - 1)
            }
            ColumnRole::Categorical => {
                let cats = one_hot_map.get(h).ok_or_else(|| Error::Parse {
                    row: 1,
                    column: h.clone(),
                    reason: "categorical column absent from the fitted encoding".into(),
                })?;
                let start = feature_names.len();
                feature_names.extend(cats.iter().map(|c| format!("{h}={c}")));
                Slot::Categorical(h.clone(), start)
            }
            ColumnRole::Label => Slot::Label,
            ColumnRole::Ignore => Slot::Ignore,
        };
        slots.push(slot);
    }
    if let Some(report) = fitted {
        if report.feature_names != feature_names {
            return Err(Error::DimensionMismatch(
                "CSV columns do not match the fitted preprocessing".into(),
            ));
        }
    }
    let p = feature_names.len();
    if p == 0 {
        return Err(Error::param("schema", "no feature columns"));
    }

    let n = rows.len();
    let mut features = Array2::<f64>::zeros((n, p));
    let mut labels = Array1::<f64>::zeros(n);
    for (i, (row, &line)) in rows.iter().zip(&lines).enumerate() {
        let at = |j: usize, reason: String| Error::Parse {
            row: line as usize,
            column: headers[j].clone(),
            reason,
        };
        if row.len() != headers.len() {
            return Err(at(
                0,
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let label = &row[label_col];
        if label.is_empty() {
            return Err(at(label_col, "missing label".into()));
        }
        labels[i] = if *label == schema.positive_label {
            1.0
        } else {
            -1.0
        };
        for (j, slot) in slots.iter().enumerate() {
            match slot {
                Slot::Numeric(col) => {
                    let value: f64 = row[j]
                        .parse()
                        .map_err(|_| at(j, format!("non-numeric value `{}`", row[j])))?;
                    if !value.is_finite() {
                        return Err(at(j, format!("non-finite value `{}`", row[j])));
                    }
                    features[[i, *col]] = value;
                }
                Slot::Categorical(name, start) => {
                    let pos = one_hot_map[name]
                        .iter()
                        .position(|c| *c == row[j])
                        .ok_or_else(|| at(j, format!("unknown category `{}`", row[j])))?;
                    features[[i, start + pos]] = 1.0;
                }
                Slot::Label | Slot::Ignore => {}
            }
        }
    }

    let column_scales: Vec<f64> = match fitted {
        Some(report) => report.column_scales.clone(),
        None => features
            .axis_iter(Axis(1))
            .map(|col| col.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .collect(),
    };
    for (mut col, &scale) in features.axis_iter_mut(Axis(1)).zip(&column_scales) {
        if scale > 0.0 {
            col /= scale;
        }
    }
    let rows_capped = cap_row_norms(&mut features);
    let report = PreprocessReport {
        feature_names,
        column_scales,
        rows_capped,
        one_hot_map,
    };
    Ok((Dataset::new(features, labels)?, report))
}

/// Fits the preprocessing on `input` and returns the transformed dataset.
pub fn load_csv_from<R: Read>(input: R, schema: &Schema) -> Result<(Dataset, PreprocessReport)> {
    preprocess(parse_records(input, schema)?, schema, None)
}

/// Applies an already fitted preprocessing (categories and column scales) to
/// new data; unseen categories are errors.
pub fn apply_csv_from<R: Read>(
    input: R,
    schema: &Schema,
    fitted: &PreprocessReport,
) -> Result<(Dataset, PreprocessReport)> {
    preprocess(parse_records(input, schema)?, schema, Some(fitted))
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<(Dataset, PreprocessReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_from(BufReader::new(file), schema)
}

pub fn apply_csv(
    path: &Path,
    schema: &Schema,
    fitted: &PreprocessReport,
) -> Result<(Dataset, PreprocessReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    apply_csv_from(BufReader::new(file), schema, fitted)
}

/// Cache format: `#dpsc-dataset v1 n=<n> p=<p>` then one `y,x1,...,xp` line per row.
/// Floats use the shortest representation that round-trips.
pub fn write_dataset_to<W: Write>(mut out: W, data: &Dataset) -> std::io::Result<()> {
    writeln!(out, "{CACHE_MAGIC} n={} p={}", data.n(), data.p())?;
    let mut line = String::new();
    for (x, &y) in data.features().axis_iter(Axis(0)).zip(data.labels()) {
        line.clear();
        line.push_str(if y > 0.0 { "1" } else { "-1" });
        for v in x {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(BufWriter::new(file), data).map_err(|e| Error::io(path, e))
}

pub fn read_dataset_from<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<dataset>", e))?,
        None => String::new(),
    };
    let bad_header = || Error::Parse {
        row: 1,
        column: "<header>".into(),
        reason: format!("expected `{CACHE_MAGIC} n=<n> p=<p>`, found `{header}`"),
    };
    let rest = header.strip_prefix(CACHE_MAGIC).ok_or_else(bad_header)?;
    let mut n = None;
    let mut p = None;
    for token in rest.split_whitespace() {
        if let Some(v) = token.strip_prefix("n=") {
            n = v.parse::<usize>().ok();
        } else if let Some(v) = token.strip_prefix("p=") {
            p = v.parse::<usize>().ok();
        }
    }
    let (Some(n), Some(p)) = (n, p) else {
        return Err(bad_header());
    };
    let mut features = Array2::<f64>::zeros((n, p));
    let mut labels = Array1::<f64>::zeros(n);
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.is_empty() {
            continue;
        }
        let row = i + 2;
        if count >= n {
            return Err(Error::Parse {
                row,
                column: "<row>".into(),
                reason: format!("more than n = {n} rows"),
            });
        }
        let mut fields = line.split(',');
        let y = fields.next().unwrap_or_default();
        labels[count] = match y {
            "1" | "+1" => 1.0,
            "-1" => -1.0,
            other => {
                return Err(Error::Parse {
                    row,
                    column: "y".into(),
                    reason: format!("label `{other}` is not -1 or 1"),
                })
            }
        };
        let mut j = 0;
        for field in fields {
            if j >= p {
                j += 1;
                break;
            }
            features[[count, j]] = field.parse().map_err(|_| Error::Parse {
                row,
                column: format!("x{}", j + 1),
                reason: format!("non-numeric value `{field}`"),
            })?;
            j += 1;
        }
        if j != p {
            return Err(Error::Parse {
                row,
                column: "<row>".into(),
                reason: format!("expected {p} features"),
            });
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Parse {
            row: count + 2,
            column: "<row>".into(),
            reason: format!("header declares n = {n}, found {count} rows"),
        });
    }
    Dataset::new(features, labels)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file))
}
