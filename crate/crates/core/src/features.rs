//! Model input matrix, standardization and data partitioning.

use crate::error::{Error, Result};
use crate::hydro::{Field, HydroSample};
use crate::par::Exec;
use crate::projection::project_aps;
use crate::rng::substream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

/// Fixed input column order.
pub const FEATURE_COLUMNS: [&str; 7] = [
    "x_proj",
    "y_proj",
    "pressure",
    "temperature",
    "salinity",
    "oxygen",
    "nitrate",
];
pub const N_FEATURES: usize = FEATURE_COLUMNS.len();
/// Bumped whenever the column set or order changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

const PHYSICAL: [Field; 5] = [
    Field::Pressure,
    Field::Temperature,
    Field::Salinity,
    Field::Oxygen,
    Field::Nitrate,
];
const PHYSICAL_NAMES: [&str; 5] = ["pressure", "temperature", "salinity", "oxygen", "nitrate"];

/// Divisor applied to projected x/y (meters).
pub const POSITION_SCALE_M: f64 = 1e6;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the layout version and column names.
pub fn feature_layout_hash() -> String {
    let text = format!("v{FEATURE_LAYOUT_VERSION}:{}", FEATURE_COLUMNS.join(","));
    sha256_hex(text.as_bytes())
}

/// Hex SHA-256 of arbitrary bytes (source file checksums).
pub fn checksum(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Phosphate,
    Silicate,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Phosphate, Target::Silicate];

    pub fn name(self) -> &'static str {
        match self {
            Target::Phosphate => "phosphate",
            Target::Silicate => "silicate",
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "phosphate" => Ok(Target::Phosphate),
            "silicate" => Ok(Target::Silicate),
            _ => Err(format!("unknown target `{s}` (expected phosphate or silicate)")),
        }
    }
}

/// Row-major `n x 7` inputs with parallel label vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    pub row_ids: Vec<u64>,
    /// (latitude, longitude) kept for mapping; not a model input.
    pub coords: Vec<(f64, f64)>,
    pub values: Vec<f64>,
    pub phosphate: Vec<Option<f64>>,
    pub silicate: Vec<Option<f64>>,
    pub standardized: bool,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * N_FEATURES..(i + 1) * N_FEATURES]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(N_FEATURES).copied().collect()
    }

    pub fn labels(&self, target: Target) -> &[Option<f64>] {
        match target {
            Target::Phosphate => &self.phosphate,
            Target::Silicate => &self.silicate,
        }
    }

    pub fn push_row(&mut self, row_id: u64, coord: (f64, f64), row: &[f64; N_FEATURES], phosphate: Option<f64>, silicate: Option<f64>) {
        self.row_ids.push(row_id);
        self.coords.push(coord);
        self.values.extend_from_slice(row);
        self.phosphate.push(phosphate);
        self.silicate.push(silicate);
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureMatrix {
        let mut out = FeatureMatrix {
            standardized: self.standardized,
            ..Default::default()
        };
        for &i in rows {
            out.row_ids.push(self.row_ids[i]);
            out.coords.push(self.coords[i]);
            out.values.extend_from_slice(self.row(i));
            out.phosphate.push(self.phosphate[i]);
            out.silicate.push(self.silicate[i]);
        }
        out
    }

    /// Rows (from `rows`) that carry a `target` label.
    pub fn labelled(&self, rows: &[usize], target: Target) -> Vec<usize> {
        let labels = self.labels(target);
        rows.iter().copied().filter(|&i| labels[i].is_some()).collect()
    }
}

fn raw_row(s: &HydroSample, idx: usize) -> Result<[f64; N_FEATURES]> {
    let mut row = [0.0; N_FEATURES];
    for (k, &f) in PHYSICAL.iter().enumerate() {
        row[2 + k] = s.get(f).ok_or(Error::MissingInput {
            row: idx,
            field: f.name(),
        })?;
    }
    let p = project_aps(s.latitude, s.longitude)?;
    row[0] = p.x;
    row[1] = p.y;
    if let Some(j) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("row {idx} column {}", FEATURE_COLUMNS[j])));
    }
    Ok(row)
}

/// Raw (unstandardized) inputs with projected positions.
pub fn build_feature_matrix(samples: &[HydroSample]) -> Result<FeatureMatrix> {
    let mut m = FeatureMatrix::default();
    for (idx, s) in samples.iter().enumerate() {
        let row = raw_row(s, idx)?;
        m.push_row(s.row_id, (s.latitude, s.longitude), &row, s.phosphate, s.silicate);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub position_scale: f64,
}

impl Standardizer {
    pub fn is_fitted(&self) -> bool {
        self.means.len() == PHYSICAL.len()
            && self.scales.len() == PHYSICAL.len()
            && self.scales.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.position_scale > 0.0
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("standardizer serializes").as_bytes())
    }

    pub fn standardize_row(&self, row: &mut [f64]) {
        row[0] /= self.position_scale;
        row[1] /= self.position_scale;
        for k in 0..PHYSICAL.len() {
            row[2 + k] = (row[2 + k] - self.means[k]) / self.scales[k];
        }
    }

    pub fn unstandardize_row(&self, row: &mut [f64]) {
        row[0] *= self.position_scale;
        row[1] *= self.position_scale;
        for k in 0..PHYSICAL.len() {
            row[2 + k] = row[2 + k] * self.scales[k] + self.means[k];
        }
    }
}

/// Column means and population standard deviations of the five physical
/// inputs. Call with training rows only.
pub fn fit_standardizer(m: &FeatureMatrix) -> Result<Standardizer> {
    let n = m.n_rows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    if m.standardized {
        return Err(Error::Format("fit_standardizer needs raw values".into()));
    }
    let mut means = Vec::with_capacity(5);
    let mut scales = Vec::with_capacity(5);
    for (k, name) in PHYSICAL_NAMES.iter().enumerate() {
        let col = m.column(2 + k);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) || col.iter().all(|&v| v == col[0]) {
            return Err(Error::DegenerateColumn(name));
        }
        means.push(mean);
        scales.push(sd);
    }
    Ok(Standardizer {
        means,
        scales,
        position_scale: POSITION_SCALE_M,
    })
}

/// Standardizes inputs; labels stay in physical units.
pub fn apply_standardizer(s: &Standardizer, m: &FeatureMatrix) -> Result<FeatureMatrix> {
    if !s.is_fitted() {
        return Err(Error::NotFitted);
    }
    if m.standardized {
        return Err(Error::Format("matrix is already standardized".into()));
    }
    let rows = Exec::default().map(m.n_rows(), |i| {
        let mut r = [0.0; N_FEATURES];
        r.copy_from_slice(m.row(i));
        s.standardize_row(&mut r);
        r
    });
    let mut out = m.clone();
    out.values = rows.into_iter().flatten().collect();
    out.standardized = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.1,
            k: 10,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::BadSplit(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.k < 2 {
            return Err(Error::BadSplit(format!("k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle into train/test; test size is `round(n * test_fraction)`.
/// Both index lists are returned sorted.
pub fn split_train_test(n: usize, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    if n < 10 {
        return Err(Error::TooFewRows { needed: 10, got: n });
    }
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::BadSplit(format!("test size {n_test} of {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(spec.seed, "split", 0));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Partition { train, test })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded k-fold partition of `train`. The first `len % k` folds get one
/// extra row.
pub fn kfold_split(train: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::BadSplit(format!("k must be >= 2, got {k}")));
    }
    if train.len() < k {
        return Err(Error::TooFewRows {
            needed: k,
            got: train.len(),
        });
    }
    let mut shuffled = train.to_vec();
    shuffled.shuffle(&mut substream(seed, "kfold", 0));
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for f in 0..k {
        bounds.push(bounds[f] + base + usize::from(f < extra));
    }
    Ok((0..k)
        .map(|f| {
            let mut val = shuffled[bounds[f]..bounds[f + 1]].to_vec();
            let mut tr: Vec<usize> = shuffled[..bounds[f]]
                .iter()
                .chain(&shuffled[bounds[f + 1]..])
                .copied()
                .collect();
            val.sort_unstable();
            tr.sort_unstable();
            Fold { train: tr, val }
        })
        .collect())
}

/// Standardized matrix with the partition and the standardizer fitted on
/// its training rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub matrix: FeatureMatrix,
    pub standardizer: Standardizer,
    pub partition: Partition,
}

pub fn prepare(raw: &FeatureMatrix, spec: &SplitSpec) -> Result<Prepared> {
    let partition = split_train_test(raw.n_rows(), spec)?;
    let standardizer = fit_standardizer(&raw.subset(&partition.train))?;
    let matrix = apply_standardizer(&standardizer, raw)?;
    Ok(Prepared {
        matrix,
        standardizer,
        partition,
    })
}

/// Sidecar written next to a persisted matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub layout_hash: String,
    pub standardizer: Standardizer,
    pub standardizer_hash: String,
    pub seed: u64,
    pub split: SplitSpec,
    pub source_checksum: String,
    pub config_hash: String,
    pub n_rows: usize,
}

impl MatrixMeta {
    pub fn new(p: &Prepared, split: SplitSpec, source_checksum: String, config_hash: String) -> Self {
        MatrixMeta {
            format_version: FEATURE_LAYOUT_VERSION,
            columns: FEATURE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            layout_hash: feature_layout_hash(),
            standardizer: p.standardizer.clone(),
            standardizer_hash: p.standardizer.hash(),
            seed: split.seed,
            split,
            source_checksum,
            config_hash,
            n_rows: p.matrix.n_rows(),
        }
    }

    /// Checks the layout and standardizer hashes against this build.
    pub fn verify(&self) -> Result<()> {
        let layout = feature_layout_hash();
        if self.layout_hash != layout {
            return Err(Error::FeatureLayoutMismatch {
                expected: layout,
                got: self.layout_hash.clone(),
            });
        }
        let h = self.standardizer.hash();
        if self.standardizer_hash != h {
            return Err(Error::StandardizerMismatch {
                expected: self.standardizer_hash.clone(),
                got: h,
            });
        }
        Ok(())
    }
}

const MATRIX_PREFIX: [&str; 4] = ["row_id", "split", "latitude", "longitude"];
const MATRIX_LABELS: [&str; 2] = ["phosphate", "silicate"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the standardized matrix as CSV: `row_id, split, latitude,
/// longitude`, the seven features, then both labels.
pub fn write_matrix_csv<W: Write>(m: &FeatureMatrix, partition: &Partition, sink: W) -> Result<()> {
    let mut split = vec!["train"; m.n_rows()];
    for &i in &partition.test {
        split[i] = "test";
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(MATRIX_PREFIX.iter().chain(&FEATURE_COLUMNS).chain(&MATRIX_LABELS))?;
    for i in 0..m.n_rows() {
        let mut rec = vec![
            m.row_ids[i].to_string(),
            split[i].to_string(),
            m.coords[i].0.to_string(),
            m.coords[i].1.to_string(),
        ];
        rec.extend(m.row(i).iter().map(f64::to_string));
        rec.push(fmt_opt(m.phosphate[i]));
        rec.push(fmt_opt(m.silicate[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_matrix_csv`]; the result is marked standardized.
pub fn read_matrix_csv<R: Read>(source: R) -> Result<(FeatureMatrix, Partition)> {
    let mut rdr = csv::Reader::from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = MATRIX_PREFIX
        .iter()
        .chain(&FEATURE_COLUMNS)
        .chain(&MATRIX_LABELS)
        .copied()
        .collect();
    if header != expected {
        return Err(Error::FeatureLayoutMismatch {
            expected: expected.join(","),
            got: header.join(","),
        });
    }
    let mut m = FeatureMatrix {
        standardized: true,
        ..Default::default()
    };
    let mut part = Partition {
        train: vec![],
        test: vec![],
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<Option<f64>> {
            let c = &rec[j];
            if c.is_empty() {
                return Ok(None);
            }
            c.parse().map(Some).map_err(|_| Error::MalformedRow {
                row: i,
                column: expected[j].to_string(),
                value: c.to_string(),
            })
        };
        let req = |j: usize| num(j)?.ok_or_else(|| Error::Format(format!("row {i}: empty `{}`", expected[j])));
        let id = rec[0].parse().map_err(|_| Error::MalformedRow {
            row: i,
            column: "row_id".into(),
            value: rec[0].to_string(),
        })?;
        match &rec[1] {
            "train" => part.train.push(i),
            "test" => part.test.push(i),
            other => return Err(Error::Format(format!("row {i}: unknown split `{other}`"))),
        }
        let mut row = [0.0; N_FEATURES];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = req(4 + j)?;
        }
        m.push_row(id, (req(2)?, req(3)?), &row, num(11)?, num(12)?);
    }
    Ok((m, part))
}
