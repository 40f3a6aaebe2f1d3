//! Applying trained models to external (ESM or float) tables and gridding
//! the results.

use crate::artifact::{Provenance, TrainedModel};
use crate::error::{Error, Result};
use crate::features::{Standardizer, Target, N_FEATURES};
use crate::hydro::{check_ranges, parse_cell, ColumnMap, Field, HydroSample, QcPolicy, RawTable};
use crate::projection::project_aps;
use crate::uncertainty::{mc_dropout_predict_with, UncertaintySummary};
use crate::par::Exec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Esm,
    Argo,
    /// Held-out rows of the training bottle data.
    Ship,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Esm => "esm",
            SourceTag::Argo => "argo",
            SourceTag::Ship => "ship",
        })
    }
}

impl std::str::FromStr for SourceTag {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "esm" => Ok(SourceTag::Esm),
            "argo" => Ok(SourceTag::Argo),
            "ship" => Ok(SourceTag::Ship),
            _ => Err(format!("unknown source tag `{s}` (expected esm, argo or ship)")),
        }
    }
}

/// An external row: inputs, optional pressure, optional reference labels
/// (the ESM's own phosphate/silicate).
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalRow {
    pub sample: HydroSample,
    pub source: SourceTag,
}

impl ExternalRow {
    pub fn reference(&self, target: Target) -> Option<f64> {
        match target {
            Target::Phosphate => self.sample.phosphate,
            Target::Silicate => self.sample.silicate,
        }
    }
}

/// Parses an external table. `source_column`, when given, must hold a
/// [`SourceTag`] name per row; otherwise every row gets `default_source`. Flag
/// columns in the schema are ignored, and the pressure and reference columns
/// may be missing from the header.
pub fn parse_external_table<R: Read>(
    source: R,
    schema: &ColumnMap,
    policy: &QcPolicy,
    source_column: Option<&str>,
    default_source: SourceTag,
) -> Result<Vec<ExternalRow>> {
    let table = RawTable::read(source, schema.skip_after_header)?;
    let mut cols = Vec::new();
    for f in [
        Field::Latitude,
        Field::Longitude,
        Field::Pressure,
        Field::Temperature,
        Field::Salinity,
        Field::Oxygen,
        Field::Nitrate,
        Field::Phosphate,
        Field::Silicate,
    ] {
        let Some(c) = schema.column(f) else { continue };
        match table.index_of(c) {
            Ok(i) => cols.push((f, c, i)),
            // surface fields often have no pressure column, and reference
            // labels are optional
            Err(_) if matches!(f, Field::Pressure | Field::Phosphate | Field::Silicate) => {}
            Err(e) => return Err(e),
        }
    }
    let id_col = schema.id.as_deref().map(|c| table.index_of(c).map(|i| (c, i))).transpose()?;
    let src_col = source_column.map(|c| table.index_of(c).map(|i| (c, i))).transpose()?;
    let mut out = Vec::with_capacity(table.records.len());
    for (row, rec) in table.records.iter().enumerate() {
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let malformed = |c: &str, v: &str| Error::MalformedRow {
            row,
            column: c.to_string(),
            value: v.to_string(),
        };
        let row_id = match id_col {
            Some((c, i)) => cell(i).parse().map_err(|_| malformed(c, cell(i)))?,
            None => row as u64,
        };
        let source = match src_col {
            Some((c, i)) => cell(i).parse().map_err(|_| malformed(c, cell(i)))?,
            None => default_source,
        };
        let mut s = HydroSample::new(row_id, f64::NAN, f64::NAN);
        for &(f, c, i) in &cols {
            s.set(f, parse_cell(cell(i), row, c, policy)?);
        }
        check_ranges(&s, row, schema)?;
        out.push(ExternalRow { sample: s, source });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApplyDefaults {
    /// Pressure (dbar) assumed for rows without one, e.g. ESM surface fields.
    pub surface_pressure: f64,
    /// Rows at or north of this latitude are dropped.
    pub lat_cut: f64,
}

impl Default for ApplyDefaults {
    fn default() -> Self {
        ApplyDefaults {
            surface_pressure: 5.0,
            lat_cut: crate::hydro::SOUTHERN_OCEAN_LAT_CUT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedRow {
    pub row_id: u64,
    pub source: SourceTag,
    pub latitude: f64,
    pub longitude: f64,
    pub pressure: f64,
    pub summary: UncertaintySummary,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub missing_input: usize,
    pub outside_region: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.missing_input + self.outside_region
    }
}

#[derive(Debug, Clone)]
pub struct ExternalPrediction {
    pub target: Target,
    pub rows: Vec<PredictedRow>,
    pub dropped: DropCounts,
    pub pressure_defaulted: usize,
}

/// Fills pressure defaults, drops unusable rows, then runs MC dropout on
/// the rest.
pub fn predict_external_table(
    trained: &TrainedModel,
    standardizer: &Standardizer,
    rows: &[ExternalRow],
    defaults: &ApplyDefaults,
    n_samples: usize,
    seed: u64,
) -> Result<ExternalPrediction> {
    predict_external_table_with(trained, standardizer, rows, defaults, n_samples, seed, Exec::default())
}

pub fn predict_external_table_with(
    trained: &TrainedModel,
    standardizer: &Standardizer,
    rows: &[ExternalRow],
    defaults: &ApplyDefaults,
    n_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<ExternalPrediction> {
    trained.check_standardizer(standardizer)?;
    if !standardizer.is_fitted() {
        return Err(Error::NotFitted);
    }
    let mut dropped = DropCounts::default();
    let mut pressure_defaulted = 0;
    let mut kept: Vec<(usize, f64)> = Vec::new();
    let mut x: Vec<f64> = Vec::new();
    let mut ids = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let s = &r.sample;
        if !(s.latitude < defaults.lat_cut) {
            dropped.outside_region += 1;
            continue;
        }
        let inputs = [s.temperature, s.salinity, s.oxygen, s.nitrate];
        if inputs.iter().any(Option::is_none) {
            dropped.missing_input += 1;
            continue;
        }
        let pressure = match s.pressure {
            Some(p) => p,
            None => {
                pressure_defaulted += 1;
                defaults.surface_pressure
            }
        };
        let p = project_aps(s.latitude, s.longitude)?;
        let mut row = [
            p.x,
            p.y,
            pressure,
            inputs[0].unwrap(),
            inputs[1].unwrap(),
            inputs[2].unwrap(),
            inputs[3].unwrap(),
        ];
        standardizer.standardize_row(&mut row);
        x.extend_from_slice(&row);
        ids.push(s.row_id);
        kept.push((i, pressure));
    }
    if kept.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    debug_assert_eq!(x.len(), kept.len() * N_FEATURES);
    let summaries = mc_dropout_predict_with(&trained.model, &x, &ids, n_samples, seed, exec)?;
    let out = kept
        .iter()
        .zip(summaries)
        .map(|(&(i, pressure), summary)| {
            let r = &rows[i];
            PredictedRow {
                row_id: r.sample.row_id,
                source: r.source,
                latitude: r.sample.latitude,
                longitude: r.sample.longitude,
                pressure,
                summary,
                reference: r.reference(trained.target),
            }
        })
        .collect();
    Ok(ExternalPrediction {
        target: trained.target,
        rows: out,
        dropped,
        pressure_defaulted,
    })
}

pub const PREDICTION_COLUMNS: [&str; 14] = [
    "row_id", "source", "latitude", "longitude", "pressure", "mean", "std", "ci_low", "ci_high",
    "pct_2_5", "pct_97_5", "n_samples", "reference", "target",
];

/// Prediction table: provenance comment, header, one line per row.
pub fn write_prediction_csv<W: Write>(p: &ExternalPrediction, prov: &Provenance, mut sink: W) -> Result<()> {
    writeln!(sink, "{}", prov.comment_line())?;
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(PREDICTION_COLUMNS)?;
    for r in &p.rows {
        let s = &r.summary;
        w.write_record([
            r.row_id.to_string(),
            r.source.to_string(),
            r.latitude.to_string(),
            r.longitude.to_string(),
            r.pressure.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.ci_low.to_string(),
            s.ci_high.to_string(),
            s.pct_2_5.to_string(),
            s.pct_97_5.to_string(),
            s.n_samples.to_string(),
            r.reference.map(|v| v.to_string()).unwrap_or_default(),
            p.target.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_prediction_csv`]. Drop counts are not
/// stored in the table and come back as zero.
pub fn read_prediction_csv<R: Read>(source: R) -> Result<(ExternalPrediction, Option<Provenance>)> {
    let mut reader = BufReader::new(source);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let prov = Provenance::parse_comment_line(first.trim_end());
    let body: Box<dyn Read> = if prov.is_some() {
        Box::new(reader)
    } else {
        Box::new(std::io::Cursor::new(first.into_bytes()).chain(reader))
    };
    let mut rdr = csv::Reader::from_reader(body);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != PREDICTION_COLUMNS {
        return Err(Error::Format(format!("unexpected prediction header: {}", header.join(","))));
    }
    let mut rows = Vec::new();
    let mut target = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |j: usize| Error::MalformedRow {
            row: i,
            column: PREDICTION_COLUMNS[j].to_string(),
            value: rec[j].to_string(),
        };
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| bad(j));
        let t: Target = rec[13].parse().map_err(|_| bad(13))?;
        target.get_or_insert(t);
        rows.push(PredictedRow {
            row_id: rec[0].parse().map_err(|_| bad(0))?,
            source: rec[1].parse().map_err(|_| bad(1))?,
            latitude: num(2)?,
            longitude: num(3)?,
            pressure: num(4)?,
            summary: UncertaintySummary {
                mean: num(5)?,
                std: num(6)?,
                ci_low: num(7)?,
                ci_high: num(8)?,
                pct_2_5: num(9)?,
                pct_97_5: num(10)?,
                n_samples: rec[11].parse().map_err(|_| bad(11))?,
            },
            reference: if rec[12].is_empty() { None } else { Some(num(12)?) },
        });
    }
    let target = target.ok_or_else(|| Error::Format("empty prediction table".into()))?;
    Ok((
        ExternalPrediction {
            target,
            rows,
            dropped: DropCounts::default(),
            pressure_defaulted: 0,
        },
        prov,
    ))
}

/// Cell size in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSize {
    pub lat: f64,
    pub lon: f64,
}

impl Default for CellSize {
    fn default() -> Self {
        CellSize { lat: 1.0, lon: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub mean: f64,
    pub count: usize,
}

/// Cell-mean field keyed by (lat index, lon index), index = floor(deg / cell).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub cell: CellSize,
    pub variable: String,
    pub units: String,
    pub cells: BTreeMap<(i64, i64), GridCell>,
}

pub const NUTRIENT_UNITS: &str = "umol/kg";

impl GridField {
    pub fn center(&self, key: (i64, i64)) -> (f64, f64) {
        (
            (key.0 as f64 + 0.5) * self.cell.lat,
            (key.1 as f64 + 0.5) * self.cell.lon,
        )
    }

    pub fn write_csv<W: Write>(&self, prov: &Provenance, mut sink: W) -> Result<()> {
        writeln!(sink, "{}", prov.comment_line())?;
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["lat_center", "lon_center", "value", "count", "variable", "units"])?;
        for (&key, c) in &self.cells {
            let (lat, lon) = self.center(key);
            w.write_record([
                lat.to_string(),
                lon.to_string(),
                c.mean.to_string(),
                c.count.to_string(),
                self.variable.clone(),
                self.units.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validate_cell(cell: CellSize) -> Result<()> {
    if !(cell.lat > 0.0 && cell.lon > 0.0 && cell.lat.is_finite() && cell.lon.is_finite()) {
        return Err(Error::BadCell(format!("{} x {} degrees", cell.lat, cell.lon)));
    }
    Ok(())
}

/// Arithmetic mean of `(lat, lon, value)` points per cell. Cell keys are
/// computed in parallel; sums run in input order so output is reproducible.
pub fn grid_bin_mean(points: &[(f64, f64, f64)], cell: CellSize, variable: &str, units: &str) -> Result<GridField> {
    validate_cell(cell)?;
    let keys = Exec::default().map(points.len(), |i| {
        let (lat, lon, _) = points[i];
        ((lat / cell.lat).floor() as i64, (lon / cell.lon).floor() as i64)
    });
    let mut acc: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for (key, &(_, _, v)) in keys.into_iter().zip(points) {
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(GridField {
        cell,
        variable: variable.to_string(),
        units: units.to_string(),
        cells: acc
            .into_iter()
            .map(|(k, (sum, count))| (k, GridCell { mean: sum / count as f64, count }))
            .collect(),
    })
}

/// Cellwise `a - b` over cells present in both; counts are the minimum.
pub fn diff_grids(a: &GridField, b: &GridField) -> Result<GridField> {
    if a.cell != b.cell {
        return Err(Error::GridMismatch(format!(
            "cell sizes {}x{} vs {}x{}",
            a.cell.lat, a.cell.lon, b.cell.lat, b.cell.lon
        )));
    }
    if a.units != b.units {
        return Err(Error::GridMismatch(format!("units {} vs {}", a.units, b.units)));
    }
    let cells = a
        .cells
        .iter()
        .filter_map(|(k, ca)| {
            b.cells.get(k).map(|cb| {
                (
                    *k,
                    GridCell {
                        mean: ca.mean - cb.mean,
                        count: ca.count.min(cb.count),
                    },
                )
            })
        })
        .collect();
    Ok(GridField {
        cell: a.cell,
        variable: format!("{}-{}", a.variable, b.variable),
        units: a.units.clone(),
        cells,
    })
}

/// Map products for one prediction table: predicted mean and std, and, when
/// the rows carry reference values, the reference field and reference − NN.
#[derive(Debug, Clone)]
pub struct GridProducts {
    pub mean: GridField,
    pub std: GridField,
    pub reference: Option<GridField>,
    pub reference_minus_nn: Option<GridField>,
}

pub fn grid_products(p: &ExternalPrediction, cell: CellSize) -> Result<GridProducts> {
    let name = p.target.name();
    let pts = |f: &dyn Fn(&PredictedRow) -> f64| -> Vec<(f64, f64, f64)> {
        p.rows.iter().map(|r| (r.latitude, r.longitude, f(r))).collect()
    };
    let mean = grid_bin_mean(&pts(&|r| r.summary.mean), cell, &format!("{name}_nn"), NUTRIENT_UNITS)?;
    let std = grid_bin_mean(&pts(&|r| r.summary.std), cell, &format!("{name}_nn_std"), NUTRIENT_UNITS)?;
    let ref_pts: Vec<(f64, f64, f64)> = p
        .rows
        .iter()
        .filter_map(|r| r.reference.map(|v| (r.latitude, r.longitude, v)))
        .collect();
    let (reference, reference_minus_nn) = if ref_pts.is_empty() {
        (None, None)
    } else {
        // The NN field for the difference uses only rows that have a reference.
        let nn_pts: Vec<(f64, f64, f64)> = p
            .rows
            .iter()
            .filter(|r| r.reference.is_some())
            .map(|r| (r.latitude, r.longitude, r.summary.mean))
            .collect();
        let reference = grid_bin_mean(&ref_pts, cell, &format!("{name}_ref"), NUTRIENT_UNITS)?;
        let nn = grid_bin_mean(&nn_pts, cell, &format!("{name}_nn"), NUTRIENT_UNITS)?;
        let diff = diff_grids(&reference, &nn)?;
        (Some(reference), Some(diff))
    };
    Ok(GridProducts {
        mean,
        std,
        reference,
        reference_minus_nn,
    })
}
