//! Hydrographic table ingestion and QC down-selection.
//!
//! Tables are UTF-8 delimited text with one header row. The delimiter is tab
//! if the header line contains a tab, comma otherwise. Lines starting with
//! `#` are comments and a line reading `END_DATA` ends the table (WHP
//! exchange convention). Empty cells and sentinel values are absent.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

/// Logical fields of a bottle/profile row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Latitude,
    Longitude,
    Pressure,
    Temperature,
    Salinity,
    Oxygen,
    Nitrate,
    Phosphate,
    Silicate,
}

impl Field {
    pub const INPUTS: [Field; 7] = [
        Field::Latitude,
        Field::Longitude,
        Field::Pressure,
        Field::Temperature,
        Field::Salinity,
        Field::Oxygen,
        Field::Nitrate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Latitude => "latitude",
            Field::Longitude => "longitude",
            Field::Pressure => "pressure",
            Field::Temperature => "temperature",
            Field::Salinity => "salinity",
            Field::Oxygen => "oxygen",
            Field::Nitrate => "nitrate",
            Field::Phosphate => "phosphate",
            Field::Silicate => "silicate",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One measurement row. Position is always present; every other value may be
/// absent (sentinel or empty cell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydroSample {
    /// Id column value if the schema names one, else the 0-based data row index.
    pub row_id: u64,
    pub latitude: f64,
    pub longitude: f64,
    pub pressure: Option<f64>,
    pub temperature: Option<f64>,
    pub salinity: Option<f64>,
    pub oxygen: Option<f64>,
    pub nitrate: Option<f64>,
    pub phosphate: Option<f64>,
    pub silicate: Option<f64>,
    pub qc_flags: BTreeMap<Field, i32>,
}

impl HydroSample {
    pub fn new(row_id: u64, latitude: f64, longitude: f64) -> Self {
        HydroSample {
            row_id,
            latitude,
            longitude,
            pressure: None,
            temperature: None,
            salinity: None,
            oxygen: None,
            nitrate: None,
            phosphate: None,
            silicate: None,
            qc_flags: BTreeMap::new(),
        }
    }

    pub fn get(&self, field: Field) -> Option<f64> {
        match field {
            Field::Latitude => Some(self.latitude),
            Field::Longitude => Some(self.longitude),
            Field::Pressure => self.pressure,
            Field::Temperature => self.temperature,
            Field::Salinity => self.salinity,
            Field::Oxygen => self.oxygen,
            Field::Nitrate => self.nitrate,
            Field::Phosphate => self.phosphate,
            Field::Silicate => self.silicate,
        }
    }

    fn slot(&mut self, field: Field) -> Option<&mut Option<f64>> {
        Some(match field {
            Field::Latitude | Field::Longitude => return None,
            Field::Pressure => &mut self.pressure,
            Field::Temperature => &mut self.temperature,
            Field::Salinity => &mut self.salinity,
            Field::Oxygen => &mut self.oxygen,
            Field::Nitrate => &mut self.nitrate,
            Field::Phosphate => &mut self.phosphate,
            Field::Silicate => &mut self.silicate,
        })
    }

    pub fn set(&mut self, field: Field, value: Option<f64>) {
        match field {
            Field::Latitude => self.latitude = value.unwrap_or(f64::NAN),
            Field::Longitude => self.longitude = value.unwrap_or(f64::NAN),
            _ => *self.slot(field).expect("value field") = value,
        }
    }

    /// All seven model inputs present.
    pub fn has_inputs(&self) -> bool {
        Field::INPUTS.iter().all(|&f| self.get(f).is_some())
    }

    /// Usable as a training row: all inputs plus at least one label.
    pub fn is_trainable(&self) -> bool {
        self.has_inputs() && (self.phosphate.is_some() || self.silicate.is_some())
    }
}

/// Maps logical fields to header names. Unnamed optional fields are treated
/// as absent for every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub id: Option<String>,
    pub latitude: String,
    pub longitude: String,
    pub pressure: Option<String>,
    pub temperature: Option<String>,
    pub salinity: Option<String>,
    pub oxygen: Option<String>,
    pub nitrate: Option<String>,
    pub phosphate: Option<String>,
    pub silicate: Option<String>,
    /// QC flag column per field.
    pub flags: BTreeMap<Field, String>,
    /// Number of lines after the header to skip (e.g. a units row).
    pub skip_after_header: usize,
}

impl Default for ColumnMap {
    /// WHP exchange (GO-SHIP bottle file) names, with the units row after
    /// the header skipped.
    fn default() -> Self {
        let flags = [
            (Field::Salinity, "CTDSAL_FLAG_W"),
            (Field::Oxygen, "OXYGEN_FLAG_W"),
            (Field::Nitrate, "NITRAT_FLAG_W"),
            (Field::Phosphate, "PHSPHT_FLAG_W"),
            (Field::Silicate, "SILCAT_FLAG_W"),
        ]
        .into_iter()
        .map(|(f, c)| (f, c.to_string()))
        .collect();
        ColumnMap {
            id: None,
            latitude: "LATITUDE".into(),
            longitude: "LONGITUDE".into(),
            pressure: Some("CTDPRS".into()),
            temperature: Some("CTDTMP".into()),
            salinity: Some("CTDSAL".into()),
            oxygen: Some("OXYGEN".into()),
            nitrate: Some("NITRAT".into()),
            phosphate: Some("PHSPHT".into()),
            silicate: Some("SILCAT".into()),
            flags,
            skip_after_header: 1,
        }
    }
}

impl ColumnMap {
    /// Plain lowercase names (`latitude`, `pressure`, ...), no flag columns.
    pub fn plain() -> Self {
        let named = |f: Field| Some(f.name().to_string());
        ColumnMap {
            id: None,
            latitude: "latitude".into(),
            longitude: "longitude".into(),
            pressure: named(Field::Pressure),
            temperature: named(Field::Temperature),
            salinity: named(Field::Salinity),
            oxygen: named(Field::Oxygen),
            nitrate: named(Field::Nitrate),
            phosphate: named(Field::Phosphate),
            silicate: named(Field::Silicate),
            flags: BTreeMap::new(),
            skip_after_header: 0,
        }
    }

    pub fn column(&self, field: Field) -> Option<&str> {
        match field {
            Field::Latitude => Some(&self.latitude),
            Field::Longitude => Some(&self.longitude),
            Field::Pressure => self.pressure.as_deref(),
            Field::Temperature => self.temperature.as_deref(),
            Field::Salinity => self.salinity.as_deref(),
            Field::Oxygen => self.oxygen.as_deref(),
            Field::Nitrate => self.nitrate.as_deref(),
            Field::Phosphate => self.phosphate.as_deref(),
            Field::Silicate => self.silicate.as_deref(),
        }
    }

    const ALL: [Field; 9] = [
        Field::Latitude,
        Field::Longitude,
        Field::Pressure,
        Field::Temperature,
        Field::Salinity,
        Field::Oxygen,
        Field::Nitrate,
        Field::Phosphate,
        Field::Silicate,
    ];

    fn named_fields(&self) -> impl Iterator<Item = (Field, &str)> {
        Self::ALL
            .into_iter()
            .filter_map(move |f| self.column(f).map(|c| (f, c)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcPolicy {
    pub accepted_flags: Vec<i32>,
    pub missing_sentinels: Vec<f64>,
}

impl Default for QcPolicy {
    fn default() -> Self {
        QcPolicy {
            accepted_flags: vec![2],
            missing_sentinels: vec![-999.0, -9999.0],
        }
    }
}

impl QcPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.accepted_flags.is_empty() {
            return Err(Error::BadConfig("accepted_flags must not be empty".into()));
        }
        Ok(())
    }

    fn is_sentinel(&self, v: f64) -> bool {
        self.missing_sentinels.contains(&v)
    }
}

/// Splits off the data region: drops comment lines and a leading WHP
/// exchange file stamp (`BOTTLE,...`), stops at `END_DATA`.
fn data_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for (i, line) in raw.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('#') || (i == 0 && t.starts_with("BOTTLE,")) {
            continue;
        }
        if t == "END_DATA" {
            break;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub(crate) fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// A parsed header plus data records, shared by the hydro and external readers.
pub(crate) struct RawTable {
    pub header: Vec<String>,
    pub records: Vec<csv::StringRecord>,
}

impl RawTable {
    pub fn read<R: Read>(mut source: R, skip_after_header: usize) -> Result<RawTable> {
        let mut raw = String::new();
        source.read_to_string(&mut raw)?;
        let text = data_text(&raw);
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(detect_delimiter(&text))
            .trim(csv::Trim::All)
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let records = rdr
            .records()
            .skip(skip_after_header)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(RawTable { header, records })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

pub(crate) fn parse_cell(
    cell: &str,
    row: usize,
    column: &str,
    policy: &QcPolicy,
) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| Error::MalformedRow {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })?;
    if policy.is_sentinel(v) || v.is_nan() {
        Ok(None)
    } else {
        Ok(Some(v))
    }
}

/// Parses a hydrographic table. One sample per data row, in file order.
pub fn parse_hydro_table<R: Read>(
    source: R,
    schema: &ColumnMap,
    policy: &QcPolicy,
) -> Result<Vec<HydroSample>> {
    let table = RawTable::read(source, schema.skip_after_header)?;
    let value_cols: Vec<(Field, &str, usize)> = schema
        .named_fields()
        .map(|(f, c)| Ok((f, c, table.index_of(c)?)))
        .collect::<Result<_>>()?;
    let flag_cols: Vec<(Field, &str, usize)> = schema
        .flags
        .iter()
        .map(|(&f, c)| Ok((f, c.as_str(), table.index_of(c)?)))
        .collect::<Result<_>>()?;
    let id_col = match &schema.id {
        Some(c) => Some((c.as_str(), table.index_of(c)?)),
        None => None,
    };

    let mut out = Vec::with_capacity(table.records.len());
    for (row, rec) in table.records.iter().enumerate() {
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let row_id = match id_col {
            Some((name, i)) => cell(i).parse::<u64>().map_err(|_| Error::MalformedRow {
                row,
                column: name.to_string(),
                value: cell(i).to_string(),
            })?,
            None => row as u64,
        };
        let mut s = HydroSample::new(row_id, f64::NAN, f64::NAN);
        for &(field, name, i) in &value_cols {
            let v = parse_cell(cell(i), row, name, policy)?;
            s.set(field, v);
        }
        check_ranges(&s, row, schema)?;
        for &(field, name, i) in &flag_cols {
            if let Some(flag) = parse_cell(cell(i), row, name, policy)? {
                s.qc_flags.insert(field, flag as i32);
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub(crate) fn check_ranges(s: &HydroSample, row: usize, schema: &ColumnMap) -> Result<()> {
    let bad = |col: &str, v: f64| Error::MalformedRow {
        row,
        column: col.to_string(),
        value: v.to_string(),
    };
    if !(-90.0..=90.0).contains(&s.latitude) {
        return Err(bad(&schema.latitude, s.latitude));
    }
    if !(-180.0..=180.0).contains(&s.longitude) {
        return Err(bad(&schema.longitude, s.longitude));
    }
    if let Some(p) = s.pressure {
        if p < 0.0 || !p.is_finite() {
            return Err(bad(schema.pressure.as_deref().unwrap_or("pressure"), p));
        }
    }
    Ok(())
}

/// Writes samples back out using the schema's column names (comma
/// delimited). Absent values are written as empty cells; the
/// `skip_after_header` rows are written blank.
pub fn write_hydro_table<W: Write>(
    samples: &[HydroSample],
    schema: &ColumnMap,
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let fields: Vec<(Field, &str)> = schema.named_fields().collect();
    let mut header: Vec<&str> = Vec::new();
    if let Some(id) = &schema.id {
        header.push(id);
    }
    header.extend(fields.iter().map(|(_, c)| *c));
    header.extend(schema.flags.values().map(String::as_str));
    w.write_record(&header)?;
    for _ in 0..schema.skip_after_header {
        w.write_record(vec![""; header.len()])?;
    }
    for s in samples {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if schema.id.is_some() {
            rec.push(s.row_id.to_string());
        }
        for &(f, _) in &fields {
            rec.push(s.get(f).map(|v| v.to_string()).unwrap_or_default());
        }
        for f in schema.flags.keys() {
            rec.push(s.qc_flags.get(f).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    MissingInput(Field),
    BadFlag { field: Field, flag: i32 },
    OutsideRegion { latitude: f64 },
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::MissingInput(field) => write!(f, "missing_input {field}"),
            DropReason::BadFlag { field, flag } => write!(f, "bad_flag {field}={flag}"),
            DropReason::OutsideRegion { latitude } => write!(f, "outside_region latitude={latitude}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropRecord {
    pub row_id: u64,
    pub reason: DropReason,
}

/// Retained samples plus one record per dropped row.
#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<HydroSample>,
    pub dropped: Vec<DropRecord>,
}

impl FilterOutcome {
    /// Line-oriented drop log: `row <id>\t<reason>`.
    pub fn write_log<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for d in &self.dropped {
            writeln!(sink, "row {}\t{}", d.row_id, d.reason)?;
        }
        Ok(())
    }
}

fn qc_reject(s: &HydroSample, policy: &QcPolicy) -> Option<DropReason> {
    if let Some(&f) = Field::INPUTS.iter().find(|&&f| s.get(f).is_none()) {
        return Some(DropReason::MissingInput(f));
    }
    // Flags only matter for values that are present; a missing label with
    // e.g. flag 9 ("not sampled") does not disqualify the row.
    s.qc_flags
        .iter()
        .find(|(&f, flag)| s.get(f).is_some() && !policy.accepted_flags.contains(flag))
        .map(|(&field, &flag)| DropReason::BadFlag { field, flag })
}

/// Keeps rows whose present fields all carry accepted flags and whose seven
/// inputs are all present. Order is preserved.
pub fn apply_qc_filter(samples: Vec<HydroSample>, policy: &QcPolicy) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for s in samples {
        match qc_reject(&s, policy) {
            None => out.kept.push(s),
            Some(reason) => out.dropped.push(DropRecord {
                row_id: s.row_id,
                reason,
            }),
        }
    }
    out
}

/// Default regional cut: strictly south of 45°S.
pub const SOUTHERN_OCEAN_LAT_CUT: f64 = -45.0;

/// Keeps samples with latitude strictly below `lat_cut`.
///
/// Panics if `lat_cut` is not in (-90, 0).
pub fn filter_southern_ocean(samples: Vec<HydroSample>, lat_cut: f64) -> FilterOutcome {
    assert!(
        lat_cut > -90.0 && lat_cut < 0.0,
        "lat_cut must lie in (-90, 0), got {lat_cut}"
    );
    let mut out = FilterOutcome::default();
    for s in samples {
        if s.latitude < lat_cut {
            out.kept.push(s);
        } else {
            out.dropped.push(DropRecord {
                row_id: s.row_id,
                reason: DropReason::OutsideRegion {
                    latitude: s.latitude,
                },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<HydroSample>> {
        parse_hydro_table(text.as_bytes(), &ColumnMap::plain(), &QcPolicy::default())
    }

    const HEADER: &str = "latitude,longitude,pressure,temperature,salinity,oxygen,nitrate,phosphate,silicate\n";

    #[test]
    fn sentinel_becomes_absent() {
        let text = format!(
            "{HEADER}-60,30,5,1.5,34.1,300,25,1.8,60\n-61,31,10,1.4,34.2,301,-999,1.9,61\n-62,32,15,1.3,34.3,302,27,2.0,\n"
        );
        let s = parse(&text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].nitrate, None);
        assert_eq!(s[0].nitrate, Some(25.0));
        assert_eq!(s[2].silicate, None);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse(HEADER).unwrap().is_empty());
    }

    #[test]
    fn identity_parse() {
        let s = parse(&format!("{HEADER}-60.0,30.0,5.0,1.25,34.5,310.5,28.0,1.9,70.0\n")).unwrap();
        let r = &s[0];
        assert_eq!((r.latitude, r.longitude, r.pressure), (-60.0, 30.0, Some(5.0)));
        assert_eq!(r.temperature, Some(1.25));
        assert_eq!(r.salinity, Some(34.5));
        assert_eq!(r.oxygen, Some(310.5));
        assert_eq!(r.phosphate, Some(1.9));
        assert_eq!(r.row_id, 0);
    }

    #[test]
    fn tab_delimited_and_exchange_framing() {
        let text = "# comment\nlatitude\tlongitude\tpressure\n-70\t10\t5\n-71\t11\t6\nEND_DATA\ngarbage\n";
        let mut schema = ColumnMap::plain();
        schema.temperature = None;
        schema.salinity = None;
        schema.oxygen = None;
        schema.nitrate = None;
        schema.phosphate = None;
        schema.silicate = None;
        let s = parse_hydro_table(text.as_bytes(), &schema, &QcPolicy::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].pressure, Some(6.0));
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse("latitude,longitude\n-60,0\n").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "pressure"));
    }

    #[test]
    fn malformed_row_reports_index() {
        let text = format!("{HEADER}-60,30,5,1,34,300,25,1.8,60\n-60,30,5,abc,34,300,25,1.8,60\n");
        match parse(&text).unwrap_err() {
            Error::MalformedRow { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "temperature");
            }
            e => panic!("unexpected {e}"),
        }
    }

    fn full(lat: f64) -> HydroSample {
        let mut s = HydroSample::new(0, lat, 0.0);
        for f in [Field::Pressure, Field::Temperature, Field::Salinity, Field::Oxygen, Field::Nitrate, Field::Phosphate] {
            s.set(f, Some(1.0));
        }
        for f in [Field::Salinity, Field::Oxygen, Field::Nitrate, Field::Phosphate] {
            s.qc_flags.insert(f, 2);
        }
        s
    }

    #[test]
    fn qc_flag_filtering() {
        let mut bad = full(-60.0);
        bad.row_id = 1;
        bad.qc_flags.insert(Field::Nitrate, 4);
        let mut no_oxy = full(-60.0);
        no_oxy.row_id = 2;
        no_oxy.oxygen = None;
        let out = apply_qc_filter(vec![full(-60.0), bad, no_oxy], &QcPolicy::default());
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.dropped[0].reason, DropReason::BadFlag { field: Field::Nitrate, flag: 4 });
        assert_eq!(out.dropped[1].reason, DropReason::MissingInput(Field::Oxygen));
        let mut log = Vec::new();
        out.write_log(&mut log).unwrap();
        assert_eq!(
            String::from_utf8(log).unwrap(),
            "row 1\tbad_flag nitrate=4\nrow 2\tmissing_input oxygen\n"
        );
    }

    #[test]
    fn flag_on_absent_label_is_ignored() {
        let mut s = full(-60.0);
        s.silicate = None;
        s.qc_flags.insert(Field::Silicate, 9);
        assert_eq!(apply_qc_filter(vec![s], &QcPolicy::default()).kept.len(), 1);
    }

    #[test]
    fn all_accepted_flags_retained() {
        let v: Vec<_> = (0..5).map(|_| full(-50.0)).collect();
        assert_eq!(apply_qc_filter(v, &QcPolicy::default()).kept.len(), 5);
    }

    #[test]
    fn latitude_cut_is_strict() {
        let out = filter_southern_ocean(vec![full(-45.1), full(-44.9), full(-45.0)], SOUTHERN_OCEAN_LAT_CUT);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].latitude, -45.1);
        assert_eq!(out.dropped.len(), 2);
    }

    #[test]
    fn label_only_rows_are_not_trainable() {
        let mut s = full(-60.0);
        assert!(s.is_trainable());
        s.phosphate = None;
        assert!(s.has_inputs() && !s.is_trainable());
    }
}
