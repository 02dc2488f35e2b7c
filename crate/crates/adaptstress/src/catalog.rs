//! Feature catalog and participant time-series containers.
//!
//! A cohort is a set of participants, each holding one record per calendar
//! day with the 22 daily predictors plus the stress target. Cells are either
//! present or missing, and every cell carries a quality flag describing how
//! it got its current state.
//!
//! Cohorts load from one CSV per participant (file stem = participant id)
//! with the fixed header listed in [`csv_header`]. Missing raw cells may be
//! encoded as an empty string, `NaN`, `-1`, or `-2`; the latter two are
//! missing markers for *all* columns, including ones where -1 would be a
//! plausible reading. Calendar gaps are materialized as all-missing days so
//! that window indices always map to elapsed days.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Broad feature group a catalog entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Activity,
    HeartRate,
    Respiration,
    Sleep,
    Target,
}

/// One catalog row: a named daily feature with its plausible range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub abbrev: &'static str,
    pub unit: &'static str,
    /// Closed plausibility interval; values outside it are reportable.
    pub range: (f64, f64),
    pub family: FeatureFamily,
}

/// The ordered list of daily features: 22 predictors plus the stress target.
#[derive(Debug, Clone)]
pub struct FeatureCatalog {
    entries: Vec<CatalogEntry>,
}

/// Abbreviation of the stress target column.
pub const STRESS: &str = "SS";

impl FeatureCatalog {
    /// The standard wearable catalog used throughout the pipeline.
    pub fn standard() -> Self {
        use FeatureFamily::*;
        let entries = vec![
            entry("Total Kilocalories", "TK", "kcal", 381.0, 4726.0, Activity),
            entry("Total Steps", "TS", "steps", 46.0, 31374.0, Activity),
            entry("Total Distance Meters", "TD", "meters", 31.0, 80528.0, Activity),
            entry("Highly Active Seconds", "HA", "seconds", 0.0, 25768.0, Activity),
            entry("Active Seconds", "ACS", "seconds", 0.0, 21357.0, Activity),
            entry("Moderate Intensity Minutes", "MI", "minutes", 0.0, 961.0, Activity),
            entry("Resting Heart Rate", "RH", "bpm", 45.0, 76.0, HeartRate),
            entry("Minimum Average Heart Rate", "MIR", "bpm", 33.0, 81.0, HeartRate),
            entry("Maximum Average Heart Rate", "MXR", "bpm", 75.0, 172.0, HeartRate),
            entry("Average Respiration Value", "AWR", "brpm", 13.0, 17.0, Respiration),
            entry("Highest Respiration Value", "HRV", "brpm", 15.0, 27.0, Respiration),
            entry("Lowest Respiration Value", "LRV", "brpm", 3.0, 13.0, Respiration),
            entry("Deep Sleep Seconds", "DS", "seconds", 0.0, 11340.0, Sleep),
            entry("Light Sleep Seconds", "LS", "seconds", 600.0, 41100.0, Sleep),
            entry("REM Sleep Seconds", "RS", "seconds", 300.0, 27420.0, Sleep),
            entry("Awake Sleep Seconds", "AWS", "seconds", 0.0, 12360.0, Sleep),
            entry("Awake Count", "AC", "count", 0.0, 9.0, Sleep),
            entry("Sleep Overall Score", "SOS", "arbitrary", 13.0, 100.0, Sleep),
            entry("Restless Moment Count", "RMC", "count", 2.0, 105.0, Sleep),
            entry("Lowest Respiration", "LR", "brpm", 6.0, 18.0, Respiration),
            entry("Highest Respiration", "HRS", "brpm", 14.0, 26.0, Respiration),
            entry("Average Respiration", "AR", "brpm", 11.0, 21.0, Respiration),
            entry("Stress Score", "SS", "arbitrary", 0.0, 95.0, Target),
        ];
        let catalog = FeatureCatalog { entries };
        catalog.check_invariants();
        catalog
    }

    fn check_invariants(&self) {
        assert_eq!(self.entries.len(), 23, "22 predictors plus the target");
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            assert!(seen.insert(e.abbrev), "duplicate abbreviation {}", e.abbrev);
            assert!(e.range.0 < e.range.1, "degenerate range for {}", e.abbrev);
        }
        assert_eq!(self.entries.last().map(|e| e.abbrev), Some(STRESS));
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Column index of an abbreviation, if present.
    pub fn index_of(&self, abbrev: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.abbrev == abbrev)
    }

    /// Index of the stress target column.
    pub fn stress_index(&self) -> usize {
        self.index_of(STRESS).expect("catalog always has a target")
    }

    /// Abbreviations of the predictor columns, in catalog order.
    pub fn predictor_abbrevs(&self) -> Vec<&'static str> {
        self.entries
            .iter()
            .filter(|e| e.family != FeatureFamily::Target)
            .map(|e| e.abbrev)
            .collect()
    }
}

fn entry(
    name: &'static str,
    abbrev: &'static str,
    unit: &'static str,
    lo: f64,
    hi: f64,
    family: FeatureFamily,
) -> CatalogEntry {
    CatalogEntry {
        name,
        abbrev,
        unit,
        range: (lo, hi),
        family,
    }
}

/// Quality state of one daily cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFlag {
    /// Observed value, untouched.
    Ok,
    /// Missing in the raw file (empty, `NaN`, `-1`, or `-2`) or a filled
    /// calendar gap.
    MissingRaw,
    /// Removed by anomaly detection.
    Anomaly,
    /// Filled in by imputation.
    Imputed,
}

/// One participant-day: values and flags aligned to the catalog order.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyRecord {
    pub date: NaiveDate,
    values: Vec<Option<f64>>,
    flags: Vec<CellFlag>,
}

impl DailyRecord {
    /// An all-missing record (used for calendar gaps).
    pub fn all_missing(date: NaiveDate, width: usize) -> Self {
        DailyRecord {
            date,
            values: vec![None; width],
            flags: vec![CellFlag::MissingRaw; width],
        }
    }

    pub fn from_cells(date: NaiveDate, cells: Vec<Option<f64>>) -> Self {
        let flags = cells
            .iter()
            .map(|c| match c {
                Some(_) => CellFlag::Ok,
                None => CellFlag::MissingRaw,
            })
            .collect();
        DailyRecord {
            date,
            values: cells,
            flags,
        }
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, idx: usize) -> Option<f64> {
        self.values[idx]
    }

    pub fn flag(&self, idx: usize) -> CellFlag {
        self.flags[idx]
    }

    pub fn set(&mut self, idx: usize, value: Option<f64>, flag: CellFlag) {
        self.values[idx] = value;
        self.flags[idx] = flag;
    }

    pub fn is_all_missing(&self) -> bool {
        self.values.iter().all(|v| v.is_none())
    }
}

/// A participant's date-ordered daily records on consecutive calendar days.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantSeries {
    pub participant_id: String,
    pub records: Vec<DailyRecord>,
}

impl ParticipantSeries {
    /// Builds a series from possibly gapped records: sorts by date and fills
    /// calendar gaps with all-missing days.
    pub fn from_records(
        participant_id: impl Into<String>,
        mut records: Vec<DailyRecord>,
        width: usize,
    ) -> Self {
        records.sort_by_key(|r| r.date);
        let mut filled: Vec<DailyRecord> = Vec::with_capacity(records.len());
        for rec in records {
            if let Some(prev) = filled.last() {
                let mut day = prev.date.succ_opt().expect("date range");
                while day < rec.date {
                    filled.push(DailyRecord::all_missing(day, width));
                    day = day.succ_opt().expect("date range");
                }
            }
            filled.push(rec);
        }
        ParticipantSeries {
            participant_id: participant_id.into(),
            records: filled,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Non-missing values of one column, in date order.
    pub fn column_values(&self, idx: usize) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.value(idx)).collect()
    }

    /// Asserts dates are strictly increasing consecutive days.
    pub fn check_continuity(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].date.succ_opt() == Some(w[1].date))
    }
}

/// A loaded cohort: catalog plus at least three participants.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub catalog: FeatureCatalog,
    pub participants: Vec<ParticipantSeries>,
}

impl Cohort {
    /// Validates participant uniqueness and the minimum size needed for a
    /// train/validation/test partition.
    pub fn new(catalog: FeatureCatalog, participants: Vec<ParticipantSeries>) -> Result<Self> {
        if participants.len() < 3 {
            return Err(Error::Config(format!(
                "cohort needs at least 3 participants, got {}",
                participants.len()
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for p in &participants {
            if !ids.insert(p.participant_id.clone()) {
                return Err(Error::Config(format!(
                    "duplicate participant id {}",
                    p.participant_id
                )));
            }
            if !p.check_continuity() {
                return Err(Error::Config(format!(
                    "participant {} has non-consecutive dates",
                    p.participant_id
                )));
            }
        }
        Ok(Cohort {
            catalog,
            participants,
        })
    }

    pub fn participant(&self, id: &str) -> Option<&ParticipantSeries> {
        self.participants.iter().find(|p| p.participant_id == id)
    }
}

/// The exact header of a per-participant CSV file.
pub fn csv_header(catalog: &FeatureCatalog) -> String {
    let mut cols = vec!["date"];
    cols.extend(catalog.entries().iter().map(|e| e.abbrev));
    cols.join(",")
}

/// One out-of-range observation found by [`validate_against_catalog`].
#[derive(Debug, Clone, Serialize)]
pub struct RangeViolation {
    pub participant_id: String,
    pub date: NaiveDate,
    pub abbrev: &'static str,
    pub value: f64,
    pub range: (f64, f64),
}

/// Reports every non-missing cell outside its catalog plausibility range.
/// Does not mutate the cohort.
pub fn validate_against_catalog(cohort: &Cohort) -> Vec<RangeViolation> {
    let mut out = Vec::new();
    for p in &cohort.participants {
        for rec in &p.records {
            for (idx, e) in cohort.catalog.entries().iter().enumerate() {
                if let Some(v) = rec.value(idx) {
                    if v < e.range.0 || v > e.range.1 {
                        out.push(RangeViolation {
                            participant_id: p.participant_id.clone(),
                            date: rec.date,
                            abbrev: e.abbrev,
                            value: v,
                            range: e.range,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Loads a cohort from a directory containing one CSV per participant.
///
/// The file stem becomes the participant id. Files are read in sorted name
/// order so the in-memory representation is deterministic. Blank lines and
/// `#`-prefixed comment lines are ignored.
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let catalog = FeatureCatalog::standard();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no participant CSV files in {}",
            dir.display()
        )));
    }
    let mut participants = Vec::with_capacity(paths.len());
    for path in paths {
        participants.push(load_participant(&path, &catalog)?);
    }
    Cohort::new(catalog, participants)
}

fn load_participant(path: &Path, catalog: &FeatureCatalog) -> Result<ParticipantSeries> {
    let file_name = path.display().to_string();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Schema {
            file: file_name.clone(),
            message: "file name is not valid UTF-8".into(),
        })?
        .to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&file_name, e))?;
    let expected = csv_header(catalog);
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Schema {
        file: file_name.clone(),
        message: "empty file".into(),
    })?;
    if header.trim_end() != expected {
        return Err(Error::Schema {
            file: file_name,
            message: format!("unexpected header {header:?}, want {expected:?}"),
        });
    }

    let width = catalog.len();
    let mut by_date: BTreeMap<NaiveDate, DailyRecord> = BTreeMap::new();
    for (line_idx, line) in lines {
        let line_no = line_idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 1 {
            return Err(Error::MalformedRow {
                file: file_name,
                line: line_no,
                message: format!("expected {} fields, got {}", width + 1, fields.len()),
            });
        }
        let date = NaiveDate::parse_from_str(fields[0].trim(), "%Y-%m-%d").map_err(|e| {
            Error::MalformedRow {
                file: file_name.clone(),
                line: line_no,
                message: format!("bad date {:?}: {e}", fields[0]),
            }
        })?;
        let mut cells = Vec::with_capacity(width);
        for (col, raw) in fields[1..].iter().enumerate() {
            cells.push(parse_cell(raw).map_err(|msg| Error::MalformedRow {
                file: file_name.clone(),
                line: line_no,
                message: format!("column {}: {msg}", catalog.entries()[col].abbrev),
            })?);
        }
        if by_date
            .insert(date, DailyRecord::from_cells(date, cells))
            .is_some()
        {
            return Err(Error::Schema {
                file: file_name,
                message: format!("duplicate date {date}"),
            });
        }
    }
    let records: Vec<DailyRecord> = by_date.into_values().collect();
    if records.is_empty() {
        return Err(Error::Schema {
            file: file_name,
            message: "no data rows".into(),
        });
    }
    Ok(ParticipantSeries::from_records(id, records, width))
}

/// Missing markers: empty cell, `NaN`, `-1`, `-2`. Everything else must be a
/// finite decimal number.
fn parse_cell(raw: &str) -> std::result::Result<Option<f64>, String> {
    let t = raw.trim();
    if t.is_empty() || t == "NaN" || t == "-1" || t == "-2" {
        return Ok(None);
    }
    let v: f64 = t.parse().map_err(|e| format!("bad number {t:?}: {e}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value {t:?}"));
    }
    Ok(Some(v))
}

/// Writes one CSV per participant in the standard layout.
///
/// Missing cells are written as empty fields; values use the shortest
/// round-trippable decimal form, so writing and reloading a raw cohort
/// reproduces it exactly.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for p in &cohort.participants {
        let path = dir.join(format!("{}.csv", p.participant_id));
        let mut out = String::new();
        out.push_str(&csv_header(&cohort.catalog));
        out.push('\n');
        for rec in &p.records {
            out.push_str(&rec.date.format("%Y-%m-%d").to_string());
            for idx in 0..cohort.catalog.len() {
                out.push(',');
                if let Some(v) = rec.value(idx) {
                    out.push_str(&format_value(v));
                }
            }
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn format_value(v: f64) -> String {
    // `{}` on f64 is the shortest representation that parses back exactly.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        // keep integers as-is
        let _ = &mut s;
    }
    s
}

impl fmt::Display for CellFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CellFlag::Ok => "ok",
            CellFlag::MissingRaw => "missing_raw",
            CellFlag::Anomaly => "anomaly",
            CellFlag::Imputed => "imputed",
        };
        f.write_str(s)
    }
}
