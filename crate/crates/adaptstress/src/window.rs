//! Sliding-window sample construction and per-fold dataset assembly.
//!
//! Windows are built on cleaned series only; a missing cell inside a window
//! is a pipeline-order violation and fails loudly rather than being skipped.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;

use crate::catalog::{Cohort, ParticipantSeries};
use crate::error::Error;
use crate::preprocess::Scaler;
use crate::rng::stream;
use crate::select::{run_selection, ForestConfig, SelectionResult, TARGET_FEATURES};
use crate::Result;

/// One forecasting sample: `w_in` days of selected features and the `w_out`
/// following days of scaled stress.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// Row-major `w_in x d` block of selected, scaled features.
    pub inputs: Vec<f64>,
    /// Scaled stress over the forecast horizon.
    pub targets: Vec<f64>,
    pub participant_id: String,
    /// Index into the fold's training-participant list; `None` for
    /// validation and test samples.
    pub domain_label: Option<usize>,
    /// Date of the last input day.
    pub anchor_date: NaiveDate,
    /// Scaled stress on the anchor day (persistence baseline input).
    pub anchor_stress: f64,
}

/// Expected sample count for a series of length `days`.
pub fn window_count(days: usize, w_in: usize, w_out: usize, step: usize) -> usize {
    assert!(step > 0);
    if days < w_in + w_out {
        0
    } else {
        (days - w_in - w_out) / step + 1
    }
}

/// Builds every fully covered window of a cleaned, scaled series.
///
/// `feature_columns` are catalog column indices of the selected predictors;
/// `stress_column` is the catalog index of the target.
pub fn make_windows(
    series: &ParticipantSeries,
    feature_columns: &[usize],
    stress_column: usize,
    w_in: usize,
    w_out: usize,
    step: usize,
) -> Result<Vec<WindowedSample>> {
    if w_in == 0 || w_out == 0 || step == 0 {
        return Err(Error::Config(
            "window sizes and step must be positive".into(),
        ));
    }
    let t = series.len();
    if t < w_in + w_out {
        log::warn!(
            "participant {}: {t} days cannot fit w_in={w_in} plus w_out={w_out}; no samples",
            series.participant_id
        );
        return Ok(Vec::new());
    }
    let d = feature_columns.len();
    let mut out = Vec::with_capacity(window_count(t, w_in, w_out, step));
    let mut start = 0;
    while start + w_in + w_out <= t {
        let mut inputs = Vec::with_capacity(w_in * d);
        for day in start..start + w_in {
            let rec = &series.records[day];
            for &col in feature_columns {
                inputs.push(rec.value(col).ok_or_else(|| missing(series, day, col))?);
            }
        }
        let mut targets = Vec::with_capacity(w_out);
        for day in start + w_in..start + w_in + w_out {
            let rec = &series.records[day];
            targets.push(
                rec.value(stress_column)
                    .ok_or_else(|| missing(series, day, stress_column))?,
            );
        }
        let anchor = &series.records[start + w_in - 1];
        let anchor_stress = anchor
            .value(stress_column)
            .ok_or_else(|| missing(series, start + w_in - 1, stress_column))?;
        out.push(WindowedSample {
            inputs,
            targets,
            participant_id: series.participant_id.clone(),
            domain_label: None,
            anchor_date: anchor.date,
            anchor_stress,
        });
        start += step;
    }
    Ok(out)
}

fn missing(series: &ParticipantSeries, day: usize, col: usize) -> Error {
    Error::Contract(format!(
        "participant {} day {} column {col} is missing inside a window; \
         imputation must run before windowing",
        series.participant_id, day
    ))
}

/// Leave-one-participant-out partition for one fold.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub fold_id: usize,
    pub test: String,
    pub val: String,
    pub train: Vec<String>,
}

/// Everything one fold needs: window sets plus the train-fitted scaler and
/// feature selection.
#[derive(Debug)]
pub struct FoldData {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub selection: SelectionResult,
    pub scaler: Scaler,
    /// Catalog column indices of the selected predictors.
    pub feature_columns: Vec<usize>,
    /// Domain label of each training participant.
    pub domain_of: BTreeMap<String, usize>,
}

/// Fits the scaler and feature selection on the fold's training participants
/// only, then windows all three partitions. Training samples are shuffled
/// with a fold-scoped RNG and carry domain labels.
pub fn assemble_fold(
    cohort: &Cohort,
    assignment: &FoldAssignment,
    w_in: usize,
    w_out: usize,
    forest_cfg: &ForestConfig,
    seed: u64,
) -> Result<FoldData> {
    let series_of = |id: &str| -> Result<&ParticipantSeries> {
        cohort.participant(id).ok_or_else(|| Error::Fold {
            fold: assignment.fold_id,
            message: format!("unknown participant {id}"),
        })
    };
    let train_series: Vec<&ParticipantSeries> = assignment
        .train
        .iter()
        .map(|id| series_of(id))
        .collect::<Result<_>>()?;
    let scaler = Scaler::fit(&cohort.catalog, &train_series)?;

    let scale = |s: &ParticipantSeries| {
        let mut c = s.clone();
        scaler.apply(&mut c);
        c
    };
    let scaled_train: Vec<ParticipantSeries> = train_series.iter().map(|s| scale(s)).collect();
    let scaled_val = scale(series_of(&assignment.val)?);
    let scaled_test = scale(series_of(&assignment.test)?);

    let stress_column = cohort.catalog.stress_index();
    let predictor_names: Vec<String> = cohort
        .catalog
        .predictor_abbrevs()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let predictor_columns: Vec<usize> = predictor_names
        .iter()
        .map(|a| cohort.catalog.index_of(a).unwrap())
        .collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in &scaled_train {
        for rec in &s.records {
            let row: Option<Vec<f64>> = predictor_columns
                .iter()
                .map(|&c| rec.value(c))
                .collect();
            match (row, rec.value(stress_column)) {
                (Some(row), Some(t)) => {
                    x.push(row);
                    y.push(t);
                }
                _ => {
                    return Err(Error::Fold {
                        fold: assignment.fold_id,
                        message: "missing cell in training data during selection".into(),
                    })
                }
            }
        }
    }
    let mut sel_rng = stream(seed, "selection", assignment.fold_id as u64);
    let selection = run_selection(
        &x,
        &y,
        &predictor_names,
        TARGET_FEATURES.min(predictor_names.len()),
        forest_cfg,
        &mut sel_rng,
    )?;
    let feature_columns: Vec<usize> = selection
        .kept
        .iter()
        .map(|a| cohort.catalog.index_of(a).unwrap())
        .collect();

    let mut domain_of = BTreeMap::new();
    let mut train = Vec::new();
    for (label, s) in scaled_train.iter().enumerate() {
        domain_of.insert(s.participant_id.clone(), label);
        let mut windows =
            make_windows(s, &feature_columns, stress_column, w_in, w_out, 1)?;
        for w in &mut windows {
            w.domain_label = Some(label);
        }
        train.extend(windows);
    }
    let val = make_windows(&scaled_val, &feature_columns, stress_column, w_in, w_out, 1)?;
    let test = make_windows(&scaled_test, &feature_columns, stress_column, w_in, w_out, 1)?;

    for (name, set) in [("training", &train), ("validation", &val), ("test", &test)] {
        if set.is_empty() {
            return Err(Error::Fold {
                fold: assignment.fold_id,
                message: format!("{name} partition produced no windows"),
            });
        }
    }

    let mut shuffle_rng = stream(seed, "fold-shuffle", assignment.fold_id as u64);
    train.shuffle(&mut shuffle_rng);

    Ok(FoldData {
        train,
        val,
        test,
        selection,
        scaler,
        feature_columns,
        domain_of,
    })
}

/// Stacks input blocks into one row-major `[n, w_in, d]` buffer.
pub fn stack_inputs(samples: &[WindowedSample]) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.iter().map(|s| s.inputs.len()).sum());
    for s in samples {
        out.extend_from_slice(&s.inputs);
    }
    out
}

/// Stacks targets into one row-major `[n, w_out]` buffer.
pub fn stack_targets(samples: &[WindowedSample]) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.iter().map(|s| s.targets.len()).sum());
    for s in samples {
        out.extend_from_slice(&s.targets);
    }
    out
}

/// Per-day feature rows from every sample's input block (`n * w_in` rows of
/// `d` values); the shift metrics consume these.
pub fn day_rows(samples: &[WindowedSample], d: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for s in samples {
        for day in s.inputs.chunks(d) {
            rows.push(day.to_vec());
        }
    }
    rows
}

const CACHE_MAGIC: &[u8; 4] = b"ADWC";
const CACHE_VERSION: u32 = 1;

/// Writes windows to a flat binary cache file.
pub fn save_window_cache(path: impl AsRef<Path>, samples: &[WindowedSample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        let id = s.participant_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        let epoch_days = s
            .anchor_date
            .signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).unwrap())
            .num_days();
        buf.extend_from_slice(&epoch_days.to_le_bytes());
        match s.domain_label {
            Some(l) => {
                buf.push(1);
                buf.extend_from_slice(&(l as u32).to_le_bytes());
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&0u32.to_le_bytes());
            }
        }
        buf.extend_from_slice(&s.anchor_stress.to_le_bytes());
        buf.extend_from_slice(&(s.inputs.len() as u32).to_le_bytes());
        for v in &s.inputs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(s.targets.len() as u32).to_le_bytes());
        for v in &s.targets {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a cache produced by [`save_window_cache`].
pub fn load_window_cache(path: impl AsRef<Path>) -> Result<Vec<WindowedSample>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    struct R<'a> {
        bytes: &'a [u8],
        pos: usize,
        path: String,
    }
    impl<'a> R<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(Error::Contract(format!(
                    "window cache {}: truncated",
                    self.path
                )));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            Ok(self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }
    let mut r = R {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let bad = |msg: &str| Error::Contract(format!("window cache {}: {msg}", path.display()));
    if r.take(4)? != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u32()? != CACHE_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id_len = r.u32()? as usize;
        let participant_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| bad("non-UTF-8 participant id"))?;
        let epoch_days = i64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let anchor_date = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()
            + chrono::Duration::days(epoch_days);
        let has_label = r.take(1)?[0] == 1;
        let label = r.u32()? as usize;
        let anchor_stress = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let ni = r.u32()? as usize;
        let inputs = r.f64s(ni)?;
        let nt = r.u32()? as usize;
        let targets = r.f64s(nt)?;
        out.push(WindowedSample {
            inputs,
            targets,
            participant_id,
            domain_label: has_label.then_some(label),
            anchor_date,
            anchor_stress,
        });
    }
    Ok(out)
}
