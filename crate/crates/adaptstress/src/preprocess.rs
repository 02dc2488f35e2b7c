//! Cleaning pipeline: edge trimming, anomaly detection, imputation, scaling.
//!
//! The fixed order is trim edges → anomaly detection → imputation → scaling.
//! Trimming through imputation operate on raw units and are cohort-global;
//! scaling is fit per evaluation fold on training participants only, so the
//! [`Scaler`] lives here but is applied later.

use serde::Serialize;

use crate::catalog::{CellFlag, Cohort, FeatureCatalog, ParticipantSeries, STRESS};
use crate::error::Error;
use crate::Result;

/// Tunables for the anomaly detectors.
#[derive(Debug, Clone)]
pub struct CleaningConfig {
    /// IQR fence multiplier. The conventional value is 1.5; the pipeline
    /// deliberately uses the more aggressive 1.0.
    pub iqr_multiplier: f64,
    /// Centered rolling window, in days, for the stress detector.
    pub rolling_window_days: usize,
    /// Deviation threshold in rolling standard deviations.
    pub rolling_k: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            iqr_multiplier: 1.0,
            rolling_window_days: 7,
            rolling_k: 3.0,
        }
    }
}

/// Drops the first and last day of a series.
pub fn trim_edge_days(series: &mut ParticipantSeries) -> Result<()> {
    if series.len() < 3 {
        return Err(Error::Contract(format!(
            "participant {}: need at least 3 days to trim edges, got {}",
            series.participant_id,
            series.len()
        )));
    }
    series.records.remove(0);
    series.records.pop();
    Ok(())
}

/// Quartile by linear interpolation between order statistics
/// (the `sorted[(n-1)*q]` convention).
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Flags values outside `[Q1 - m*IQR, Q3 + m*IQR]` as anomalies, where the
/// quartiles are over this participant's non-missing values of one feature.
/// Returns the number of flagged cells. Features with fewer than 4
/// observations are skipped with a warning.
pub fn detect_anomalies_iqr(
    series: &mut ParticipantSeries,
    catalog: &FeatureCatalog,
    abbrev: &str,
    multiplier: f64,
) -> Result<usize> {
    if abbrev == STRESS {
        return Err(Error::Contract(
            "IQR detector does not apply to the stress column".into(),
        ));
    }
    let idx = catalog
        .index_of(abbrev)
        .ok_or_else(|| Error::Config(format!("unknown feature {abbrev}")))?;
    let mut values = series.column_values(idx);
    if values.len() < 4 {
        log::warn!(
            "participant {}: {} has {} observations, skipping IQR detection",
            series.participant_id,
            abbrev,
            values.len()
        );
        return Ok(0);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile(&values, 0.25);
    let q3 = quantile(&values, 0.75);
    let iqr = q3 - q1;
    let lo = q1 - multiplier * iqr;
    let hi = q3 + multiplier * iqr;
    let mut flagged = 0;
    for rec in &mut series.records {
        if let Some(v) = rec.value(idx) {
            if v < lo || v > hi {
                rec.set(idx, None, CellFlag::Anomaly);
                flagged += 1;
            }
        }
    }
    Ok(flagged)
}

/// Flags stress values that sit more than `k` rolling standard deviations
/// from the rolling mean of their neighbors, plus exact zeros (sensor
/// artifacts). The window is centered and excludes the candidate day itself;
/// flags are decided on a snapshot of the original values, then applied.
pub fn detect_anomalies_rolling(
    series: &mut ParticipantSeries,
    catalog: &FeatureCatalog,
    window_days: usize,
    k: f64,
) -> Result<usize> {
    if window_days < 3 {
        return Err(Error::Config(format!(
            "rolling window must cover at least 3 days, got {window_days}"
        )));
    }
    let idx = catalog.stress_index();
    let snapshot: Vec<Option<f64>> = series.records.iter().map(|r| r.value(idx)).collect();
    let half = window_days / 2;
    let mut flags = Vec::new();
    for (i, cell) in snapshot.iter().enumerate() {
        let v = match cell {
            Some(v) => *v,
            None => continue,
        };
        if v == 0.0 {
            flags.push(i);
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(snapshot.len() - 1);
        let neighbors: Vec<f64> = (lo..=hi)
            .filter(|&j| j != i)
            .filter_map(|j| snapshot[j])
            .collect();
        if neighbors.len() < 2 {
            continue;
        }
        let n = neighbors.len() as f64;
        let mean = neighbors.iter().sum::<f64>() / n;
        let var = neighbors.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if (v - mean).abs() > k * var.sqrt() {
            flags.push(i);
        }
    }
    for &i in &flags {
        series.records[i].set(idx, None, CellFlag::Anomaly);
    }
    Ok(flags.len())
}

/// Replaces every missing cell with the participant's mean for that feature,
/// falling back to the cohort-wide mean when a participant has no
/// observations of it at all.
pub fn impute_mean(cohort: &mut Cohort) -> Result<()> {
    let width = cohort.catalog.len();
    let mut cohort_sum = vec![0.0; width];
    let mut cohort_count = vec![0usize; width];
    for p in &cohort.participants {
        for rec in &p.records {
            for idx in 0..width {
                if let Some(v) = rec.value(idx) {
                    cohort_sum[idx] += v;
                    cohort_count[idx] += 1;
                }
            }
        }
    }
    for idx in 0..width {
        if cohort_count[idx] == 0 {
            return Err(Error::Imputation {
                feature: cohort.catalog.entries()[idx].abbrev.to_string(),
                message: "no observations anywhere in the cohort".into(),
            });
        }
    }
    for p in &mut cohort.participants {
        for idx in 0..width {
            let values: Vec<f64> = p.records.iter().filter_map(|r| r.value(idx)).collect();
            let fill = if values.is_empty() {
                cohort_sum[idx] / cohort_count[idx] as f64
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            for rec in &mut p.records {
                if rec.value(idx).is_none() {
                    rec.set(idx, Some(fill), CellFlag::Imputed);
                }
            }
        }
    }
    Ok(())
}

/// Per-feature min-max normalizer fit on training participants only.
#[derive(Debug, Clone, Serialize)]
pub struct Scaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl Scaler {
    /// Fits the per-feature ranges. Errors on a constant feature, which
    /// would make the map degenerate.
    pub fn fit(catalog: &FeatureCatalog, training: &[&ParticipantSeries]) -> Result<Scaler> {
        let width = catalog.len();
        let mut mins = vec![f64::INFINITY; width];
        let mut maxs = vec![f64::NEG_INFINITY; width];
        for p in training {
            for rec in &p.records {
                for idx in 0..width {
                    if let Some(v) = rec.value(idx) {
                        mins[idx] = mins[idx].min(v);
                        maxs[idx] = maxs[idx].max(v);
                    }
                }
            }
        }
        for idx in 0..width {
            let abbrev = catalog.entries()[idx].abbrev;
            if !mins[idx].is_finite() || !maxs[idx].is_finite() {
                return Err(Error::Scaler {
                    feature: abbrev.to_string(),
                    message: "no observations in training data".into(),
                });
            }
            if maxs[idx] <= mins[idx] {
                return Err(Error::Scaler {
                    feature: abbrev.to_string(),
                    message: format!("constant at {} in training data", mins[idx]),
                });
            }
        }
        Ok(Scaler { mins, maxs })
    }

    /// Maps one value into [0,1], clipping out-of-range inputs.
    pub fn apply_value(&self, idx: usize, v: f64) -> f64 {
        ((v - self.mins[idx]) / (self.maxs[idx] - self.mins[idx])).clamp(0.0, 1.0)
    }

    /// Inverse of [`Scaler::apply_value`] for in-range values.
    pub fn invert_value(&self, idx: usize, scaled: f64) -> f64 {
        self.mins[idx] + scaled * (self.maxs[idx] - self.mins[idx])
    }

    /// Scales every cell of a series in place.
    pub fn apply(&self, series: &mut ParticipantSeries) {
        for rec in &mut series.records {
            for idx in 0..self.mins.len() {
                if let Some(v) = rec.value(idx) {
                    let flag = rec.flag(idx);
                    rec.set(idx, Some(self.apply_value(idx, v)), flag);
                }
            }
        }
    }

    pub fn min(&self, idx: usize) -> f64 {
        self.mins[idx]
    }

    pub fn max(&self, idx: usize) -> f64 {
        self.maxs[idx]
    }
}

/// Per-feature cell counts gathered while cleaning.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureQuality {
    pub abbrev: String,
    pub total_cells: usize,
    pub missing_raw: usize,
    pub anomalies: usize,
    pub imputed: usize,
    pub missing_rate: f64,
    pub anomaly_rate: f64,
}

/// Cohort-level cleaning summary, one row per catalog feature.
#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub participants: usize,
    pub days_after_trim: usize,
    pub features: Vec<FeatureQuality>,
}

/// Runs trim → IQR detection (predictors) → rolling detection (stress) →
/// imputation over the whole cohort, in raw units, and reports per-feature
/// counts.
pub fn clean_cohort(cohort: &mut Cohort, cfg: &CleaningConfig) -> Result<QualityReport> {
    let width = cohort.catalog.len();
    let predictors: Vec<String> = cohort
        .catalog
        .predictor_abbrevs()
        .iter()
        .map(|s| s.to_string())
        .collect();

    for p in &mut cohort.participants {
        trim_edge_days(p)?;
    }

    let mut missing_raw = vec![0usize; width];
    let mut total = vec![0usize; width];
    for p in &cohort.participants {
        for rec in &p.records {
            for idx in 0..width {
                total[idx] += 1;
                if rec.value(idx).is_none() {
                    missing_raw[idx] += 1;
                }
            }
        }
    }

    let mut anomalies = vec![0usize; width];
    let catalog = cohort.catalog.clone();
    for p in &mut cohort.participants {
        for abbrev in &predictors {
            let idx = catalog.index_of(abbrev).unwrap();
            anomalies[idx] +=
                detect_anomalies_iqr(p, &catalog, abbrev, cfg.iqr_multiplier)?;
        }
        anomalies[catalog.stress_index()] +=
            detect_anomalies_rolling(p, &catalog, cfg.rolling_window_days, cfg.rolling_k)?;
    }

    impute_mean(cohort)?;

    let mut imputed = vec![0usize; width];
    for p in &cohort.participants {
        for rec in &p.records {
            for idx in 0..width {
                if rec.flag(idx) == CellFlag::Imputed {
                    imputed[idx] += 1;
                }
            }
        }
    }

    let features = (0..width)
        .map(|idx| FeatureQuality {
            abbrev: cohort.catalog.entries()[idx].abbrev.to_string(),
            total_cells: total[idx],
            missing_raw: missing_raw[idx],
            anomalies: anomalies[idx],
            imputed: imputed[idx],
            missing_rate: missing_raw[idx] as f64 / total[idx] as f64,
            anomaly_rate: anomalies[idx] as f64 / total[idx] as f64,
        })
        .collect();

    Ok(QualityReport {
        participants: cohort.participants.len(),
        days_after_trim: cohort
            .participants
            .iter()
            .map(|p| p.len())
            .sum(),
        features,
    })
}
