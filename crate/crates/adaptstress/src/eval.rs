//! Forecast metrics, baselines, uncertainty bands, leave-one-participant-out
//! cross-validation, and the window-size sweep.
//!
//! All metrics are computed on scaled values. Pooled numbers flatten every
//! (sample, horizon day) pair; per-horizon numbers slice one forecast day
//! across samples. Trend direction compares day-over-day changes starting
//! from the last observed day, so a model that parrots the last observation
//! scores exactly the no-change rate.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Cohort;
use crate::error::Error;
use crate::model::{AdaptStressModel, ModelConfig};
use crate::rng::stream;
use crate::select::ForestConfig;
use crate::train::{train_phase1, TrainConfig, TrainRunRecord};
use crate::tta::{
    adapt_consistency, decide_tta, forecast_mse, probe_improvement, TtaConfig, TtaDecision,
    TtaEvidence, TtaHistoryStore, TtaStage,
};
use crate::window::{assemble_fold, day_rows, stack_inputs, FoldAssignment, FoldData, WindowedSample};
use crate::Result;

/// Mean squared error, mean absolute error, root mean squared error.
pub fn pointwise_errors(y: &[f64], y_hat: &[f64]) -> Result<(f64, f64, f64)> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::Contract(format!(
            "pointwise errors need equal nonempty lengths, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (a, b) in y.iter().zip(y_hat) {
        let d = b - a;
        sq += d * d;
        abs += d.abs();
    }
    let mse = sq / n;
    Ok((mse, abs / n, mse.sqrt()))
}

/// Product-moment correlation, or `Undefined` when either side has zero
/// variance. `Undefined` serializes as null, never as a silent zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(v) => Some(v),
            Correlation::Undefined => None,
        }
    }
}

pub fn pearson_r(y: &[f64], y_hat: &[f64]) -> Result<Correlation> {
    if y.len() < 2 || y.len() != y_hat.len() {
        return Err(Error::Contract(format!(
            "correlation needs two equal-length series of at least 2, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = y_hat.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vy = 0.0;
    let mut vp = 0.0;
    for (a, b) in y.iter().zip(y_hat) {
        cov += (a - my) * (b - mp);
        vy += (a - my) * (a - my);
        vp += (b - mp) * (b - mp);
    }
    if vy == 0.0 || vp == 0.0 {
        return Ok(Correlation::Undefined);
    }
    Ok(Correlation::Defined(cov / (vy * vp).sqrt()))
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of consecutive steps whose predicted change direction matches
/// the actual one. A zero change only matches a zero change.
pub fn trend_direction_accuracy(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() < 2 || y.len() != y_hat.len() {
        return Err(Error::Contract(format!(
            "trend accuracy needs two equal-length series of at least 2, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let mut matches = 0usize;
    for t in 1..y.len() {
        if sign(y[t] - y[t - 1]) == sign(y_hat[t] - y_hat[t - 1]) {
            matches += 1;
        }
    }
    Ok(matches as f64 / (y.len() - 1) as f64)
}

/// Mean over population standard deviation, or `Unbounded` when the values
/// do not disperse at all (treated as maximally consistent in rankings).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InverseCv {
    Value(f64),
    Unbounded,
}

pub fn inverse_cv(values: &[f64]) -> Result<InverseCv> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "inverse CV needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(InverseCv::Unbounded);
    }
    Ok(InverseCv::Value(mean / var.sqrt()))
}

/// One metric bundle over a set of (target, prediction) pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub pearson_r: Correlation,
    pub tda: f64,
}

/// Pooled metrics plus one bundle per forecast day.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub pooled: MetricSet,
    pub per_horizon: Vec<MetricSet>,
}

fn correlation_or_undefined(y: &[f64], y_hat: &[f64]) -> Result<Correlation> {
    if y.len() < 2 {
        return Ok(Correlation::Undefined);
    }
    pearson_r(y, y_hat)
}

/// Scores per-sample forecasts against windowed targets.
///
/// Trend direction prepends each window's last observed stress value, so
/// the first transition is the step from observation into the forecast.
pub fn forecast_metrics(
    samples: &[WindowedSample],
    preds: &[Vec<f64>],
) -> Result<HorizonMetrics> {
    if samples.is_empty() || samples.len() != preds.len() {
        return Err(Error::Contract(format!(
            "metrics need matching nonempty samples and predictions, got {} and {}",
            samples.len(),
            preds.len()
        )));
    }
    let w_out = samples[0].targets.len();
    for (s, p) in samples.iter().zip(preds) {
        if s.targets.len() != w_out || p.len() != w_out {
            return Err(Error::Contract(
                "inconsistent horizon length across samples".into(),
            ));
        }
    }

    let mut flat_y = Vec::with_capacity(samples.len() * w_out);
    let mut flat_p = Vec::with_capacity(samples.len() * w_out);
    let mut match_per_day = vec![0usize; w_out];
    for (s, p) in samples.iter().zip(preds) {
        flat_y.extend_from_slice(&s.targets);
        flat_p.extend_from_slice(p);
        let mut prev_y = s.anchor_stress;
        let mut prev_p = s.anchor_stress;
        for k in 0..w_out {
            if sign(s.targets[k] - prev_y) == sign(p[k] - prev_p) {
                match_per_day[k] += 1;
            }
            prev_y = s.targets[k];
            prev_p = p[k];
        }
    }
    let n = samples.len() as f64;
    let total_matches: usize = match_per_day.iter().sum();
    let (mse, mae, rmse) = pointwise_errors(&flat_y, &flat_p)?;
    let pooled = MetricSet {
        mse,
        mae,
        rmse,
        pearson_r: correlation_or_undefined(&flat_y, &flat_p)?,
        tda: total_matches as f64 / (n * w_out as f64),
    };

    let mut per_horizon = Vec::with_capacity(w_out);
    for k in 0..w_out {
        let yk: Vec<f64> = samples.iter().map(|s| s.targets[k]).collect();
        let pk: Vec<f64> = preds.iter().map(|p| p[k]).collect();
        let (mse, mae, rmse) = pointwise_errors(&yk, &pk)?;
        per_horizon.push(MetricSet {
            mse,
            mae,
            rmse,
            pearson_r: correlation_or_undefined(&yk, &pk)?,
            tda: match_per_day[k] as f64 / n,
        });
    }
    Ok(HorizonMetrics { pooled, per_horizon })
}

/// Predicts the window's last observed stress for every forecast day.
pub fn persistence_predictions(samples: &[WindowedSample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| vec![s.anchor_stress; s.targets.len()])
        .collect()
}

/// Predicts one constant (the training-set mean stress) everywhere.
pub fn constant_predictions(mean: f64, samples: &[WindowedSample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| vec![mean; s.targets.len()]).collect()
}

/// Mean of all target values across a window set.
pub fn mean_target(samples: &[WindowedSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        sum += s.targets.iter().sum::<f64>();
        count += s.targets.len();
    }
    if count == 0 {
        return Err(Error::Contract("no targets to average".into()));
    }
    Ok(sum / count as f64)
}

/// Model predictions for a window set, one row per sample.
pub fn model_predictions(
    model: &AdaptStressModel,
    samples: &[WindowedSample],
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to predict".into()));
    }
    let inputs = stack_inputs(samples);
    Ok(model.predict(&inputs, samples.len()))
}

/// Per-day prediction band from repeated stochastic forward passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Band {
    /// Mean over passes, flattened sample-major.
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Runs `passes` dropout-active forwards and returns mean ± 1.96 std per
/// predicted day.
pub fn uncertainty_band(
    model: &AdaptStressModel,
    samples: &[WindowedSample],
    passes: usize,
    seed: u64,
) -> Result<Band> {
    if passes < 2 {
        return Err(Error::Contract(format!(
            "uncertainty needs at least 2 passes, got {passes}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::Contract("no samples for uncertainty band".into()));
    }
    let b = samples.len();
    let t = model.cfg.w_in;
    let d = model.cfg.d_features;
    let w_out = model.cfg.w_out;
    let inputs = stack_inputs(samples);
    let x = crate::autodiff::Tensor::from_vec(&[b, t, d], inputs);
    let mut outputs = Vec::with_capacity(passes);
    for pass in 0..passes {
        let mut rng = stream(seed, "uncertainty", pass as u64);
        outputs.push(crate::autodiff::no_grad(|| {
            model.forward(&x, false, Some(&mut rng)).y_hat.to_vec()
        }));
    }
    let n = passes as f64;
    let mut mean = Vec::with_capacity(b * w_out);
    let mut lower = Vec::with_capacity(b * w_out);
    let mut upper = Vec::with_capacity(b * w_out);
    for i in 0..b * w_out {
        let m = outputs.iter().map(|o| o[i]).sum::<f64>() / n;
        let var = outputs.iter().map(|o| (o[i] - m) * (o[i] - m)).sum::<f64>() / n;
        let half = 1.96 * var.sqrt();
        mean.push(m);
        lower.push(m - half);
        upper.push(m + half);
    }
    Ok(Band { mean, lower, upper })
}

/// Model variants scored side by side in every fold.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    AdaptStress,
    ForcedTta,
    NoTta,
    Persistence,
    GlobalMean,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::AdaptStress => "ADAPT_STRESS",
            Variant::ForcedTta => "FORCED_TTA",
            Variant::NoTta => "NO_TTA",
            Variant::Persistence => "PERSISTENCE",
            Variant::GlobalMean => "GLOBAL_MEAN",
        };
        f.write_str(s)
    }
}

pub const ALL_VARIANTS: [Variant; 5] = [
    Variant::AdaptStress,
    Variant::ForcedTta,
    Variant::NoTta,
    Variant::Persistence,
    Variant::GlobalMean,
];

/// Forecast series of the selective model on the test participant, with the
/// stochastic band. Day `k` of sample `i` sits at `flat[i * w_out + k]` and
/// is the forecast for `anchor_dates[i] + k + 1` days.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSeries {
    pub anchor_dates: Vec<chrono::NaiveDate>,
    pub w_out: usize,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub band: Band,
}

/// Everything measured on one cross-validation fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub test_participant: String,
    pub val_participant: String,
    pub train_participants: Vec<String>,
    pub selected_features: Vec<String>,
    pub train_record: TrainRunRecord,
    pub variants: BTreeMap<Variant, HorizonMetrics>,
    pub tta: TtaDecision,
    /// Relative validation-MSE change appended to the adaptation history
    /// this fold, when any adaptation ran.
    pub history_change: Option<f64>,
    pub predictions: PredictionSeries,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Fold-averaged pooled metrics for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mse: MeanStd,
    pub mae: MeanStd,
    pub rmse: MeanStd,
    /// Averaged over folds where the correlation is defined; absent when no
    /// fold defines it.
    pub pearson_r: Option<MeanStd>,
    pub tda: MeanStd,
}

/// Unweighted mean over folds, per variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortAggregate {
    pub n_folds: usize,
    pub variants: BTreeMap<Variant, AggregateMetrics>,
}

pub fn aggregate_folds(folds: &[FoldResult]) -> Result<CohortAggregate> {
    if folds.is_empty() {
        return Err(Error::Contract("no folds to aggregate".into()));
    }
    let mut variants = BTreeMap::new();
    for variant in ALL_VARIANTS {
        let pooled: Vec<&MetricSet> = folds
            .iter()
            .map(|f| {
                f.variants
                    .get(&variant)
                    .map(|h| &h.pooled)
                    .ok_or_else(|| {
                        Error::Contract(format!("fold {} lacks variant {variant}", f.fold_id))
                    })
            })
            .collect::<Result<_>>()?;
        let collect = |get: fn(&MetricSet) -> f64| -> Vec<f64> {
            pooled.iter().map(|m| get(m)).collect()
        };
        let defined: Vec<f64> = pooled
            .iter()
            .filter_map(|m| m.pearson_r.value())
            .collect();
        variants.insert(
            variant,
            AggregateMetrics {
                mse: mean_std(&collect(|m| m.mse)),
                mae: mean_std(&collect(|m| m.mae)),
                rmse: mean_std(&collect(|m| m.rmse)),
                pearson_r: if defined.is_empty() {
                    None
                } else {
                    Some(mean_std(&defined))
                },
                tda: mean_std(&collect(|m| m.tda)),
            },
        );
    }
    Ok(CohortAggregate { n_folds: folds.len(), variants })
}

/// Full configuration of one cross-validation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoocvConfig {
    pub w_in: usize,
    pub w_out: usize,
    pub seed: u64,
    pub run_id: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub forest: ForestConfig,
    pub uncertainty_passes: usize,
}

/// One fold per participant: that participant is the test subject, a
/// validation participant is drawn uniformly from the rest with a
/// fold-scoped stream, and everyone else trains.
pub fn fold_assignments(cohort: &Cohort, seed: u64) -> Vec<FoldAssignment> {
    let ids: Vec<String> = cohort
        .participants
        .iter()
        .map(|p| p.participant_id.clone())
        .collect();
    ids.iter()
        .enumerate()
        .map(|(fold_id, test)| {
            let others: Vec<&String> = ids.iter().filter(|id| *id != test).collect();
            let mut rng = stream(seed, "fold-val", fold_id as u64);
            let val = others[rng.gen_range(0..others.len())].clone();
            let train: Vec<String> = others
                .into_iter()
                .filter(|id| **id != val)
                .cloned()
                .collect();
            FoldAssignment {
                fold_id,
                test: test.clone(),
                val,
                train,
            }
        })
        .collect()
}

fn evidence_probe_improvement(decision: &TtaDecision) -> Option<f64> {
    match &decision.evidence {
        TtaEvidence::Probe { improvement, .. } => Some(*improvement),
        _ => None,
    }
}

/// Runs one leave-one-participant-out fold end to end: selection, scaling,
/// windowing, supervised training, the adaptation decision, and metrics for
/// every variant.
pub fn run_fold(
    cohort: &Cohort,
    assignment: &FoldAssignment,
    cfg: &LoocvConfig,
    history: &mut TtaHistoryStore,
) -> Result<FoldResult> {
    run_fold_full(cohort, assignment, cfg, history).map(|(result, _, _)| result)
}

/// Like [`run_fold`] but also hands back the deployed model (after any
/// adaptation the cascade applied) and the assembled fold data, for callers
/// that go on to explain or checkpoint the fold.
pub fn run_fold_full(
    cohort: &Cohort,
    assignment: &FoldAssignment,
    cfg: &LoocvConfig,
    history: &mut TtaHistoryStore,
) -> Result<(FoldResult, AdaptStressModel, FoldData)> {
    let fold = assignment.fold_id;
    let data = assemble_fold(cohort, assignment, cfg.w_in, cfg.w_out, &cfg.forest, cfg.seed)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.d_features = data.feature_columns.len();
    model_cfg.w_in = cfg.w_in;
    model_cfg.w_out = cfg.w_out;
    model_cfg.n_domains = assignment.train.len();

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = stream(cfg.seed, "fold-train", fold as u64).r#gen();

    let (model, train_record) = train_phase1(fold, &data.train, &data.val, &model_cfg, &train_cfg)?;

    let d = data.feature_columns.len();
    let source_rows = day_rows(&data.train, d);
    let target_rows = day_rows(&data.test, d);
    let probe_seed: u64 = stream(cfg.seed, "tta-probe", fold as u64).r#gen();
    let adapt_seed: u64 = stream(cfg.seed, "tta-adapt", fold as u64).r#gen();
    let mut probe = || probe_improvement(&model, &data.val, &cfg.tta, probe_seed);
    let decision = decide_tta(
        &assignment.test,
        history,
        &source_rows,
        &target_rows,
        &cfg.tta,
        &mut probe,
    )?;

    let adapt = |out_of: &AdaptStressModel| -> Result<AdaptStressModel> {
        Ok(adapt_consistency(out_of, &data.test, cfg.tta.epochs, &cfg.tta, adapt_seed)?.model)
    };

    let mut history_change = None;
    let (selective, forced);
    if decision.apply {
        let adapted = adapt(&model)?;
        let before = forecast_mse(&model, &data.val)?;
        let after = forecast_mse(&adapted, &data.val)?;
        if before > 0.0 {
            let change = (before - after) / before;
            history.append(&assignment.test, &cfg.run_id, change)?;
            history_change = Some(change);
        }
        forced = adapted.deep_clone()?;
        selective = adapted;
    } else {
        if decision.stage == TtaStage::ProbeSkip {
            if let Some(improvement) = evidence_probe_improvement(&decision) {
                history.append(&assignment.test, &cfg.run_id, improvement)?;
                history_change = Some(improvement);
            }
        }
        forced = adapt(&model)?;
        selective = model.deep_clone()?;
    }

    let mut variants = BTreeMap::new();
    variants.insert(
        Variant::NoTta,
        forecast_metrics(&data.test, &model_predictions(&model, &data.test)?)?,
    );
    let selective_preds = model_predictions(&selective, &data.test)?;
    variants.insert(
        Variant::AdaptStress,
        forecast_metrics(&data.test, &selective_preds)?,
    );
    variants.insert(
        Variant::ForcedTta,
        forecast_metrics(&data.test, &model_predictions(&forced, &data.test)?)?,
    );
    variants.insert(
        Variant::Persistence,
        forecast_metrics(&data.test, &persistence_predictions(&data.test))?,
    );
    let train_mean = mean_target(&data.train)?;
    variants.insert(
        Variant::GlobalMean,
        forecast_metrics(&data.test, &constant_predictions(train_mean, &data.test))?,
    );

    let band_seed: u64 = stream(cfg.seed, "band", fold as u64).r#gen();
    let band = uncertainty_band(&selective, &data.test, cfg.uncertainty_passes, band_seed)?;
    let predictions = PredictionSeries {
        anchor_dates: data.test.iter().map(|s| s.anchor_date).collect(),
        w_out: cfg.w_out,
        actual: data.test.iter().flat_map(|s| s.targets.clone()).collect(),
        predicted: selective_preds.into_iter().flatten().collect(),
        band,
    };

    let result = FoldResult {
        fold_id: fold,
        test_participant: assignment.test.clone(),
        val_participant: assignment.val.clone(),
        train_participants: assignment.train.clone(),
        selected_features: data.selection.kept.clone(),
        train_record,
        variants,
        tta: decision,
        history_change,
        predictions,
    };
    Ok((result, selective, data))
}

/// Cross-validates the whole cohort: one fold per participant, aggregated
/// as the unweighted mean over folds.
pub fn run_loocv(
    cohort: &Cohort,
    cfg: &LoocvConfig,
    history: &mut TtaHistoryStore,
) -> Result<(Vec<FoldResult>, CohortAggregate)> {
    let assignments = fold_assignments(cohort, cfg.seed);
    let mut folds = Vec::with_capacity(assignments.len());
    for assignment in &assignments {
        log::info!(
            "fold {}: test {}, val {}",
            assignment.fold_id,
            assignment.test,
            assignment.val
        );
        folds.push(run_fold(cohort, assignment, cfg, history)?);
    }
    let aggregate = aggregate_folds(&folds)?;
    Ok((folds, aggregate))
}

/// One grid cell of the window-size sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub w_in: usize,
    pub w_out: usize,
    pub aggregate: CohortAggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

/// Runs cross-validation over every (w_in, w_out) pair. Cells run in order
/// and share the adaptation history, so later cells can reuse what earlier
/// cells learned about each participant.
pub fn run_sweep(
    cohort: &Cohort,
    base: &LoocvConfig,
    w_ins: &[usize],
    w_outs: &[usize],
    history: &mut TtaHistoryStore,
) -> Result<SweepReport> {
    let mut cells = Vec::with_capacity(w_ins.len() * w_outs.len());
    for &w_in in w_ins {
        for &w_out in w_outs {
            let mut cfg = base.clone();
            cfg.w_in = w_in;
            cfg.w_out = w_out;
            cfg.run_id = format!("{}-in{w_in}-out{w_out}", base.run_id);
            log::info!("sweep cell w_in={w_in} w_out={w_out}");
            let (_, aggregate) = run_loocv(cohort, &cfg, history)?;
            cells.push(SweepCell { w_in, w_out, aggregate });
        }
    }
    Ok(SweepReport { cells })
}

/// Renders the sweep as CSV with one row per (cell, variant, metric).
pub fn sweep_to_csv(report: &SweepReport) -> String {
    let mut out = String::from("w_in,w_out,model_variant,metric,mean,std\n");
    for cell in &report.cells {
        for (variant, agg) in &cell.aggregate.variants {
            let rows: [(&str, Option<MeanStd>); 5] = [
                ("mse", Some(agg.mse)),
                ("mae", Some(agg.mae)),
                ("rmse", Some(agg.rmse)),
                ("pearson_r", agg.pearson_r),
                ("tda", Some(agg.tda)),
            ];
            for (metric, value) in rows {
                match value {
                    Some(ms) => out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        cell.w_in, cell.w_out, variant, metric, ms.mean, ms.std
                    )),
                    None => out.push_str(&format!(
                        "{},{},{},{},NA,NA\n",
                        cell.w_in, cell.w_out, variant, metric
                    )),
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortSpec};
    use chrono::NaiveDate;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn pointwise_matches_hand_values() {
        let (mse, mae, rmse) = pointwise_errors(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((mse, mae, rmse), (0.0, 0.0, 0.0));
        let (mse, mae, rmse) = pointwise_errors(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((mse, mae, rmse), (1.0, 1.0, 1.0));
        let (mse, mae, rmse) =
            pointwise_errors(&[0.2, 0.4, 0.6], &[0.3, 0.3, 0.7]).unwrap();
        assert_close(mse, 0.01, 1e-12);
        assert_close(mae, 0.1, 1e-12);
        assert_close(rmse, 0.1, 1e-12);
        assert!(pointwise_errors(&[], &[]).is_err());
        assert!(pointwise_errors(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_squares_back_to_mse() {
        let (mse, _, rmse) =
            pointwise_errors(&[0.1, 0.9, 0.4], &[0.2, 0.55, 0.8]).unwrap();
        assert_close(rmse * rmse, mse, 1e-12);
    }

    #[test]
    fn pearson_matches_hand_values() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pearson_r(&y, &y).unwrap(), Correlation::Defined(1.0));
        let anti: Vec<f64> = y.iter().map(|v| -v + 7.0).collect();
        let r = pearson_r(&y, &anti).unwrap().value().unwrap();
        assert_close(r, -1.0, 1e-12);
        let r = pearson_r(&y, &[1.0, 3.0, 2.0, 4.0]).unwrap().value().unwrap();
        assert_close(r, 0.8, 1e-12);
    }

    #[test]
    fn pearson_zero_variance_is_undefined() {
        let flat = [2.0, 2.0, 2.0];
        let moving = [1.0, 2.0, 3.0];
        assert_eq!(pearson_r(&flat, &moving).unwrap(), Correlation::Undefined);
        assert_eq!(pearson_r(&moving, &flat).unwrap(), Correlation::Undefined);
        assert_eq!(
            serde_json::to_string(&Correlation::Undefined).unwrap(),
            "null"
        );
        assert_eq!(
            serde_json::from_str::<Correlation>("0.5").unwrap(),
            Correlation::Defined(0.5)
        );
        assert_eq!(
            serde_json::from_str::<Correlation>("null").unwrap(),
            Correlation::Undefined
        );
    }

    #[test]
    fn trend_accuracy_matches_hand_values() {
        let tda =
            trend_direction_accuracy(&[1.0, 2.0, 1.0, 3.0], &[0.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(tda, 1.0);
        let tda = trend_direction_accuracy(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(tda, 0.0);
        let tda = trend_direction_accuracy(&[1.0, 1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(tda, 0.0);
        assert!(trend_direction_accuracy(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn inverse_cv_matches_hand_values() {
        match inverse_cv(&[1.0, 2.0, 3.0]).unwrap() {
            InverseCv::Value(v) => assert_close(v, 2.0 / (2.0f64 / 3.0).sqrt(), 1e-12),
            InverseCv::Unbounded => panic!("unexpected unbounded"),
        }
        assert_eq!(inverse_cv(&[4.0, 4.0, 4.0]).unwrap(), InverseCv::Unbounded);
        let base = inverse_cv(&[1.0, 2.0, 5.0]).unwrap().into_value();
        let scaled = inverse_cv(&[3.0, 6.0, 15.0]).unwrap().into_value();
        assert_close(base, scaled, 1e-12);
        assert!(inverse_cv(&[1.0]).is_err());
    }

    impl InverseCv {
        fn into_value(self) -> f64 {
            match self {
                InverseCv::Value(v) => v,
                InverseCv::Unbounded => panic!("unbounded"),
            }
        }
    }

    fn oracle_mse(y: &[f64], p: &[f64]) -> f64 {
        y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
    }

    fn oracle_pearson(y: &[f64], p: &[f64]) -> f64 {
        let n = y.len() as f64;
        let my = y.iter().sum::<f64>() / n;
        let mp = p.iter().sum::<f64>() / n;
        let cov: f64 = y.iter().zip(p).map(|(a, b)| (a - my) * (b - mp)).sum();
        let vy: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
        let vp: f64 = p.iter().map(|b| (b - mp).powi(2)).sum();
        cov / (vy.sqrt() * vp.sqrt())
    }

    #[test]
    fn metrics_match_brute_force_on_random_pairs() {
        let mut rng = stream(402, "eval-oracle", 0);
        for _ in 0..250 {
            let n = rng.gen_range(2..40);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (mse, mae, rmse) = pointwise_errors(&y, &p).unwrap();
            assert_close(mse, oracle_mse(&y, &p), 1e-9);
            let oracle_mae =
                y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
            assert_close(mae, oracle_mae, 1e-9);
            assert_close(rmse, oracle_mse(&y, &p).sqrt(), 1e-9);
            let r = pearson_r(&y, &p).unwrap().value().unwrap();
            assert_close(r, oracle_pearson(&y, &p), 1e-9);
            let mut matches = 0;
            for t in 1..n {
                let dy = y[t] - y[t - 1];
                let dp = p[t] - p[t - 1];
                if (dy > 0.0 && dp > 0.0)
                    || (dy < 0.0 && dp < 0.0)
                    || (dy == 0.0 && dp == 0.0)
                {
                    matches += 1;
                }
            }
            let tda = trend_direction_accuracy(&y, &p).unwrap();
            assert_close(tda, matches as f64 / (n - 1) as f64, 1e-9);
        }
    }

    fn sample(anchor: f64, targets: Vec<f64>, day: u32) -> WindowedSample {
        WindowedSample {
            inputs: vec![0.0; targets.len()],
            targets,
            participant_id: "P01".into(),
            domain_label: None,
            anchor_date: NaiveDate::from_ymd_opt(2025, 3, day).unwrap(),
            anchor_stress: anchor,
        }
    }

    #[test]
    fn persistence_is_perfect_on_constant_series() {
        let samples: Vec<WindowedSample> =
            (1..=5).map(|d| sample(0.4, vec![0.4, 0.4], d)).collect();
        let m = forecast_metrics(&samples, &persistence_predictions(&samples)).unwrap();
        assert_eq!(m.pooled.mse, 0.0);
        assert_eq!(m.pooled.tda, 1.0);
    }

    #[test]
    fn persistence_trend_score_is_the_no_change_rate() {
        let series = [1.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0];
        let samples: Vec<WindowedSample> = (0..series.len() - 1)
            .map(|i| sample(series[i], vec![series[i + 1]], i as u32 + 1))
            .collect();
        let m = forecast_metrics(&samples, &persistence_predictions(&samples)).unwrap();
        let no_change = series
            .windows(2)
            .filter(|w| w[0] == w[1])
            .count() as f64
            / (series.len() - 1) as f64;
        assert_eq!(m.pooled.tda, no_change);
        assert_eq!(no_change, 3.0 / 6.0);
    }

    #[test]
    fn constant_prediction_mse_is_target_variance() {
        let targets = [0.2, 0.5, 0.9, 0.3, 0.7];
        let samples: Vec<WindowedSample> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| sample(0.0, vec![t], i as u32 + 1))
            .collect();
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>()
            / targets.len() as f64;
        let m =
            forecast_metrics(&samples, &constant_predictions(mean, &samples)).unwrap();
        assert_close(m.pooled.mse, var, 1e-12);
        assert_eq!(m.pooled.pearson_r, Correlation::Undefined);
    }

    #[test]
    fn per_horizon_slices_line_up_with_pooled() {
        let samples = vec![
            sample(0.5, vec![0.6, 0.4], 1),
            sample(0.4, vec![0.2, 0.9], 2),
            sample(0.8, vec![0.8, 0.1], 3),
        ];
        let preds = vec![
            vec![0.55, 0.45],
            vec![0.30, 0.80],
            vec![0.80, 0.20],
        ];
        let m = forecast_metrics(&samples, &preds).unwrap();
        assert_eq!(m.per_horizon.len(), 2);
        let pooled_mse_manual = (m.per_horizon[0].mse + m.per_horizon[1].mse) / 2.0;
        assert_close(m.pooled.mse, pooled_mse_manual, 1e-12);
        // day 1 trends: actual (+,−,0) vs predicted (+,−,0) all match
        assert_eq!(m.per_horizon[0].tda, 1.0);
    }

    fn tiny_model(dropout: f64, w_in: usize, w_out: usize) -> AdaptStressModel {
        let cfg = ModelConfig {
            d_features: 3,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            w_in,
            w_out,
            n_domains: 2,
            dropout,
            grl_alpha: 0.0,
        };
        AdaptStressModel::new(cfg, 77).unwrap()
    }

    fn band_samples(w_in: usize, w_out: usize) -> Vec<WindowedSample> {
        let mut rng = stream(9, "band-data", 0);
        (0..6)
            .map(|i| WindowedSample {
                inputs: (0..w_in * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
                targets: (0..w_out).map(|_| rng.gen_range(0.0..1.0)).collect(),
                participant_id: "P01".into(),
                domain_label: None,
                anchor_date: NaiveDate::from_ymd_opt(2025, 4, i + 1).unwrap(),
                anchor_stress: 0.5,
            })
            .collect()
    }

    #[test]
    fn zero_dropout_band_has_zero_width() {
        let model = tiny_model(0.0, 3, 2);
        let samples = band_samples(3, 2);
        let band = uncertainty_band(&model, &samples, 5, 1).unwrap();
        for i in 0..band.mean.len() {
            assert_close(band.upper[i] - band.lower[i], 0.0, 1e-12);
            assert!(band.lower[i] <= band.mean[i] && band.mean[i] <= band.upper[i]);
        }
    }

    #[test]
    fn band_width_grows_with_dropout() {
        let samples = band_samples(3, 2);
        let mut widths = Vec::new();
        for dropout in [0.0, 0.1, 0.3] {
            let model = tiny_model(dropout, 3, 2);
            let band = uncertainty_band(&model, &samples, 30, 1).unwrap();
            let avg: f64 = band
                .mean
                .iter()
                .enumerate()
                .map(|(i, _)| band.upper[i] - band.lower[i])
                .sum::<f64>()
                / band.mean.len() as f64;
            widths.push(avg);
        }
        assert!(widths[0] < widths[1] && widths[1] < widths[2], "{widths:?}");
    }

    #[test]
    fn too_few_passes_is_an_error() {
        let model = tiny_model(0.1, 3, 1);
        let samples = band_samples(3, 1);
        assert!(uncertainty_band(&model, &samples, 1, 0).is_err());
    }

    fn small_cohort(n: usize, seed: u64) -> Cohort {
        let mut spec = CohortSpec::preset(seed);
        spec.n_participants = n;
        spec.days_min = 26;
        spec.days_max = 30;
        let last = crate::synth::participant_id(n - 1);
        spec.coupling_table.retain(|id, _| {
            let idx: usize = id[1..].parse().unwrap();
            idx <= n
        });
        assert!(spec.coupling_table.contains_key(&last));
        let mut cohort = generate_cohort(&spec).unwrap().0;
        crate::preprocess::clean_cohort(&mut cohort, &Default::default()).unwrap();
        cohort
    }

    fn quick_cfg(seed: u64) -> LoocvConfig {
        LoocvConfig {
            w_in: 3,
            w_out: 1,
            seed,
            run_id: "test".into(),
            model: ModelConfig {
                d_features: 0,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 8,
                w_in: 3,
                w_out: 1,
                n_domains: 0,
                dropout: 0.1,
                grl_alpha: 0.05,
            },
            train: TrainConfig {
                epochs: 3,
                patience: 3,
                warmup_epochs: 1,
                ..TrainConfig::default()
            },
            tta: TtaConfig {
                epochs: 2,
                probe_epochs: 1,
                ..TtaConfig::default()
            },
            forest: ForestConfig {
                n_trees: 15,
                ..ForestConfig::default()
            },
            uncertainty_passes: 4,
        }
    }

    #[test]
    fn fold_assignments_partition_the_cohort() {
        let cohort = small_cohort(4, 21);
        let assignments = fold_assignments(&cohort, 13);
        assert_eq!(assignments.len(), 4);
        let ids: Vec<String> = cohort
            .participants
            .iter()
            .map(|p| p.participant_id.clone())
            .collect();
        for (i, a) in assignments.iter().enumerate() {
            assert_eq!(a.test, ids[i]);
            assert_ne!(a.val, a.test);
            assert!(!a.train.contains(&a.test));
            assert!(!a.train.contains(&a.val));
            let mut all = a.train.clone();
            all.push(a.test.clone());
            all.push(a.val.clone());
            all.sort();
            let mut expect = ids.clone();
            expect.sort();
            assert_eq!(all, expect);
        }
        let again = fold_assignments(&cohort, 13);
        for (a, b) in assignments.iter().zip(&again) {
            assert_eq!(a.val, b.val);
        }
    }

    #[test]
    fn loocv_runs_on_a_minimal_cohort() {
        let cohort = small_cohort(3, 33);
        let cfg = quick_cfg(5);
        let mut history = TtaHistoryStore::in_memory();
        let (folds, aggregate) = run_loocv(&cohort, &cfg, &mut history).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(aggregate.n_folds, 3);
        let tested: Vec<&str> = folds.iter().map(|f| f.test_participant.as_str()).collect();
        assert_eq!(tested, vec!["P01", "P02", "P03"]);
        for f in &folds {
            assert_eq!(f.train_participants.len(), 1);
            for h in f.variants.values() {
                assert_close(h.pooled.rmse * h.pooled.rmse, h.pooled.mse, 1e-12);
            }
            assert_eq!(
                f.predictions.predicted.len(),
                f.predictions.actual.len()
            );
        }
        let mean_mse: f64 = folds
            .iter()
            .map(|f| f.variants[&Variant::AdaptStress].pooled.mse)
            .sum::<f64>()
            / folds.len() as f64;
        assert_close(
            aggregate.variants[&Variant::AdaptStress].mse.mean,
            mean_mse,
            1e-12,
        );
    }

    #[test]
    fn loocv_is_deterministic() {
        let cohort = small_cohort(3, 44);
        let cfg = quick_cfg(6);
        let mut h1 = TtaHistoryStore::in_memory();
        let mut h2 = TtaHistoryStore::in_memory();
        let (f1, a1) = run_loocv(&cohort, &cfg, &mut h1).unwrap();
        let (f2, a2) = run_loocv(&cohort, &cfg, &mut h2).unwrap();
        for (x, y) in f1.iter().zip(&f2) {
            assert_eq!(x.val_participant, y.val_participant);
            assert_eq!(x.selected_features, y.selected_features);
            assert_eq!(
                x.variants[&Variant::AdaptStress].pooled.mse,
                y.variants[&Variant::AdaptStress].pooled.mse
            );
            assert_eq!(x.tta.stage, y.tta.stage);
        }
        assert_eq!(
            serde_json::to_string(&a1).unwrap(),
            serde_json::to_string(&a2).unwrap()
        );
    }

    #[test]
    fn sweep_csv_is_stable_and_complete() {
        let cohort = small_cohort(3, 55);
        let cfg = quick_cfg(7);
        let mut history = TtaHistoryStore::in_memory();
        let report = run_sweep(&cohort, &cfg, &[3, 4], &[1], &mut history).unwrap();
        assert_eq!(report.cells.len(), 2);
        let csv = sweep_to_csv(&report);
        let again = sweep_to_csv(&report);
        assert_eq!(csv, again);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "w_in,w_out,model_variant,metric,mean,std");
        assert_eq!(lines.len(), 1 + 2 * 5 * 5);
        assert!(csv.contains("ADAPT_STRESS"));
        assert!(csv.contains("PERSISTENCE"));
    }
}
