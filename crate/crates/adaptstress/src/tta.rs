//! Distribution-shift scoring, the selective adaptation cascade, and
//! consistency-based test-time adaptation.
//!
//! Shift between a participant's training distribution and their held-out
//! data is scored by three metrics (mean discrepancy, histogram KL
//! divergence, variance ratio) combined into `s_dist` in [0, 1]. A four-stage
//! cascade then decides whether adapting is worth it: past outcomes for the
//! participant, then the shift score, then a short probe run. Adaptation
//! itself minimizes prediction consistency under input noise; no labels are
//! used.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tensor};
use crate::error::Error;
use crate::model::AdaptStressModel;
use crate::rng::stream;
use crate::window::{stack_inputs, stack_targets, WindowedSample};
use crate::Result;

const KL_BINS: usize = 16;
const KL_SMOOTHING: f64 = 1e-6;
const VAR_FLOOR: f64 = 1e-12;

/// Shift metrics for one source/target pair, plus their weighted combination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftReport {
    pub mmd: f64,
    pub kl: f64,
    pub variance_ratio_score: f64,
    pub s_dist: f64,
}

/// Component weights for `s_dist`; must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftWeights {
    pub mmd: f64,
    pub kl: f64,
    pub variance: f64,
}

impl Default for ShiftWeights {
    fn default() -> Self {
        ShiftWeights { mmd: 1.0 / 3.0, kl: 1.0 / 3.0, variance: 1.0 / 3.0 }
    }
}

/// Thresholds and adaptation hyperparameters for the cascade.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtaConfig {
    pub weights: ShiftWeights,
    /// Below this `s_dist` the shift is considered negligible.
    pub low_shift: f64,
    /// Above this `s_dist` the shift is considered strong.
    pub high_shift: f64,
    /// Minimum recorded runs before history can decide.
    pub history_min: usize,
    /// Mean past change above this applies without probing.
    pub history_apply: f64,
    /// Mean past change below this skips without probing.
    pub history_skip: f64,
    /// Probe improvement above this applies.
    pub probe_threshold: f64,
    pub epochs: usize,
    pub probe_epochs: usize,
    pub lr: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub batch_size: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            weights: ShiftWeights::default(),
            low_shift: 0.3,
            high_shift: 0.6,
            history_min: 3,
            history_apply: 0.02,
            history_skip: -0.05,
            probe_threshold: 0.02,
            epochs: 10,
            probe_epochs: 3,
            lr: 1e-4,
            sigma1: 0.01,
            sigma2: 0.02,
            batch_size: 32,
        }
    }
}

fn check_matrix(name: &str, rows: &[Vec<f64>], min_rows: usize) -> Result<usize> {
    if rows.len() < min_rows {
        return Err(Error::Contract(format!(
            "{name} needs at least {min_rows} samples, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Contract(format!("{name} rows must share a nonzero width")));
    }
    Ok(d)
}

fn feature_means(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut means = vec![0.0; d];
    for row in rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= rows.len() as f64;
    }
    means
}

fn feature_variances(rows: &[Vec<f64>], means: &[f64]) -> Vec<f64> {
    let mut vars = vec![0.0; means.len()];
    for row in rows {
        for ((s, v), m) in vars.iter_mut().zip(row).zip(means) {
            let c = v - m;
            *s += c * c;
        }
    }
    for v in &mut vars {
        *v /= rows.len() as f64;
    }
    vars
}

/// Squared Euclidean distance between the per-feature mean vectors
/// (linear-kernel squared mean discrepancy). Expects both sets already
/// standardized by source statistics.
pub fn mmd(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    let d = check_matrix("mmd source", source, 1)?;
    let dt = check_matrix("mmd target", target, 1)?;
    if d != dt {
        return Err(Error::Contract(format!("mmd feature widths differ: {d} vs {dt}")));
    }
    let ms = feature_means(source, d);
    let mt = feature_means(target, d);
    Ok(ms.iter().zip(&mt).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Histogram KL(source || target) per feature, averaged. 16 equal-width
/// bins over the pooled range of each feature, counts smoothed additively.
pub fn kl_divergence(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    let d = check_matrix("kl source", source, 1)?;
    let dt = check_matrix("kl target", target, 1)?;
    if d != dt {
        return Err(Error::Contract(format!("kl feature widths differ: {d} vs {dt}")));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in source.iter().chain(target) {
            lo = lo.min(row[j]);
            hi = hi.max(row[j]);
        }
        let width = hi - lo;
        let hist = |rows: &[Vec<f64>]| -> Vec<f64> {
            let mut counts = vec![0.0; KL_BINS];
            for row in rows {
                let bin = if width == 0.0 {
                    0
                } else {
                    (((row[j] - lo) / width * KL_BINS as f64) as usize).min(KL_BINS - 1)
                };
                counts[bin] += 1.0;
            }
            let n = rows.len() as f64 + KL_BINS as f64 * KL_SMOOTHING;
            counts.iter().map(|c| (c + KL_SMOOTHING) / n).collect()
        };
        let p = hist(source);
        let q = hist(target);
        total += p
            .iter()
            .zip(&q)
            .map(|(p, q)| p * (p / q).ln())
            .sum::<f64>();
    }
    Ok(total / d as f64)
}

/// Mean over features of `1 - 1/r` where `r` is the larger-over-smaller
/// variance ratio. 0 for matched variances, approaching 1 as they diverge.
pub fn variance_ratio_score(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    let d = check_matrix("variance source", source, 2)?;
    let dt = check_matrix("variance target", target, 2)?;
    if d != dt {
        return Err(Error::Contract(format!(
            "variance feature widths differ: {d} vs {dt}"
        )));
    }
    let vs = feature_variances(source, &feature_means(source, d));
    let vt = feature_variances(target, &feature_means(target, d));
    let mut total = 0.0;
    for (a, b) in vs.iter().zip(&vt) {
        let a = a.max(VAR_FLOOR);
        let b = b.max(VAR_FLOOR);
        let r = a.max(b) / a.min(b);
        total += 1.0 - 1.0 / r;
    }
    Ok(total / d as f64)
}

/// Weighted combination of the three metrics; the unbounded two are squashed
/// to [0, 1) via `x / (x + 1)` first.
pub fn shift_score(
    mmd: f64,
    kl: f64,
    variance_score: f64,
    weights: &ShiftWeights,
) -> Result<f64> {
    let sum = weights.mmd + weights.kl + weights.variance;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("shift weights must sum to 1, got {sum}")));
    }
    let squash = |x: f64| x / (x + 1.0);
    Ok(weights.mmd * squash(mmd) + weights.kl * squash(kl) + weights.variance * variance_score)
}

/// Standardizes both matrices by source mean and standard deviation, then
/// computes all three metrics and their combination.
pub fn shift_report(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    weights: &ShiftWeights,
) -> Result<ShiftReport> {
    let d = check_matrix("shift source", source, 2)?;
    check_matrix("shift target", target, 2)?;
    let means = feature_means(source, d);
    let stds: Vec<f64> = feature_variances(source, &means)
        .iter()
        .map(|v| v.sqrt().max(1e-8))
        .collect();
    let z = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(&means)
                    .zip(&stds)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    };
    let zs = z(source);
    let zt = z(target);
    let mmd = mmd(&zs, &zt)?;
    let kl = kl_divergence(&zs, &zt)?;
    let variance = variance_ratio_score(&zs, &zt)?;
    let s_dist = shift_score(mmd, kl, variance, weights)?;
    Ok(ShiftReport { mmd, kl, variance_ratio_score: variance, s_dist })
}

/// One recorded adaptation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub participant: String,
    pub run_id: String,
    /// Signed fraction; positive means adaptation helped.
    pub relative_change: f64,
}

/// Append-only log of past adaptation outcomes, keyed by participant.
/// Optionally backed by a JSON-lines file so outcomes persist across runs.
pub struct TtaHistoryStore {
    path: Option<PathBuf>,
    entries: BTreeMap<String, Vec<HistoryRecord>>,
}

impl TtaHistoryStore {
    pub fn in_memory() -> Self {
        TtaHistoryStore { path: None, entries: BTreeMap::new() }
    }

    /// Opens or creates the backing file and loads any existing records.
    /// Blank lines and `#`-prefixed comment lines are ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries: BTreeMap<String, Vec<HistoryRecord>> = BTreeMap::new();
        if path.exists() {
            let file = std::fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                let trimmed = line.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                let rec: HistoryRecord =
                    serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                        file: path.display().to_string(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                entries.entry(rec.participant.clone()).or_default().push(rec);
            }
        }
        Ok(TtaHistoryStore { path: Some(path), entries })
    }

    /// Records one outcome, appending to the backing file when present.
    pub fn append(
        &mut self,
        participant: &str,
        run_id: &str,
        relative_change: f64,
    ) -> Result<()> {
        let rec = HistoryRecord {
            participant: participant.to_string(),
            run_id: run_id.to_string(),
            relative_change,
        };
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::Config(format!("history record serialization: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        self.entries.entry(rec.participant.clone()).or_default().push(rec);
        Ok(())
    }

    pub fn entries(&self, participant: &str) -> &[HistoryRecord] {
        self.entries.get(participant).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Count and mean of recorded changes, or None with no records.
    pub fn summary(&self, participant: &str) -> Option<(usize, f64)> {
        let recs = self.entries(participant);
        if recs.is_empty() {
            return None;
        }
        let mean =
            recs.iter().map(|r| r.relative_change).sum::<f64>() / recs.len() as f64;
        Some((recs.len(), mean))
    }
}

/// Which stage of the cascade decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TtaStage {
    HistoryApply,
    HistorySkip,
    LowShiftSkip,
    ProbeApply,
    ProbeSkip,
}

impl std::fmt::Display for TtaStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TtaStage::HistoryApply => "HISTORY_APPLY",
            TtaStage::HistorySkip => "HISTORY_SKIP",
            TtaStage::LowShiftSkip => "LOW_SHIFT_SKIP",
            TtaStage::ProbeApply => "PROBE_APPLY",
            TtaStage::ProbeSkip => "PROBE_SKIP",
        };
        f.write_str(s)
    }
}

/// What the deciding stage saw.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaEvidence {
    History { n: usize, mean_change: f64 },
    Shift(ShiftReport),
    Probe { shift: ShiftReport, improvement: f64 },
}

/// Outcome of the cascade for one participant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtaDecision {
    pub apply: bool,
    pub stage: TtaStage,
    pub evidence: TtaEvidence,
}

impl TtaDecision {
    fn new(stage: TtaStage, evidence: TtaEvidence) -> Self {
        let apply = matches!(stage, TtaStage::HistoryApply | TtaStage::ProbeApply);
        TtaDecision { apply, stage, evidence }
    }
}

/// Four-stage decision: past outcomes first, then the shift score, then a
/// probe run for everything the cheaper stages could not settle.
///
/// 1. At least `history_min` recorded runs with mean change above
///    `history_apply` applies immediately.
/// 2. Same count requirement with mean change below `history_skip` skips.
/// 3. `s_dist` below `low_shift` skips: not enough shift to fix.
/// 4. Anything else (strong shift, missing or inconclusive history) runs the
///    probe callback; improvement above `probe_threshold` applies.
///
/// `source_rows` and `target_rows` are per-day feature vectors, typically
/// from `window::day_rows`. The probe callback returns the relative
/// validation improvement after a few adaptation epochs; its failure fails
/// the decision rather than defaulting.
pub fn decide_tta(
    participant_id: &str,
    history: &TtaHistoryStore,
    source_rows: &[Vec<f64>],
    target_rows: &[Vec<f64>],
    cfg: &TtaConfig,
    probe: &mut dyn FnMut() -> Result<f64>,
) -> Result<TtaDecision> {
    if let Some((n, mean_change)) = history.summary(participant_id) {
        if n >= cfg.history_min {
            if mean_change > cfg.history_apply {
                return Ok(TtaDecision::new(
                    TtaStage::HistoryApply,
                    TtaEvidence::History { n, mean_change },
                ));
            }
            if mean_change < cfg.history_skip {
                return Ok(TtaDecision::new(
                    TtaStage::HistorySkip,
                    TtaEvidence::History { n, mean_change },
                ));
            }
        }
    }
    let report = shift_report(source_rows, target_rows, &cfg.weights)?;
    if report.s_dist < cfg.low_shift {
        return Ok(TtaDecision::new(TtaStage::LowShiftSkip, TtaEvidence::Shift(report)));
    }
    let improvement = probe().map_err(|e| {
        Error::TtaDecision(format!("probe for {participant_id} failed: {e}"))
    })?;
    let stage = if improvement > cfg.probe_threshold {
        TtaStage::ProbeApply
    } else {
        TtaStage::ProbeSkip
    };
    Ok(TtaDecision::new(stage, TtaEvidence::Probe { shift: report, improvement }))
}

/// Adaptation products: the adapted copy and the per-epoch consistency loss.
pub struct AdaptOutcome {
    pub model: AdaptStressModel,
    pub epoch_losses: Vec<f64>,
}

/// Unsupervised adaptation by prediction consistency. Each batch is noised
/// twice (sigma1, sigma2); the loss is the mean of the three pairwise
/// squared differences between the predictions on the original and the two
/// noised copies. The domain head stays frozen and the input model is left
/// untouched; the adapted copy is returned.
pub fn adapt_consistency(
    model: &AdaptStressModel,
    windows: &[WindowedSample],
    epochs: usize,
    cfg: &TtaConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    if windows.is_empty() {
        return Err(Error::Contract("adaptation needs at least one window".into()));
    }
    let d = model.cfg.d_features;
    let t = model.cfg.w_in;
    for w in windows {
        if w.inputs.len() != t * d {
            return Err(Error::Contract(format!(
                "window input length {} does not match model {}x{}",
                w.inputs.len(),
                t,
                d
            )));
        }
    }
    let adapted = model.deep_clone()?;
    let trainable = adapted.params.filtered(|n| !n.starts_with("domain."));
    let mut opt = Adam::new();
    let mut rng = stream(seed, "tta-noise", 0);

    // the noised copies are fixed per batch, so the objective is
    // deterministic and its trend over epochs is meaningful
    let mut batches = Vec::new();
    for batch in windows.chunks(cfg.batch_size) {
        let b = batch.len();
        let x_data = stack_inputs(batch);
        let mut noised = |sigma: f64| {
            let v: Vec<f64> = x_data
                .iter()
                .map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::from_vec(&[b, t, d], v)
        };
        let x1 = noised(cfg.sigma1);
        let x2 = noised(cfg.sigma2);
        let x = Tensor::from_vec(&[b, t, d], x_data);
        batches.push((x, x1, x2));
    }

    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sum = 0.0;
        for (x, x1, x2) in &batches {
            let y0 = adapted.forward(x, false, None).y_hat;
            let y1 = adapted.forward(x1, false, None).y_hat;
            let y2 = adapted.forward(x2, false, None).y_hat;
            let pair = |a: &Tensor, bt: &Tensor| {
                let diff = a.sub(bt);
                diff.mul(&diff).mean_all()
            };
            let loss = pair(&y0, &y1)
                .add(&pair(&y0, &y2))
                .add(&pair(&y1, &y2))
                .scale(1.0 / 3.0);
            sum += loss.value();
            loss.backward()?;
            opt.step(&trainable, cfg.lr)?;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    Ok(AdaptOutcome { model: adapted, epoch_losses })
}

/// Mean squared forecast error of the model over labeled windows.
pub fn forecast_mse(model: &AdaptStressModel, windows: &[WindowedSample]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Contract("mse needs at least one window".into()));
    }
    let d = model.cfg.d_features;
    let t = model.cfg.w_in;
    let inputs = stack_inputs(windows);
    if inputs.len() != windows.len() * t * d {
        return Err(Error::Contract(format!(
            "window inputs do not match model {t}x{d}"
        )));
    }
    let targets = stack_targets(windows);
    let preds = model.predict(&inputs, windows.len());
    let mut sum = 0.0;
    let mut n = 0;
    for (row, target) in preds.iter().zip(targets.chunks(model.cfg.w_out)) {
        for (p, y) in row.iter().zip(target) {
            let e = p - y;
            sum += e * e;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Probe: a few adaptation epochs on held-out labeled windows, scored by
/// relative squared-error improvement. Used as the cascade's stage-4
/// callback.
pub fn probe_improvement(
    model: &AdaptStressModel,
    val_windows: &[WindowedSample],
    cfg: &TtaConfig,
    seed: u64,
) -> Result<f64> {
    let before = forecast_mse(model, val_windows)?;
    let adapted = adapt_consistency(model, val_windows, cfg.probe_epochs, cfg, seed)?;
    let after = forecast_mse(&adapted.model, val_windows)?;
    if before <= 0.0 {
        return Ok(0.0);
    }
    Ok((before - after) / before)
}
