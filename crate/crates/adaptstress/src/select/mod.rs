//! Ensemble feature selection: correlation filter, recursive feature
//! elimination with a random-forest importance oracle, and a mutual
//! information filter, combined by 2-of-3 voting with mean-rank fill.
//!
//! Selection runs on person-day rows of the scaled training split (22
//! predictor columns, same-day scaled stress as target) and is refit per
//! evaluation fold so the held-out participant never leaks in.

mod forest;

pub use forest::{forest_importance, ForestConfig};

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Error;
use crate::Result;

/// Number of predictors the pipeline keeps.
pub const TARGET_FEATURES: usize = 15;

/// Absolute-correlation threshold for the filter method.
pub const CORR_THRESHOLD: f64 = 0.05;

/// Histogram bins for the mutual-information estimate.
pub const MI_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Method {
    #[serde(rename = "CORR")]
    Corr,
    #[serde(rename = "RFE")]
    Rfe,
    #[serde(rename = "MI")]
    Mi,
}

/// One selector's verdict: the chosen subset plus a full 1-based ranking of
/// every candidate feature.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub selected: BTreeSet<usize>,
    pub ranks: Vec<usize>,
}

/// Final ensemble outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionResult {
    /// Kept feature abbreviations, best mean rank first.
    pub kept: Vec<String>,
    /// Kept feature column indices, aligned with `kept`.
    pub kept_indices: Vec<usize>,
    /// Which methods voted for each candidate feature.
    pub votes: BTreeMap<String, Vec<Method>>,
    /// Mean rank of each candidate across the three methods.
    pub ranks: BTreeMap<String, f64>,
}

impl SelectionResult {
    /// Dimensionality reduction relative to the candidate count, rounded to
    /// whole percent (22 -> 15 reports 32).
    pub fn reduction_percent(&self, candidates: usize) -> u32 {
        (100.0 * (1.0 - self.kept.len() as f64 / candidates as f64)).round() as u32
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks features by descending score; ties resolve to the lower column
/// index. Returns 1-based ranks per feature.
fn ranks_by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; scores.len()];
    for (pos, &f) in order.iter().enumerate() {
        ranks[f] = pos + 1;
    }
    ranks
}

/// Correlation filter: keeps features with |Pearson r| against the target at
/// or above [`CORR_THRESHOLD`]. Zero-variance features score 0 and are
/// excluded with a warning.
pub fn select_correlation(x: &[Vec<f64>], y: &[f64]) -> Result<MethodResult> {
    let d = columns(x)?;
    let mut scores = vec![0.0; d];
    for f in 0..d {
        let col: Vec<f64> = x.iter().map(|row| row[f]).collect();
        let r = pearson(&col, y);
        if r.is_nan() {
            log::warn!("feature column {f} has zero variance; correlation treated as 0");
            scores[f] = 0.0;
        } else {
            scores[f] = r.abs();
        }
    }
    let selected = (0..d).filter(|&f| scores[f] >= CORR_THRESHOLD).collect();
    Ok(MethodResult {
        method: Method::Corr,
        selected,
        ranks: ranks_by_score_desc(&scores),
    })
}

/// Recursive feature elimination: fit a forest, drop the least important
/// feature, repeat until `keep` remain. Eliminated features rank below every
/// survivor in reverse elimination order; survivors rank by importance in
/// the final fit.
pub fn select_rfe(
    x: &[Vec<f64>],
    y: &[f64],
    keep: usize,
    cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MethodResult> {
    let d = columns(x)?;
    if keep > d {
        return Err(Error::Selection(format!(
            "cannot keep {keep} of {d} features"
        )));
    }
    let mut alive: Vec<usize> = (0..d).collect();
    let mut eliminated: Vec<usize> = Vec::new();
    let final_importance: Vec<f64> = loop {
        let sub: Vec<Vec<f64>> = x
            .iter()
            .map(|row| alive.iter().map(|&f| row[f]).collect())
            .collect();
        let imp = forest_importance(&sub, y, cfg, rng)?;
        if alive.len() == keep {
            break imp;
        }
        // drop the lowest-importance feature; ties drop the higher index so
        // earlier catalog entries are preferred
        let worst = (0..alive.len())
            .min_by(|&a, &b| {
                imp[a]
                    .partial_cmp(&imp[b])
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        eliminated.push(alive.remove(worst));
        if alive.len() < keep {
            unreachable!("elimination cannot pass below keep");
        }
    };
    let mut ranks = vec![0; d];
    let survivor_ranks = ranks_by_score_desc(&final_importance);
    for (pos, &f) in alive.iter().enumerate() {
        ranks[f] = survivor_ranks[pos];
    }
    for (i, &f) in eliminated.iter().rev().enumerate() {
        ranks[f] = keep + 1 + i;
    }
    Ok(MethodResult {
        method: Method::Rfe,
        selected: alive.into_iter().collect(),
        ranks,
    })
}

/// Mutual information in nats between each feature and the target, both
/// discretized into equal-width histograms; keeps the top `keep`.
pub fn select_mutual_info(
    x: &[Vec<f64>],
    y: &[f64],
    keep: usize,
    bins: usize,
) -> Result<MethodResult> {
    let d = columns(x)?;
    if keep > d {
        return Err(Error::Selection(format!(
            "cannot keep {keep} of {d} features"
        )));
    }
    let y_bins = discretize(y, bins);
    let mut scores = vec![0.0; d];
    for f in 0..d {
        let col: Vec<f64> = x.iter().map(|row| row[f]).collect();
        scores[f] = match discretize(&col, bins) {
            Some(x_bins) => match &y_bins {
                Some(yb) => mutual_information(&x_bins, yb, bins),
                None => 0.0,
            },
            None => 0.0, // constant feature
        };
    }
    let ranks = ranks_by_score_desc(&scores);
    let selected = (0..d).filter(|&f| ranks[f] <= keep).collect();
    Ok(MethodResult {
        method: Method::Mi,
        selected,
        ranks,
    })
}

fn discretize(values: &[f64], bins: usize) -> Option<Vec<usize>> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return None;
    }
    let width = (max - min) / bins as f64;
    Some(
        values
            .iter()
            .map(|&v| (((v - min) / width) as usize).min(bins - 1))
            .collect(),
    )
}

fn mutual_information(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * bins + j] += 1.0;
        pa[i] += 1.0;
        pb[j] += 1.0;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let pij = joint[i * bins + j] / n;
            if pij > 0.0 {
                mi += pij * (pij * n * n / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Combines the three method results: features with at least 2 votes enter,
/// then the set is filled (or cut) to `target` by ascending mean rank, ties
/// broken by catalog order. Symmetric in the order of `results`.
pub fn ensemble_vote(
    results: &[MethodResult],
    names: &[String],
    target: usize,
) -> Result<SelectionResult> {
    if results.len() != 3 {
        return Err(Error::Selection(format!(
            "ensemble expects 3 method results, got {}",
            results.len()
        )));
    }
    let d = names.len();
    for r in results {
        if r.ranks.len() != d {
            return Err(Error::Selection(
                "method result does not cover all candidate features".into(),
            ));
        }
    }
    if target > d {
        return Err(Error::Selection(format!(
            "cannot select {target} of {d} features"
        )));
    }
    let mut votes: Vec<Vec<Method>> = vec![Vec::new(); d];
    let mut rank_sum = vec![0usize; d];
    for r in results {
        for f in 0..d {
            rank_sum[f] += r.ranks[f];
            if r.selected.contains(&f) {
                votes[f].push(r.method);
            }
        }
    }
    let mean_rank: Vec<f64> = rank_sum.iter().map(|&s| s as f64 / 3.0).collect();
    for v in &mut votes {
        v.sort();
    }

    let by_rank = |a: &usize, b: &usize| {
        mean_rank[*a]
            .partial_cmp(&mean_rank[*b])
            .unwrap()
            .then(a.cmp(b))
    };
    let mut eligible: Vec<usize> = (0..d).filter(|&f| votes[f].len() >= 2).collect();
    eligible.sort_by(by_rank);
    let mut kept_idx: Vec<usize> = eligible.iter().cloned().take(target).collect();
    if kept_idx.len() < target {
        let mut rest: Vec<usize> = (0..d).filter(|f| !kept_idx.contains(f)).collect();
        rest.sort_by(by_rank);
        kept_idx.extend(rest.into_iter().take(target - kept_idx.len()));
        kept_idx.sort_by(by_rank);
    }

    Ok(SelectionResult {
        kept: kept_idx.iter().map(|&f| names[f].clone()).collect(),
        kept_indices: kept_idx,
        votes: names
            .iter()
            .enumerate()
            .map(|(f, n)| (n.clone(), votes[f].clone()))
            .collect(),
        ranks: names
            .iter()
            .enumerate()
            .map(|(f, n)| (n.clone(), mean_rank[f]))
            .collect(),
    })
}

/// Runs all three selectors and the vote. `x` rows are person-days over the
/// candidate predictors; `y` is the same-day scaled stress.
pub fn run_selection(
    x: &[Vec<f64>],
    y: &[f64],
    names: &[String],
    target: usize,
    forest_cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionResult> {
    let corr = select_correlation(x, y)?;
    let rfe = select_rfe(x, y, target, forest_cfg, rng)?;
    let mi = select_mutual_info(x, y, target, MI_BINS)?;
    ensemble_vote(&[corr, rfe, mi], names, target)
}

fn columns(x: &[Vec<f64>]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::Selection(format!(
            "need at least 2 samples, got {}",
            x.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|row| row.len() != d) {
        return Err(Error::Selection("ragged feature matrix".into()));
    }
    Ok(d)
}
