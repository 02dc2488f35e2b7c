//! Shapley-value attribution for windowed forecasts.
//!
//! Features are attributed at the feature level, not per (day, feature)
//! cell: a coalition either keeps a feature's whole daily trajectory from
//! the explained window or replaces it with a background window's
//! trajectory. The explained output is the first forecast day. The kernel
//! solver enforces the efficiency constraint algebraically, so
//! `base + Σφ` reproduces the model output on the explained sample
//! exactly, in both exact and sampled modes.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eval::{inverse_cv, InverseCv};
use crate::model::AdaptStressModel;
use crate::rng::stream;
use crate::window::WindowedSample;
use crate::Result;

/// Per-feature mean over the window's days.
pub fn temporal_aggregate(inputs: &[f64], w_in: usize, d: usize) -> Vec<f64> {
    assert_eq!(inputs.len(), w_in * d);
    let mut out = vec![0.0; d];
    for day in 0..w_in {
        for j in 0..d {
            out[j] += inputs[day * d + j];
        }
    }
    for v in &mut out {
        *v /= w_in as f64;
    }
    out
}

fn comb(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// Weight of a coalition of size `z` out of `m` features in the kernel
/// regression. The empty and full coalitions never reach this function;
/// they are absorbed by the constraint substitution.
pub fn shapley_kernel_weight(m: usize, z: usize) -> Result<f64> {
    if z == 0 || z >= m {
        return Err(Error::Contract(format!(
            "kernel weight is only defined for 0 < z < m, got z={z}, m={m}"
        )));
    }
    Ok((m - 1) as f64 / (comb(m, z) * (z * (m - z)) as f64))
}

/// Rebuilds a full window for one coalition: member features keep the
/// explained sample's daily values, the rest take the background window's.
fn mask_window(sample: &[f64], background: &[f64], mask: u32, w_in: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w_in * d);
    for day in 0..w_in {
        for j in 0..d {
            let idx = day * d + j;
            if mask & (1 << j) != 0 {
                out.push(sample[idx]);
            } else {
                out.push(background[idx]);
            }
        }
    }
    out
}

/// Evaluates v(S) for each coalition mask: the model output on the masked
/// window, averaged over all background windows. Coalitions are grouped so
/// each callback call scores a batch of windows.
fn coalition_values(
    eval: &mut dyn FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    masks: &[u32],
    sample: &[f64],
    background: &[Vec<f64>],
    w_in: usize,
    d: usize,
) -> Result<Vec<f64>> {
    let nb = background.len();
    let group = (2048 / nb).max(1);
    let mut values = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(group) {
        let mut windows = Vec::with_capacity(chunk.len() * nb);
        for &mask in chunk {
            for b in background {
                windows.push(mask_window(sample, b, mask, w_in, d));
            }
        }
        let outs = eval(&windows)?;
        if outs.len() != windows.len() {
            return Err(Error::Contract(format!(
                "value function returned {} outputs for {} windows",
                outs.len(),
                windows.len()
            )));
        }
        for (i, _) in chunk.iter().enumerate() {
            let v = outs[i * nb..(i + 1) * nb].iter().sum::<f64>() / nb as f64;
            values.push(v);
        }
    }
    Ok(values)
}

fn solve_gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Contract(
                "singular design in the kernel regression; coalitions do not \
                 distinguish the features"
                    .into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Ok(x)
}

/// Solves the kernel-weighted least squares for the Shapley values of one
/// sample, with the efficiency constraint substituted into the system.
/// Enumerates every proper nonempty coalition when there are at most
/// `n_coalitions` of them; otherwise samples coalitions by kernel weight.
///
/// `eval` maps a batch of flat `w_in`×`d` windows to model outputs.
pub fn kernel_shap(
    eval: &mut dyn FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    sample: &[f64],
    background: &[Vec<f64>],
    w_in: usize,
    d: usize,
    n_coalitions: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>, f64)> {
    if d == 0 || d > 25 {
        return Err(Error::Contract(format!(
            "attribution supports 1 to 25 features, got {d}"
        )));
    }
    if background.is_empty() {
        return Err(Error::Contract("attribution needs background windows".into()));
    }
    for b in background {
        if b.len() != w_in * d || sample.len() != w_in * d {
            return Err(Error::Contract(
                "sample and background windows must all be w_in x d".into(),
            ));
        }
    }
    let full: u32 = if d == 32 { u32::MAX } else { (1 << d) - 1 };
    let ends = coalition_values(eval, &[0, full], sample, background, w_in, d)?;
    let (base, f_x) = (ends[0], ends[1]);
    if d == 1 {
        return Ok((base, vec![f_x - base], f_x));
    }

    let total = (1u64 << d) - 2;
    let (masks, weights): (Vec<u32>, Vec<f64>) = if total <= n_coalitions as u64 {
        let mut masks = Vec::with_capacity(total as usize);
        let mut weights = Vec::with_capacity(total as usize);
        for mask in 1..full {
            masks.push(mask);
            weights.push(shapley_kernel_weight(d, mask.count_ones() as usize)?);
        }
        (masks, weights)
    } else {
        // p(z) proportional to the kernel weight times the number of
        // size-z coalitions, so drawing a uniform subset of the drawn size
        // reproduces the weighting; duplicate draws accumulate as counts.
        let size_weight: Vec<f64> = (1..d)
            .map(|z| (d - 1) as f64 / (z * (d - z)) as f64)
            .collect();
        let total_w: f64 = size_weight.iter().sum();
        let mut rng = stream(seed, "shap-coalitions", 0);
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for _ in 0..n_coalitions {
            let mut t = rng.gen_range(0.0..total_w);
            let mut z = 1;
            for (i, w) in size_weight.iter().enumerate() {
                if t < *w {
                    z = i + 1;
                    break;
                }
                t -= *w;
            }
            let mut pool: Vec<usize> = (0..d).collect();
            let mut mask = 0u32;
            for k in 0..z {
                let end = pool.len() - 1 - k;
                let pick = rng.gen_range(0..=end);
                mask |= 1 << pool[pick];
                pool.swap(pick, end);
            }
            *counts.entry(mask).or_insert(0.0) += 1.0;
        }
        counts.into_iter().unzip()
    };

    let values = coalition_values(eval, &masks, sample, background, w_in, d)?;

    // Substitute the efficiency constraint: the last feature's value is
    // determined by the rest, leaving d-1 unknowns.
    let m = d - 1;
    let excess = f_x - base;
    let mut g = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    let mut row = vec![0.0; m];
    for ((&mask, &w), &v) in masks.iter().zip(&weights).zip(&values) {
        let last_in = mask & (1 << m) != 0;
        for (j, r) in row.iter_mut().enumerate() {
            let in_j = mask & (1 << j) != 0;
            *r = (in_j as i32 as f64) - (last_in as i32 as f64);
        }
        let y = v - base - if last_in { excess } else { 0.0 };
        for j in 0..m {
            if row[j] == 0.0 {
                continue;
            }
            rhs[j] += w * row[j] * y;
            for k in 0..m {
                g[j][k] += w * row[j] * row[k];
            }
        }
    }
    let mut phi = solve_gauss(g, rhs)?;
    let rest: f64 = phi.iter().sum();
    phi.push(excess - rest);
    Ok((base, phi, f_x))
}

/// Exact Shapley values by enumerating every coalition and averaging
/// marginal contributions. Reference oracle for small feature counts.
pub fn brute_force_shapley(
    eval: &mut dyn FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    sample: &[f64],
    background: &[Vec<f64>],
    w_in: usize,
    d: usize,
) -> Result<(f64, Vec<f64>, f64)> {
    if d == 0 || d > 16 {
        return Err(Error::Contract(format!(
            "the exhaustive oracle supports 1 to 16 features, got {d}"
        )));
    }
    let n_masks = 1usize << d;
    let all_masks: Vec<u32> = (0..n_masks as u32).collect();
    let values = coalition_values(eval, &all_masks, sample, background, w_in, d)?;
    let base = values[0];
    let f_x = values[n_masks - 1];
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for mask in 0..n_masks as u32 {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = 1.0 / (d as f64 * comb(d - 1, s));
            *p += weight * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }
    Ok((base, phi, f_x))
}

/// One explained sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub participant: String,
    pub anchor_date: chrono::NaiveDate,
    pub base_value: f64,
    pub prediction: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapConfig {
    pub n_background: usize,
    pub n_explained: usize,
    pub n_coalitions: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            n_background: 50,
            n_explained: 100,
            n_coalitions: 4096,
            seed: 0,
        }
    }
}

/// Batched first-day forecasts as a value function for the solvers.
pub fn model_value_fn(
    model: &AdaptStressModel,
) -> impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>> + '_ {
    move |windows: &[Vec<f64>]| {
        let mut flat = Vec::with_capacity(windows.len() * windows[0].len());
        for w in windows {
            flat.extend_from_slice(w);
        }
        Ok(model
            .predict(&flat, windows.len())
            .into_iter()
            .map(|row| row[0])
            .collect())
    }
}

fn draw<'a>(
    pool: &'a [WindowedSample],
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<&'a WindowedSample> {
    if pool.len() <= n {
        return pool.iter().collect();
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let end = idx.len() - 1 - k;
        let pick = rng.gen_range(0..=end);
        out.push(&pool[idx[pick]]);
        idx.swap(pick, end);
    }
    out
}

/// Attributes the model's forecasts for one participant: background windows
/// come from the training set, explained windows from the participant's
/// own test windows.
pub fn explain_participant(
    model: &AdaptStressModel,
    train_windows: &[WindowedSample],
    test_windows: &[WindowedSample],
    cfg: &ShapConfig,
) -> Result<Vec<ShapAttribution>> {
    if train_windows.is_empty() || test_windows.is_empty() {
        return Err(Error::Contract(
            "attribution needs training and test windows".into(),
        ));
    }
    let w_in = model.cfg.w_in;
    let d = model.cfg.d_features;
    let background: Vec<Vec<f64>> = draw(
        train_windows,
        cfg.n_background,
        &mut stream(cfg.seed, "shap-background", 0),
    )
    .into_iter()
    .map(|s| s.inputs.clone())
    .collect();
    let explained = draw(
        test_windows,
        cfg.n_explained,
        &mut stream(cfg.seed, "shap-explained", 0),
    );

    let mut out = Vec::with_capacity(explained.len());
    let mut eval = model_value_fn(model);
    for (i, s) in explained.iter().enumerate() {
        let (base, phi, f_x) = kernel_shap(
            &mut eval,
            &s.inputs,
            &background,
            w_in,
            d,
            cfg.n_coalitions,
            cfg.seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )?;
        out.push(ShapAttribution {
            participant: s.participant_id.clone(),
            anchor_date: s.anchor_date,
            base_value: base,
            prediction: f_x,
            phi,
        });
    }
    Ok(out)
}

/// Per-participant attribution averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantImportance {
    pub participant: String,
    pub n_samples: usize,
    /// Mean |φ| per feature.
    pub mean_abs: Vec<f64>,
    /// Mean signed φ per feature.
    pub mean_signed: Vec<f64>,
}

/// Cohort-level importance, direction, and cross-participant consistency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapSummary {
    pub features: Vec<String>,
    /// Unweighted mean over participants of each participant's mean |φ|.
    pub importance: Vec<f64>,
    pub direction: Vec<f64>,
    /// Per-feature inverse CV of importance across participants; empty
    /// with fewer than two participants.
    pub consistency: Vec<InverseCv>,
    pub participants: Vec<ParticipantImportance>,
}

/// Per-feature inverse CV of importance across participants.
pub fn consistency_scores(participants: &[ParticipantImportance]) -> Result<Vec<InverseCv>> {
    if participants.len() < 2 {
        return Err(Error::Contract(
            "consistency needs at least two participants".into(),
        ));
    }
    let d = participants[0].mean_abs.len();
    (0..d)
        .map(|j| {
            let vals: Vec<f64> = participants.iter().map(|p| p.mean_abs[j]).collect();
            inverse_cv(&vals)
        })
        .collect()
}

/// Folds per-sample attributions into the cohort summary.
pub fn aggregate_importance(
    attrs: &[ShapAttribution],
    features: &[String],
) -> Result<ShapSummary> {
    if attrs.is_empty() {
        return Err(Error::Contract("no attributions to aggregate".into()));
    }
    let d = features.len();
    let mut by_participant: BTreeMap<&str, Vec<&ShapAttribution>> = BTreeMap::new();
    for a in attrs {
        if a.phi.len() != d {
            return Err(Error::Contract(format!(
                "attribution has {} features, summary expects {d}",
                a.phi.len()
            )));
        }
        by_participant.entry(&a.participant).or_default().push(a);
    }
    let participants: Vec<ParticipantImportance> = by_participant
        .into_iter()
        .map(|(id, list)| {
            let n = list.len() as f64;
            let mut mean_abs = vec![0.0; d];
            let mut mean_signed = vec![0.0; d];
            for a in &list {
                for j in 0..d {
                    mean_abs[j] += a.phi[j].abs();
                    mean_signed[j] += a.phi[j];
                }
            }
            for j in 0..d {
                mean_abs[j] /= n;
                mean_signed[j] /= n;
            }
            ParticipantImportance {
                participant: id.to_string(),
                n_samples: list.len(),
                mean_abs,
                mean_signed,
            }
        })
        .collect();
    let np = participants.len() as f64;
    let mut importance = vec![0.0; d];
    let mut direction = vec![0.0; d];
    for p in &participants {
        for j in 0..d {
            importance[j] += p.mean_abs[j] / np;
            direction[j] += p.mean_signed[j] / np;
        }
    }
    let consistency = if participants.len() >= 2 {
        consistency_scores(&participants)?
    } else {
        Vec::new()
    };
    Ok(ShapSummary {
        features: features.to_vec(),
        importance,
        direction,
        consistency,
        participants,
    })
}
