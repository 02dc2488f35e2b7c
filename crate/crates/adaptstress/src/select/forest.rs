//! Random-forest regressor with impurity-reduction feature importance.
//!
//! Deliberately small: CART-style variance-reduction trees, bootstrap
//! sampling, sqrt(d) feature subsampling at each split, no depth limit.
//! Every run is seeded, so importances are reproducible bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            min_samples_split: 2,
        }
    }
}

/// Fits a forest on `x` (row-major samples) and returns per-feature
/// importance: total variance reduction credited to each feature, summed
/// over trees and normalized to sum to 1.
pub fn forest_importance(
    x: &[Vec<f64>],
    y: &[f64],
    cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Selection(format!(
            "forest needs at least 2 samples, got {n}"
        )));
    }
    assert_eq!(y.len(), n, "one target per row");
    let d = x[0].len();
    let mean = y.iter().sum::<f64>() / n as f64;
    if y.iter().all(|v| (v - mean).abs() < 1e-12) {
        return Err(Error::Selection("constant target".into()));
    }
    let n_sub = (d as f64).sqrt().ceil() as usize;
    let mut importance = vec![0.0; d];
    for _ in 0..cfg.n_trees {
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        grow(x, y, &sample, n_sub, cfg.min_samples_split, rng, &mut importance);
    }
    let total: f64 = importance.iter().sum();
    if total > 0.0 {
        for v in &mut importance {
            *v /= total;
        }
    }
    Ok(importance)
}

/// Grows one tree, accumulating weighted variance reductions into
/// `importance`. Only the importances are kept; the selector never
/// traverses the tree again, so no structure is built.
fn grow(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    n_sub: usize,
    min_split: usize,
    rng: &mut ChaCha8Rng,
    importance: &mut [f64],
) {
    let n = rows.len();
    if n < min_split || n < 2 {
        return;
    }
    let var = variance(y, rows);
    if var <= 1e-15 {
        return;
    }
    let d = x[0].len();
    // sample n_sub distinct candidate features
    let mut candidates: Vec<usize> = (0..d).collect();
    for i in 0..n_sub.min(d) {
        let j = rng.gen_range(i..d);
        candidates.swap(i, j);
    }
    candidates.truncate(n_sub.min(d));
    candidates.sort_unstable();

    let mut best: Option<(f64, usize, Vec<usize>, Vec<usize>)> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for &f in &candidates {
        order.sort_by(|&a, &b| x[a][f].partial_cmp(&x[b][f]).unwrap());
        // prefix sums over the sorted order for O(n) split scan
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let total_sum: f64 = order.iter().map(|&r| y[r]).sum();
        let total_sq: f64 = order.iter().map(|&r| y[r] * y[r]).sum();
        for i in 0..n - 1 {
            let v = y[order[i]];
            sum += v;
            sum_sq += v * v;
            if x[order[i]][f] == x[order[i + 1]][f] {
                continue;
            }
            let nl = (i + 1) as f64;
            let nr = (n - i - 1) as f64;
            let var_l = sum_sq / nl - (sum / nl).powi(2);
            let var_r = (total_sq - sum_sq) / nr - ((total_sum - sum) / nr).powi(2);
            let weighted = (nl * var_l + nr * var_r) / n as f64;
            let reduction = var - weighted;
            let better = match &best {
                Some((b, bf, _, _)) => {
                    reduction > *b + 1e-15 || (reduction > *b - 1e-15 && f < *bf)
                }
                None => reduction > 1e-15,
            };
            if better {
                let left: Vec<usize> = order[..=i].to_vec();
                let right: Vec<usize> = order[i + 1..].to_vec();
                best = Some((reduction, f, left, right));
            }
        }
    }
    if let Some((reduction, f, left, right)) = best {
        importance[f] += reduction * n as f64;
        grow(x, y, &left, n_sub, min_split, rng, importance);
        grow(x, y, &right, n_sub, min_split, rng, importance);
    }
}

fn variance(y: &[f64], rows: &[usize]) -> f64 {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n;
    rows.iter().map(|&r| (y[r] - mean).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn toy_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = stream(seed, "forest-test", 0);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let noise: f64 = rng.gen_range(-0.05..0.05);
            y.push(3.0 * row[2] + noise);
            x.push(row);
        }
        (x, y)
    }

    #[test]
    fn informative_feature_dominates() {
        let (x, y) = toy_data(300, 11);
        let mut rng = stream(11, "forest-fit", 0);
        let imp = forest_importance(&x, &y, &ForestConfig::default(), &mut rng).unwrap();
        let argmax = imp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2, "importances {imp:?}");
        assert!(imp[2] > 0.5, "importances {imp:?}");
        let total: f64 = imp.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (x, y) = toy_data(120, 3);
        let fit = || {
            let mut rng = stream(3, "forest-fit", 7);
            forest_importance(&x, &y, &ForestConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(fit(), fit());
    }

    #[test]
    fn constant_target_is_rejected() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]];
        let y = vec![2.0, 2.0, 2.0];
        let mut rng = stream(1, "forest-fit", 0);
        assert!(forest_importance(&x, &y, &ForestConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn constant_feature_gets_no_credit() {
        let (mut x, y) = toy_data(200, 5);
        for row in &mut x {
            row[4] = 0.75;
        }
        let mut rng = stream(5, "forest-fit", 0);
        let imp = forest_importance(&x, &y, &ForestConfig::default(), &mut rng).unwrap();
        assert_eq!(imp[4], 0.0, "importances {imp:?}");
    }
}
