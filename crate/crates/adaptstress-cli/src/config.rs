//! The flat run configuration: one JSON file, one documented key set.
//!
//! Defaults reproduce the reference experiment. Command-line flags override
//! file values; every override is echoed into the run manifest.

use std::path::{Path, PathBuf};

use adaptstress::eval::LoocvConfig;
use adaptstress::model::ModelConfig;
use adaptstress::select::ForestConfig;
use adaptstress::shap::ShapConfig;
use adaptstress::synth::CohortSpec;
use adaptstress::train::TrainConfig;
use adaptstress::tta::TtaConfig;
use adaptstress::Error;
use serde::{Deserialize, Serialize};

/// Which adaptation variant a run reports as its headline model.
///
/// Every evaluation computes all variants; the mode picks the one echoed as
/// `primary_variant` and drives the `--no-tta` / `--force-tta` flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    Selective,
    Off,
    Forced,
}

impl std::fmt::Display for TtaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TtaMode::Selective => "selective",
            TtaMode::Off => "off",
            TtaMode::Forced => "forced",
        };
        f.write_str(s)
    }
}

fn d_cohort_dir() -> PathBuf {
    PathBuf::from("cohort")
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn d_seed() -> u64 {
    42
}
fn d_jobs() -> usize {
    1
}
fn d_run_id() -> String {
    "run".into()
}
fn d_n_participants() -> usize {
    16
}
fn d_days_min() -> usize {
    96
}
fn d_days_max() -> usize {
    120
}
fn d_noise_scale() -> f64 {
    1.0
}
fn d_w_in() -> usize {
    5
}
fn d_w_out() -> usize {
    1
}
fn d_sweep_w_in() -> Vec<usize> {
    vec![3, 5, 7, 9]
}
fn d_sweep_w_out() -> Vec<usize> {
    vec![1, 3, 5, 7]
}
fn d_d_model() -> usize {
    128
}
fn d_n_heads() -> usize {
    8
}
fn d_n_layers() -> usize {
    2
}
fn d_d_ff() -> usize {
    256
}
fn d_dropout() -> f64 {
    0.1
}
fn d_grl_alpha() -> f64 {
    0.1
}
fn d_epochs() -> usize {
    350
}
fn d_patience() -> usize {
    30
}
fn d_lr_max() -> f64 {
    5e-4
}
fn d_warmup_epochs() -> usize {
    10
}
fn d_batch_size() -> usize {
    32
}
fn d_tta_mode() -> TtaMode {
    TtaMode::Selective
}
fn d_low_shift() -> f64 {
    0.3
}
fn d_high_shift() -> f64 {
    0.6
}
fn d_history_min() -> usize {
    3
}
fn d_history_apply() -> f64 {
    0.02
}
fn d_history_skip() -> f64 {
    -0.05
}
fn d_probe_threshold() -> f64 {
    0.02
}
fn d_tta_epochs() -> usize {
    10
}
fn d_probe_epochs() -> usize {
    3
}
fn d_tta_lr() -> f64 {
    1e-4
}
fn d_sigma1() -> f64 {
    0.01
}
fn d_sigma2() -> f64 {
    0.02
}
fn d_tta_batch_size() -> usize {
    32
}
fn d_n_trees() -> usize {
    100
}
fn d_min_samples_split() -> usize {
    2
}
fn d_shap_background() -> usize {
    50
}
fn d_shap_explained() -> usize {
    100
}
fn d_shap_coalitions() -> usize {
    4096
}
fn d_uncertainty_passes() -> usize {
    30
}

/// Everything a run needs, as one flat key set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of per-participant cohort CSVs.
    pub cohort_dir: PathBuf,
    /// Directory all result files are written into.
    pub output_dir: PathBuf,
    /// Adaptation history log; defaults to `<output_dir>/tta_history.jsonl`.
    pub history_file: Option<PathBuf>,
    /// Root seed; every stage derives named sub-seeds from it.
    pub seed: u64,
    /// Requested fold-level parallelism.
    pub jobs: usize,
    /// Label stamped into adaptation history records.
    pub run_id: String,

    pub n_participants: usize,
    pub days_min: usize,
    pub days_max: usize,
    pub noise_scale: f64,

    /// Input window length in days.
    pub w_in: usize,
    /// Forecast horizon in days.
    pub w_out: usize,
    pub sweep_w_in: Vec<usize>,
    pub sweep_w_out: Vec<usize>,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub grl_alpha: f64,

    pub epochs: usize,
    pub patience: usize,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,

    pub tta_mode: TtaMode,
    pub low_shift: f64,
    pub high_shift: f64,
    pub history_min: usize,
    pub history_apply: f64,
    pub history_skip: f64,
    pub probe_threshold: f64,
    pub tta_epochs: usize,
    pub probe_epochs: usize,
    pub tta_lr: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub tta_batch_size: usize,

    pub n_trees: usize,
    pub min_samples_split: usize,

    pub shap_background: usize,
    pub shap_explained: usize,
    pub shap_coalitions: usize,

    pub uncertainty_passes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort_dir: d_cohort_dir(),
            output_dir: d_output_dir(),
            history_file: None,
            seed: d_seed(),
            jobs: d_jobs(),
            run_id: d_run_id(),
            n_participants: d_n_participants(),
            days_min: d_days_min(),
            days_max: d_days_max(),
            noise_scale: d_noise_scale(),
            w_in: d_w_in(),
            w_out: d_w_out(),
            sweep_w_in: d_sweep_w_in(),
            sweep_w_out: d_sweep_w_out(),
            d_model: d_d_model(),
            n_heads: d_n_heads(),
            n_layers: d_n_layers(),
            d_ff: d_d_ff(),
            dropout: d_dropout(),
            grl_alpha: d_grl_alpha(),
            epochs: d_epochs(),
            patience: d_patience(),
            lr_max: d_lr_max(),
            warmup_epochs: d_warmup_epochs(),
            batch_size: d_batch_size(),
            tta_mode: d_tta_mode(),
            low_shift: d_low_shift(),
            high_shift: d_high_shift(),
            history_min: d_history_min(),
            history_apply: d_history_apply(),
            history_skip: d_history_skip(),
            probe_threshold: d_probe_threshold(),
            tta_epochs: d_tta_epochs(),
            probe_epochs: d_probe_epochs(),
            tta_lr: d_tta_lr(),
            sigma1: d_sigma1(),
            sigma2: d_sigma2(),
            tta_batch_size: d_tta_batch_size(),
            n_trees: d_n_trees(),
            min_samples_split: d_min_samples_split(),
            shap_background: d_shap_background(),
            shap_explained: d_shap_explained(),
            shap_coalitions: d_shap_coalitions(),
            uncertainty_passes: d_uncertainty_passes(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Schema {
            file: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            file: path.display().to_string(),
            message: format!("bad config: {e}"),
        })
    }

    pub fn history_path(&self) -> PathBuf {
        self.history_file
            .clone()
            .unwrap_or_else(|| self.output_dir.join("tta_history.jsonl"))
    }

    /// Cohort generator settings: the standard coupling motif restricted to
    /// the configured participant count.
    pub fn cohort_spec(&self) -> Result<CohortSpec, Error> {
        let mut spec = CohortSpec::preset(self.seed);
        if self.n_participants < 3 || self.n_participants > spec.n_participants {
            return Err(Error::Config(format!(
                "n_participants must be within [3, {}], got {}",
                spec.n_participants, self.n_participants
            )));
        }
        let keep: Vec<String> = (0..self.n_participants)
            .map(adaptstress::synth::participant_id)
            .collect();
        spec.coupling_table.retain(|id, _| keep.contains(id));
        spec.n_participants = self.n_participants;
        spec.days_min = self.days_min;
        spec.days_max = self.days_max;
        spec.noise_scale = self.noise_scale;
        Ok(spec)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            w_in: self.w_in,
            w_out: self.w_out,
            dropout: self.dropout,
            grl_alpha: self.grl_alpha,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            lr_max: self.lr_max,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn tta_config(&self) -> TtaConfig {
        TtaConfig {
            low_shift: self.low_shift,
            high_shift: self.high_shift,
            history_min: self.history_min,
            history_apply: self.history_apply,
            history_skip: self.history_skip,
            probe_threshold: self.probe_threshold,
            epochs: self.tta_epochs,
            probe_epochs: self.probe_epochs,
            lr: self.tta_lr,
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            batch_size: self.tta_batch_size,
            ..TtaConfig::default()
        }
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            min_samples_split: self.min_samples_split,
        }
    }

    pub fn shap_config(&self) -> ShapConfig {
        ShapConfig {
            n_background: self.shap_background,
            n_explained: self.shap_explained,
            n_coalitions: self.shap_coalitions,
            seed: self.seed,
        }
    }

    pub fn loocv_config(&self, run_id: String) -> LoocvConfig {
        LoocvConfig {
            w_in: self.w_in,
            w_out: self.w_out,
            seed: self.seed,
            run_id,
            model: self.model_config(),
            train: self.train_config(),
            tta: self.tta_config(),
            forest: self.forest_config(),
            uncertainty_passes: self.uncertainty_passes,
        }
    }
}

/// Applies one command-line override and records it as `key=value`.
pub struct Overrides {
    pub applied: Vec<String>,
}

impl Overrides {
    pub fn new() -> Self {
        Overrides { applied: Vec::new() }
    }

    pub fn set<T: std::fmt::Display>(&mut self, slot: &mut T, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.applied.push(format!("{key}={v}"));
            *slot = v;
        }
    }

    pub fn set_path(&mut self, slot: &mut PathBuf, key: &str, value: Option<PathBuf>) {
        if let Some(v) = value {
            self.applied.push(format!("{key}={}", v.display()));
            *slot = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.epochs, 350);
        assert_eq!(cfg.patience, 30);
        assert_eq!(cfg.lr_max, 5e-4);
        assert_eq!(cfg.tta_lr, 1e-4);
        assert_eq!(cfg.tta_epochs, 10);
        assert_eq!(cfg.sigma1, 0.01);
        assert_eq!(cfg.sigma2, 0.02);
        assert_eq!(cfg.low_shift, 0.3);
        assert_eq!(cfg.high_shift, 0.6);
        assert_eq!(cfg.history_apply, 0.02);
        assert_eq!(cfg.history_skip, -0.05);
        assert_eq!(cfg.history_min, 3);
        assert_eq!(cfg.sweep_w_in.len() * cfg.sweep_w_out.len(), 16);
        assert_eq!(cfg.shap_background, 50);
        assert_eq!(cfg.shap_explained, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"not_a_key": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "w_in": 3}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.w_in, 3);
        assert_eq!(cfg.epochs, 350);
    }

    #[test]
    fn cohort_spec_respects_participant_count() {
        let mut cfg = RunConfig::default();
        cfg.n_participants = 5;
        let spec = cfg.cohort_spec().unwrap();
        assert_eq!(spec.n_participants, 5);
        assert_eq!(spec.coupling_table.len(), 5);
        cfg.n_participants = 17;
        assert!(cfg.cohort_spec().is_err());
        cfg.n_participants = 2;
        assert!(cfg.cohort_spec().is_err());
    }
}
