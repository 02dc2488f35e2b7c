//! Personalized stress forecasting from daily wearable features.
//!
//! The crate covers the full pipeline:
//!
//! - [`catalog`]: the daily feature catalog, participant time series, and
//!   CSV cohort I/O.
//! - [`synth`]: seeded synthetic cohorts with known feature-to-stress
//!   couplings, per-participant distribution shifts, and injected quality
//!   defects.
//! - [`preprocess`]: edge-day trimming, IQR and rolling anomaly detection,
//!   mean imputation, and min-max scaling.
//! - [`select`]: correlation, recursive-elimination, and mutual-information
//!   feature selection combined by ensemble voting.
//! - [`window`]: overlapping sliding-window sample construction and per-fold
//!   dataset assembly.
//! - [`autodiff`]: the f64 tensor, reverse-mode differentiation, Adam, and
//!   the warmup-cosine learning-rate schedule.
//! - [`model`]: the forecasting network with feature-level attention, a
//!   temporal self-attention encoder, a regression head, and an adversarial
//!   domain discriminator behind a gradient-reversal boundary.
//! - [`train`]: the phase-1 training loop with early stopping.
//! - [`tta`]: distribution-shift scoring, the selective test-time-adaptation
//!   decision cascade, and consistency-based adaptation.
//! - [`eval`]: forecasting metrics, baselines, leave-one-participant-out
//!   cross-validation, uncertainty bands, and the window-size sweep.
//! - [`shap`]: kernel Shapley attributions over windows plus cohort-level
//!   importance summaries.

pub mod autodiff;
pub mod catalog;
pub mod error;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod select;
pub mod shap;
pub mod synth;
pub mod train;
pub mod tta;
pub mod window;

pub use catalog::{Cohort, DailyRecord, FeatureCatalog, ParticipantSeries};
pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
