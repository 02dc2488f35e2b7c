//! One function per subcommand. Every command reads its inputs, writes its
//! results plus a `manifest.json` into the relevant directory, and never
//! mutates what it read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adaptstress::autodiff::save_checkpoint;
use adaptstress::catalog::{load_cohort, write_cohort};
use adaptstress::eval::{
    fold_assignments, run_fold_full, run_loocv, run_sweep, sweep_to_csv, AggregateMetrics,
    Variant,
};
use adaptstress::preprocess::{clean_cohort, CleaningConfig, QualityReport, Scaler};
use adaptstress::rng::stream;
use adaptstress::select::{run_selection, SelectionResult, TARGET_FEATURES};
use adaptstress::shap::{aggregate_importance, explain_participant, ShapAttribution};
use adaptstress::synth::generate_cohort;
use adaptstress::train::train_phase1;
use adaptstress::tta::TtaHistoryStore;
use adaptstress::window::assemble_fold;
use adaptstress::{Cohort, Error, Result};
use rand::Rng;
use serde::Serialize;

use crate::config::{RunConfig, TtaMode};
use crate::manifest::{
    append_stamp, hash_dir, hash_file, read_stamped_json, read_text_stamp,
    write_stamped_json, write_stamped_text, Manifest,
};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Loads the raw cohort and cleans it in memory. Consuming stages always
/// start from the raw CSVs so no stage depends on another's intermediates.
fn load_clean_cohort(cfg: &RunConfig) -> Result<(Cohort, QualityReport)> {
    let mut cohort = load_cohort(&cfg.cohort_dir)?;
    let report = clean_cohort(&mut cohort, &CleaningConfig::default())?;
    Ok((cohort, report))
}

fn stamp_cohort_files(cohort: &Cohort, dir: &Path, hash: &str) -> Result<()> {
    for p in &cohort.participants {
        append_stamp(&dir.join(format!("{}.csv", p.participant_id)), hash)?;
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let spec = cfg.cohort_spec()?;
    let (cohort, truth) = generate_cohort(&spec)?;
    ensure_dir(&cfg.cohort_dir)?;
    let manifest = Manifest::new("generate", cfg, overrides, BTreeMap::new());
    write_cohort(&cohort, &cfg.cohort_dir)?;
    stamp_cohort_files(&cohort, &cfg.cohort_dir, &manifest.manifest_hash)?;
    write_stamped_json(
        &cfg.cohort_dir.join("ground_truth.json"),
        &manifest.manifest_hash,
        &truth,
    )?;
    manifest.write(&cfg.cohort_dir)?;
    log::info!(
        "wrote {} participants to {}",
        cohort.participants.len(),
        cfg.cohort_dir.display()
    );
    Ok(())
}

pub fn preprocess(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let input_hashes = hash_dir(&cfg.cohort_dir)?;
    let (cohort, report) = load_clean_cohort(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new("preprocess", cfg, overrides, input_hashes);
    let cleaned_dir = cfg.output_dir.join("cleaned");
    write_cohort(&cohort, &cleaned_dir)?;
    stamp_cohort_files(&cohort, &cleaned_dir, &manifest.manifest_hash)?;
    write_stamped_json(
        &cfg.output_dir.join("quality_report.json"),
        &manifest.manifest_hash,
        &report,
    )?;
    manifest.write(&cfg.output_dir)?;
    log::info!(
        "cleaned cohort in {}, quality report in {}",
        cleaned_dir.display(),
        cfg.output_dir.display()
    );
    Ok(())
}

/// Cohort-wide ensemble feature selection, fitted on every participant.
/// Per-fold runs refit selection on training participants only; this
/// command reports the global view.
pub fn select_features(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let input_hashes = hash_dir(&cfg.cohort_dir)?;
    let (cohort, _) = load_clean_cohort(cfg)?;
    let all: Vec<&adaptstress::ParticipantSeries> = cohort.participants.iter().collect();
    let scaler = Scaler::fit(&cohort.catalog, &all)?;

    let stress_column = cohort.catalog.stress_index();
    let names: Vec<String> = cohort
        .catalog
        .predictor_abbrevs()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let columns: Vec<usize> = names
        .iter()
        .map(|a| cohort.catalog.index_of(a).unwrap())
        .collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for p in &cohort.participants {
        let mut scaled = p.clone();
        scaler.apply(&mut scaled);
        for rec in &scaled.records {
            let row: Option<Vec<f64>> = columns.iter().map(|&c| rec.value(c)).collect();
            match (row, rec.value(stress_column)) {
                (Some(row), Some(t)) => {
                    x.push(row);
                    y.push(t);
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "participant {} still has missing cells after cleaning",
                        p.participant_id
                    )))
                }
            }
        }
    }

    let mut rng = stream(cfg.seed, "selection-global", 0);
    let selection = run_selection(
        &x,
        &y,
        &names,
        TARGET_FEATURES.min(names.len()),
        &cfg.forest_config(),
        &mut rng,
    )?;
    ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new("select-features", cfg, overrides, input_hashes);
    write_stamped_json(
        &cfg.output_dir.join("selection.json"),
        &manifest.manifest_hash,
        &selection,
    )?;
    manifest.write(&cfg.output_dir)?;
    log::info!("kept features: {}", selection.kept.join(", "));
    Ok(())
}

#[derive(Serialize)]
struct TrainOutput {
    fold_id: usize,
    test_participant: String,
    val_participant: String,
    train_participants: Vec<String>,
    selection: SelectionResult,
    record: adaptstress::train::TrainRunRecord,
}

/// Trains the first cross-validation fold and checkpoints its best model.
pub fn train(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let input_hashes = hash_dir(&cfg.cohort_dir)?;
    let (cohort, _) = load_clean_cohort(cfg)?;
    let assignments = fold_assignments(&cohort, cfg.seed);
    let assignment = &assignments[0];
    let data = assemble_fold(
        &cohort,
        assignment,
        cfg.w_in,
        cfg.w_out,
        &cfg.forest_config(),
        cfg.seed,
    )?;

    let mut model_cfg = cfg.model_config();
    model_cfg.d_features = data.feature_columns.len();
    model_cfg.n_domains = assignment.train.len();
    let mut train_cfg = cfg.train_config();
    train_cfg.seed = stream(cfg.seed, "fold-train", 0).r#gen();

    let (model, record) = train_phase1(0, &data.train, &data.val, &model_cfg, &train_cfg)?;

    ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new("train", cfg, overrides, input_hashes);
    let out = TrainOutput {
        fold_id: assignment.fold_id,
        test_participant: assignment.test.clone(),
        val_participant: assignment.val.clone(),
        train_participants: assignment.train.clone(),
        selection: data.selection,
        record,
    };
    write_stamped_json(
        &cfg.output_dir.join("train_record.json"),
        &manifest.manifest_hash,
        &out,
    )?;
    save_checkpoint(cfg.output_dir.join("model.ckpt"), &model.params, None)?;
    manifest.write(&cfg.output_dir)?;
    log::info!(
        "fold 0 best epoch {}, checkpoint in {}",
        out.record.best_epoch,
        cfg.output_dir.display()
    );
    Ok(())
}

fn primary_variant(mode: TtaMode) -> Variant {
    match mode {
        TtaMode::Selective => Variant::AdaptStress,
        TtaMode::Off => Variant::NoTta,
        TtaMode::Forced => Variant::ForcedTta,
    }
}

/// Starts a fresh history log for this run, replacing any previous one so
/// reruns of the same setup reproduce files byte for byte.
fn fresh_history(path: &Path) -> Result<TtaHistoryStore> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    TtaHistoryStore::open(path)
}

#[derive(Serialize)]
struct Evaluation {
    run_id: String,
    tta_mode: TtaMode,
    primary_variant: Variant,
    primary: AggregateMetrics,
    aggregate: adaptstress::eval::CohortAggregate,
}

pub fn evaluate(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let input_hashes = hash_dir(&cfg.cohort_dir)?;
    let (cohort, _) = load_clean_cohort(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new("evaluate", cfg, overrides, input_hashes);

    let history_path = cfg.history_path();
    let mut history = fresh_history(&history_path)?;
    let loocv = cfg.loocv_config(cfg.run_id.clone());
    let (folds, aggregate) = run_loocv(&cohort, &loocv, &mut history)?;

    for fold in &folds {
        write_stamped_json(
            &cfg.output_dir.join(format!("fold_{}.json", fold.fold_id)),
            &manifest.manifest_hash,
            fold,
        )?;
    }
    let primary = primary_variant(cfg.tta_mode);
    let evaluation = Evaluation {
        run_id: cfg.run_id.clone(),
        tta_mode: cfg.tta_mode,
        primary_variant: primary,
        primary: aggregate
            .variants
            .get(&primary)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("aggregate lacks variant {primary}")))?,
        aggregate,
    };
    write_stamped_json(
        &cfg.output_dir.join("evaluation.json"),
        &manifest.manifest_hash,
        &evaluation,
    )?;
    append_stamp(&history_path, &manifest.manifest_hash)?;
    manifest.write(&cfg.output_dir)?;
    log::info!(
        "{} folds evaluated, primary variant {}",
        evaluation.aggregate.n_folds,
        evaluation.primary_variant
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let input_hashes = hash_dir(&cfg.cohort_dir)?;
    let (cohort, _) = load_clean_cohort(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new("sweep", cfg, overrides, input_hashes);

    let history_path = cfg.history_path();
    let mut history = fresh_history(&history_path)?;
    let base = cfg.loocv_config(cfg.run_id.clone());
    let report = run_sweep(&cohort, &base, &cfg.sweep_w_in, &cfg.sweep_w_out, &mut history)?;

    write_stamped_text(
        &cfg.output_dir.join("sweep_report.csv"),
        &manifest.manifest_hash,
        &sweep_to_csv(&report),
    )?;
    append_stamp(&history_path, &manifest.manifest_hash)?;
    manifest.write(&cfg.output_dir)?;
    log::info!("{} sweep cells written", report.cells.len());
    Ok(())
}

fn expand_phi(
    attrs: Vec<ShapAttribution>,
    kept: &[String],
    all_names: &[String],
) -> Result<Vec<ShapAttribution>> {
    let slots: Vec<usize> = kept
        .iter()
        .map(|name| {
            all_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Contract(format!("selected feature {name} not in catalog")))
        })
        .collect::<Result<_>>()?;
    attrs
        .into_iter()
        .map(|a| {
            if a.phi.len() != slots.len() {
                return Err(Error::Contract(format!(
                    "attribution width {} does not match {} selected features",
                    a.phi.len(),
                    slots.len()
                )));
            }
            let mut phi = vec![0.0; all_names.len()];
            for (j, &slot) in slots.iter().enumerate() {
                phi[slot] = a.phi[j];
            }
            Ok(ShapAttribution { phi, ..a })
        })
        .collect()
}

fn attribution_csv(attrs: &[ShapAttribution], names: &[String]) -> String {
    let mut out = String::from("anchor_date,base_value,prediction");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for a in attrs {
        out.push_str(&format!("{},{},{}", a.anchor_date, a.base_value, a.prediction));
        for v in &a.phi {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Re-runs each fold (with an in-memory history log) and attributes the
/// deployed model's forecasts. Unselected features get zero attribution so
/// vectors align across folds.
pub fn explain(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let input_hashes = hash_dir(&cfg.cohort_dir)?;
    let (cohort, _) = load_clean_cohort(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new("explain", cfg, overrides, input_hashes);

    let loocv = cfg.loocv_config(cfg.run_id.clone());
    let mut history = TtaHistoryStore::in_memory();
    let names: Vec<String> = cohort
        .catalog
        .predictor_abbrevs()
        .iter()
        .map(|s| s.to_string())
        .collect();

    let mut all_attributions = Vec::new();
    for assignment in fold_assignments(&cohort, cfg.seed) {
        let (result, model, data) = run_fold_full(&cohort, &assignment, &loocv, &mut history)?;
        let mut shap_cfg = cfg.shap_config();
        shap_cfg.seed = stream(cfg.seed, "shap", assignment.fold_id as u64).r#gen();
        let attrs = explain_participant(&model, &data.train, &data.test, &shap_cfg)?;
        let expanded = expand_phi(attrs, &data.selection.kept, &names)?;
        write_stamped_text(
            &cfg.output_dir
                .join(format!("shap_{}.csv", result.test_participant)),
            &manifest.manifest_hash,
            &attribution_csv(&expanded, &names),
        )?;
        log::info!(
            "fold {}: {} attributions for {}",
            assignment.fold_id,
            expanded.len(),
            result.test_participant
        );
        all_attributions.extend(expanded);
    }

    let summary = aggregate_importance(&all_attributions, &names)?;
    write_stamped_json(
        &cfg.output_dir.join("shap_summary.json"),
        &manifest.manifest_hash,
        &summary,
    )?;
    manifest.write(&cfg.output_dir)?;
    Ok(())
}

const REPORT_VARIANTS: [&str; 5] = [
    "ADAPT_STRESS",
    "FORCED_TTA",
    "NO_TTA",
    "PERSISTENCE",
    "GLOBAL_MEAN",
];
const REPORT_METRICS: [&str; 5] = ["mse", "mae", "rmse", "pearson_r", "tda"];

fn fold_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|s| s.to_str())
                .map(|s| s.starts_with("fold_") && s.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn check_stamp(
    file: &Path,
    stamp: &str,
    expected: &str,
    hashes: &mut BTreeMap<String, String>,
) -> Result<()> {
    if stamp != expected {
        return Err(Error::Schema {
            file: file.display().to_string(),
            message: format!(
                "manifest stamp {stamp} does not match {expected}; \
                 inputs come from different runs"
            ),
        });
    }
    let name = file
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    hashes.insert(name, hash_file(file)?);
    Ok(())
}

/// Reshapes finished evaluation outputs into one per-participant,
/// per-variant metric table. Refuses inputs whose stamps disagree.
pub fn report(cfg: &RunConfig, overrides: Vec<String>) -> Result<()> {
    let dir = &cfg.output_dir;
    let eval_path = dir.join("evaluation.json");
    let (_, expected) = read_stamped_json(&eval_path)?;
    let mut consumed = BTreeMap::new();
    consumed.insert("evaluation.json".to_string(), hash_file(&eval_path)?);

    let paths = fold_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Schema {
            file: dir.display().to_string(),
            message: "no fold_<id>.json files; run evaluate first".into(),
        });
    }
    let mut folds = Vec::new();
    for path in &paths {
        let (value, stamp) = read_stamped_json(path)?;
        check_stamp(path, &stamp, &expected, &mut consumed)?;
        folds.push(value);
    }
    folds.sort_by_key(|v| v["fold_id"].as_u64());

    for name in ["shap_summary.json", "quality_report.json", "selection.json"] {
        let path = dir.join(name);
        if path.exists() {
            let (_, stamp) = read_stamped_json(&path)?;
            check_stamp(&path, &stamp, &expected, &mut consumed)?;
        }
    }
    let mut text_inputs: Vec<PathBuf> = ["sweep_report.csv", "tta_history.jsonl"]
        .iter()
        .map(|name| dir.join(name))
        .filter(|p| p.exists())
        .collect();
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    text_inputs.extend(
        entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|s| s.to_str())
                    .map(|s| s.starts_with("shap_") && s.ends_with(".csv"))
                    .unwrap_or(false)
            }),
    );
    text_inputs.sort();
    for path in &text_inputs {
        let stamp = read_text_stamp(path)?;
        check_stamp(path, &stamp, &expected, &mut consumed)?;
    }

    let mut csv = String::from("participant,model_variant,mse,mae,rmse,pearson_r,tda\n");
    for fold in &folds {
        let participant = fold["test_participant"].as_str().ok_or_else(|| Error::Schema {
            file: eval_path.display().to_string(),
            message: "fold record lacks test_participant".into(),
        })?;
        for variant in REPORT_VARIANTS {
            let pooled = &fold["variants"][variant]["pooled"];
            if pooled.is_null() {
                return Err(Error::Schema {
                    file: dir.display().to_string(),
                    message: format!("fold for {participant} lacks variant {variant}"),
                });
            }
            csv.push_str(&format!("{participant},{variant}"));
            for metric in REPORT_METRICS {
                match pooled[metric].as_f64() {
                    Some(v) => csv.push_str(&format!(",{v}")),
                    None => csv.push_str(",NA"),
                }
            }
            csv.push('\n');
        }
    }

    let manifest = Manifest::new("report", cfg, overrides, consumed);
    write_stamped_text(&dir.join("report.csv"), &manifest.manifest_hash, &csv)?;
    manifest.write(dir)?;
    log::info!("report.csv covers {} participants", folds.len());
    Ok(())
}
