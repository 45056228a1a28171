//! Subcommand bodies: each loads data per the config, runs one stage, and
//! writes its artifacts into the run directory.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use vital_core::analysis::{mean_attention, patient_embeddings, pca_project};
use vital_core::dataset::{
    generate, ingest_psv_dir, prepare, read_jsonl, write_jsonl, Dataset, Manifest, PatientRecord,
    Prepared, PsvOptions,
};
use vital_core::model::VitalModel;
use vital_core::report::{write_history_csv, write_json, MetricsReport};
use vital_core::tensor::{
    grad_check as check_gradients, load_store, save_store, BuiltLoss, GradCheckConfig,
    ParameterStore, Tape,
};
use vital_core::train::protocol::{
    ablate_missing_word, ablate_not_measured, fit, robustness_sweep, sensor_removal_order,
    RobustnessCurve,
};
use vital_core::train::evaluate;

use crate::config::{DataSource, RunConfig};
use crate::figures::{heatmap_svg, scatter_svg};
use crate::runs::RunDir;
use crate::{AblateKind, CliError};

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

fn write_artifact<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_json(path, value).map_err(runtime)
}

/// Materializes the dataset named by the config, along with its manifest.
fn load_data(cfg: &RunConfig) -> Result<(Dataset, Manifest), CliError> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let data = generate(spec).map_err(runtime)?;
            Ok((data.dataset, data.manifest))
        }
        DataSource::PsvDir { path, options } => {
            let dataset = ingest_psv_dir(path, options).map_err(|e| {
                CliError::Validation(format!("cannot ingest {}: {e}", path.display()))
            })?;
            let manifest = manifest_for(&dataset, options, None);
            Ok((dataset, manifest))
        }
        DataSource::Bundle { manifest, records } => {
            let body = fs::read_to_string(manifest).map_err(|e| {
                CliError::Validation(format!("cannot read manifest {}: {e}", manifest.display()))
            })?;
            let manifest: Manifest = serde_json::from_str(&body)
                .map_err(|e| CliError::Validation(format!("invalid manifest: {e}")))?;
            let dataset = read_jsonl(records, &manifest).map_err(|e| {
                CliError::Validation(format!("cannot read records {}: {e}", records.display()))
            })?;
            Ok((dataset, manifest))
        }
    }
}

fn manifest_for(dataset: &Dataset, opts: &PsvOptions, seed: Option<u64>) -> Manifest {
    let positives = dataset.records.iter().filter(|r| r.label == 1).count();
    Manifest {
        name: dataset.name.clone(),
        patients: dataset.records.len(),
        t_max: opts.t_max,
        variables: dataset.variables.clone(),
        demographics: dataset.demographic_names.clone(),
        seed,
        positive_rate: positives as f64 / dataset.records.len().max(1) as f64,
        mechanism: None,
        bayes_auroc: None,
    }
}

/// Loads, partitions, splits, normalizes, and pads per the config. The
/// experiment seed drives the split.
fn prepared(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (dataset, manifest) = load_data(cfg)?;
    prepare(
        dataset,
        &cfg.partition,
        cfg.val_fraction,
        cfg.test_fraction,
        cfg.seed,
        manifest.t_max,
    )
    .map_err(runtime)
}

fn build_model(cfg: &RunConfig, prep: &Prepared) -> Result<VitalModel, CliError> {
    VitalModel::new(cfg.model.clone(), &prep.partition, prep.dataset.demographic_names.len())
        .map_err(runtime)
}

fn load_checkpoint(run: &RunDir, flag: Option<&Path>) -> Result<ParameterStore, CliError> {
    let path = flag.map(Path::to_path_buf).unwrap_or_else(|| run.file("checkpoint.bin"));
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "checkpoint {} does not exist; train first or pass --checkpoint",
            path.display()
        )));
    }
    load_store(&path)
        .map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", path.display())))
}

/// Picks one positive and one negative record (falling back to the first
/// two) so the check exercises both loss branches.
fn probe_batch(records: &[PatientRecord]) -> Result<Vec<PatientRecord>, CliError> {
    if records.len() < 2 {
        return Err(CliError::Validation("need at least two training records".into()));
    }
    let pos = records.iter().find(|r| r.label == 1);
    let neg = records.iter().find(|r| r.label == 0);
    Ok(match (pos, neg) {
        (Some(p), Some(n)) => vec![p.clone(), n.clone()],
        _ => records[..2].to_vec(),
    })
}

pub fn synth(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<(), CliError> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(CliError::Validation(
            "synth requires a synthetic data source in the config".into(),
        ));
    };
    let manifest_path = run.guard("manifest.json", force)?;
    let records_path = run.guard("dataset.jsonl", force)?;
    let data = generate(spec).map_err(runtime)?;
    write_artifact(&manifest_path, &data.manifest)?;
    write_jsonl(&data.dataset, &records_path).map_err(runtime)?;
    run.echo_config(cfg)?;
    let positives = data.dataset.records.iter().filter(|r| r.label == 1).count();
    println!(
        "wrote {} records ({} positive) to {}",
        data.dataset.records.len(),
        positives,
        run.path.display()
    );
    if let Some(ceiling) = data.manifest.bayes_auroc {
        println!("generator-logit AUROC ceiling: {ceiling:.4}");
    }
    Ok(())
}

pub fn ingest(cfg: &RunConfig, run: &RunDir, dir: &Path, force: bool) -> Result<(), CliError> {
    let opts = match &cfg.data {
        DataSource::PsvDir { options, .. } => options.clone(),
        _ => PsvOptions::default(),
    };
    let manifest_path = run.guard("manifest.json", force)?;
    let records_path = run.guard("dataset.jsonl", force)?;
    let dataset = ingest_psv_dir(dir, &opts)
        .map_err(|e| CliError::Validation(format!("cannot ingest {}: {e}", dir.display())))?;
    let manifest = manifest_for(&dataset, &opts, None);
    write_artifact(&manifest_path, &manifest)?;
    write_jsonl(&dataset, &records_path).map_err(runtime)?;
    run.echo_config(cfg)?;
    println!(
        "ingested {} patients ({} positive) from {}",
        manifest.patients,
        dataset.records.iter().filter(|r| r.label == 1).count(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<(), CliError> {
    let ckpt_path = run.guard("checkpoint.bin", force)?;
    let history_path = run.guard("history.csv", force)?;
    let outcome_path = run.guard("outcome.json", force)?;
    let metrics_path = run.guard("metrics.json", force)?;

    let prep = prepared(cfg)?;
    let demo_dim = prep.dataset.demographic_names.len();
    let train_set = prep.train_records();
    let val_set = prep.val_records();
    let test_set = prep.test_records();

    let start = Instant::now();
    let (model, store, outcome) =
        fit(&cfg.model, &prep.partition, demo_dim, &train_set, &val_set, &cfg.train, cfg.seed)
            .map_err(runtime)?;
    let wall = start.elapsed();

    save_store(&store, &ckpt_path).map_err(runtime)?;
    write_history_csv(&history_path, &outcome.history).map_err(runtime)?;
    write_artifact(&outcome_path, &outcome)?;
    let val_metrics = evaluate(&model, &store, &val_set, "val").map_err(runtime)?;
    let test_metrics = evaluate(&model, &store, &test_set, "test").map_err(runtime)?;
    let report = MetricsReport::single(cfg.seed, vec![val_metrics, test_metrics.clone()], "test")
        .map_err(runtime)?;
    write_artifact(&metrics_path, &report)?;
    run.echo_config(cfg)?;

    println!(
        "trained {} epochs ({} steps) in {:.1}s; best val AUROC {:.4} at epoch {}",
        outcome.history.len(),
        outcome.total_steps,
        wall.as_secs_f64(),
        outcome.best_val_auroc,
        outcome.best_epoch
    );
    println!("test AUROC {:.4} AUPRC {:.4}", test_metrics.auroc, test_metrics.auprc);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    run: &RunDir,
    checkpoint: Option<&Path>,
    split: &str,
    force: bool,
) -> Result<(), CliError> {
    if !matches!(split, "train" | "val" | "test") {
        return Err(CliError::Validation(format!(
            "unknown split {split:?}; expected train, val, or test"
        )));
    }
    let out_path = run.guard(&format!("eval_{split}.json"), force)?;
    let store = load_checkpoint(run, checkpoint)?;
    let prep = prepared(cfg)?;
    let model = build_model(cfg, &prep)?;
    let records = match split {
        "train" => prep.train_records(),
        "val" => prep.val_records(),
        _ => prep.test_records(),
    };
    let metrics = evaluate(&model, &store, &records, split).map_err(runtime)?;
    let report = MetricsReport::single(cfg.seed, vec![metrics.clone()], split).map_err(runtime)?;
    write_artifact(&out_path, &report)?;
    println!(
        "{split}: n {} positives {} AUROC {:.4} AUPRC {:.4}",
        metrics.n, metrics.positives, metrics.auroc, metrics.auprc
    );
    Ok(())
}

fn print_curve(tag: &str, curve: &RobustnessCurve) {
    println!("{tag}: spearman(ratio, AUROC) = {:.4}", curve.spearman_ratio_auroc);
    for p in &curve.points {
        println!(
            "  ratio {:.2} removed {:2} -> AUROC {:.4} AUPRC {:.4}",
            p.ratio,
            p.removed.len(),
            p.metrics.auroc,
            p.metrics.auprc
        );
    }
}

pub fn robustness(
    cfg: &RunConfig,
    run: &RunDir,
    checkpoint: Option<&Path>,
    lab_only: bool,
    force: bool,
) -> Result<(), CliError> {
    let lab_path = run.guard("robustness_lab.json", force)?;
    let combined_path = if lab_only {
        None
    } else {
        Some(run.guard("robustness_combined.json", force)?)
    };
    let store = load_checkpoint(run, checkpoint)?;
    let prep = prepared(cfg)?;
    let model = build_model(cfg, &prep)?;
    let train_set = prep.train_records();
    let test_set = prep.test_records();
    let order = sensor_removal_order(&train_set, prep.dataset.cols()).map_err(runtime)?;

    let lab_curve = robustness_sweep(
        &model,
        &store,
        &test_set,
        &order,
        &prep.partition.lab_idx,
        &cfg.ratios,
        true,
    )
    .map_err(runtime)?;
    write_artifact(&lab_path, &lab_curve)?;
    print_curve("lab-only removal", &lab_curve);

    if let Some(combined_path) = combined_path {
        let pool: Vec<usize> = (0..prep.dataset.cols()).collect();
        let combined =
            robustness_sweep(&model, &store, &test_set, &order, &pool, &cfg.ratios, false)
                .map_err(runtime)?;
        write_artifact(&combined_path, &combined)?;
        print_curve("combined removal", &combined);
    }
    run.echo_config(cfg)
}

pub fn ablate(cfg: &RunConfig, run: &RunDir, kind: AblateKind, force: bool) -> Result<(), CliError> {
    let prep = prepared(cfg)?;
    let demo_dim = prep.dataset.demographic_names.len();
    let train_set = prep.train_records();
    let val_set = prep.val_records();
    let test_set = prep.test_records();
    match kind {
        AblateKind::Token => {
            let out_path = run.guard("ablate_token.json", force)?;
            let report = ablate_not_measured(
                &cfg.model,
                &prep.partition,
                demo_dim,
                &train_set,
                &val_set,
                &test_set,
                &cfg.train,
                &cfg.ablation_seeds,
            )
            .map_err(runtime)?;
            write_artifact(&out_path, &report)?;
            for mode in &report.modes {
                println!(
                    "{:<9} test AUROC {:.4} +- {:.4}  AUPRC {:.4} +- {:.4}",
                    mode.mode,
                    mode.test_auroc.mean,
                    mode.test_auroc.std,
                    mode.test_auprc.mean,
                    mode.test_auprc.std
                );
            }
            let separated = report.separation.iter().filter(|s| s.separated).count();
            println!(
                "not-measured token separated from measured embeddings in {separated}/{} seeds",
                report.separation.len()
            );
        }
        AblateKind::Word => {
            let out_path = run.guard("ablate_word.json", force)?;
            let words: Vec<&str> = cfg.ablation_words.iter().map(String::as_str).collect();
            let report = ablate_missing_word(
                &cfg.model,
                &prep.partition,
                demo_dim,
                &train_set,
                &val_set,
                &test_set,
                &cfg.train,
                &cfg.ablation_seeds,
                &words,
            )
            .map_err(runtime)?;
            write_artifact(&out_path, &report)?;
            for w in &report.words {
                println!(
                    "{:<12} test AUROC {:.4} +- {:.4}  AUPRC {:.4} +- {:.4}",
                    w.word, w.test_auroc.mean, w.test_auroc.std, w.test_auprc.mean, w.test_auprc.std
                );
            }
        }
    }
    run.echo_config(cfg)
}

pub fn export_figures(
    cfg: &RunConfig,
    run: &RunDir,
    checkpoint: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    let attn_csv = run.guard("attention_mean.csv", force)?;
    let attn_svg = run.guard("attention.svg", force)?;
    let pca_csv = run.guard("pca.csv", force)?;
    let pca_svg_path = run.guard("pca.svg", force)?;
    let store = load_checkpoint(run, checkpoint)?;
    let prep = prepared(cfg)?;
    let model = build_model(cfg, &prep)?;
    let test_set = prep.test_records();

    let weights = mean_attention(&model, &store, &test_set, 64).map_err(runtime)?;
    let labels: Vec<String> = model
        .vital_idx()
        .iter()
        .map(|&v| prep.dataset.variables[v].name.clone())
        .collect();
    let mut csv = String::from("variable");
    for p in 0..model.cfg().prototypes {
        csv.push_str(&format!(",p{p}"));
    }
    csv.push('\n');
    for (label, row) in labels.iter().zip(&weights) {
        csv.push_str(label);
        for w in row {
            csv.push_str(&format!(",{w}"));
        }
        csv.push('\n');
    }
    write_text(&attn_csv, &csv)?;
    write_text(&attn_svg, &heatmap_svg(&labels, &weights))?;

    let embeds = patient_embeddings(&model, &store, &test_set).map_err(runtime)?;
    let pca = pca_project(&embeds, 2).map_err(runtime)?;
    let mut table = String::from("id,label,pc1,pc2\n");
    let mut points = Vec::with_capacity(test_set.len());
    for (rec, coords) in test_set.iter().zip(&pca.coords) {
        table.push_str(&format!("{},{},{},{}\n", rec.id, rec.label, coords[0], coords[1]));
        points.push((coords[0], coords[1], rec.label));
    }
    write_text(&pca_csv, &table)?;
    write_text(&pca_svg_path, &scatter_svg(&points))?;

    run.echo_config(cfg)?;
    for path in [&attn_csv, &attn_svg, &pca_csv, &pca_svg_path] {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn grad_check(cfg: &RunConfig) -> Result<(), CliError> {
    let prep = prepared(cfg)?;
    let model = build_model(cfg, &prep)?;
    let mut store = ParameterStore::new();
    model.init_params(&mut store, cfg.seed).map_err(runtime)?;
    let batch = probe_batch(&prep.train_records())?;

    let gcfg = GradCheckConfig {
        step: 1e-5,
        samples_per_param: 2,
        seed: cfg.seed,
        // Central differences of an O(1) loss carry ~1e-12 noise; tiny true
        // derivatives need the denominator floored above that.
        denom_floor: 1e-6,
    };
    let report = check_gradients(
        |store| {
            let mut tape = Tape::new();
            let (loss, params) = model.batch_loss(&mut tape, store, &batch, 1.0)?;
            Ok(BuiltLoss { tape, loss, params })
        },
        &mut store,
        &gcfg,
    )
    .map_err(runtime)?;

    match &report.worst {
        Some(worst) => println!(
            "checked {} coordinates; max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            report.checked, report.max_rel_err, worst.name, worst.index, worst.analytic, worst.numeric
        ),
        None => println!("checked {} coordinates; max relative error {:.3e}", report.checked, report.max_rel_err),
    }
    if !report.within(1e-4) {
        return Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e} >= 1e-4",
            report.max_rel_err
        )));
    }
    println!("gradient check passed (tolerance 1e-4)");
    Ok(())
}
