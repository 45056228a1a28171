//! Manual timing probe, not part of the default suite.

use std::time::Instant;

use vital_core::dataset::{generate, prepare, PartitionConfig, SyntheticConfig};
use vital_core::model::{ModelConfig, VitalModel};
use vital_core::tensor::{ParameterStore, Tape};
use vital_core::train::{train, TrainConfig};

#[test]
#[ignore = "manual probe for sizing runtime budgets"]
fn default_scale_sample_cost() {
    let t0 = Instant::now();
    let data = generate(&SyntheticConfig::default()).unwrap();
    println!("generate: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let prep = prepare(data.dataset, &PartitionConfig::default(), 0.15, 0.15, 0, 48).unwrap();
    println!("prepare: {:?}", t0.elapsed());
    println!(
        "partition: {} vitals, {} labs",
        prep.partition.vital_idx.len(),
        prep.partition.lab_idx.len()
    );

    let model = VitalModel::new(ModelConfig::default(), &prep.partition, 2).unwrap();
    let mut store = ParameterStore::new();
    let t0 = Instant::now();
    model.init_params(&mut store, 0).unwrap();
    println!("init: {:?}", t0.elapsed());

    let recs = prep.train_records();
    let t0 = Instant::now();
    let n = 8;
    for rec in recs.iter().take(n) {
        let mut tape = Tape::new();
        let (_, loss) = model.forward_loss(&mut tape, &store, rec, 1.0).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    let per = t0.elapsed() / n as u32;
    println!("forward+backward per sample: {per:?}");

    let t0 = Instant::now();
    for rec in recs.iter().take(n) {
        let mut tape = Tape::new();
        let _ = model.forward(&mut tape, &store, rec).unwrap();
    }
    println!("forward only per sample: {:?}", t0.elapsed() / n as u32);
}

#[test]
#[ignore = "manual probe for sizing runtime budgets"]
fn observable_signal_probe() {
    // Upper bound on what any model can read off the observed data: oracle
    // feature extraction (per-vital OLS level+trend, precision-weighted lab
    // mean, panel-ordered flag) recombined with the generating coefficients.
    let data = generate(&SyntheticConfig::default()).unwrap();
    let cfg = SyntheticConfig::default();
    let mech = data.manifest.mechanism.as_ref().unwrap();
    let labels: Vec<u8> = data.dataset.records.iter().map(|r| r.label).collect();

    let mut logit_hat = Vec::new();
    for rec in &data.dataset.records {
        // Slope estimate from the driver vital: regress value on phase.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in 0..rec.rows {
            if rec.observed(t, 0) {
                xs.push(t as f64 / (rec.rows - 1) as f64 - 0.5);
                ys.push(rec.value(t, 0));
            }
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let trend = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        // level = level_coef * slope; trend = 1.5 * slope. Combine.
        let level_coef = 1.25;
        let s_hat = (my / level_coef + trend / 1.5) / 2.0;

        // Lab level estimate: loading-weighted mean of observed values.
        let (mut num, mut den) = (0.0, 0.0);
        for &(col, loading) in &mech.informative_labs {
            let mut vals = Vec::new();
            for t in 0..rec.rows {
                if rec.observed(t, col) {
                    vals.push(rec.value(t, col));
                }
            }
            if !vals.is_empty() {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                num += loading * m * vals.len() as f64;
                den += loading * loading * vals.len() as f64;
            }
        }
        let l_hat = if den > 0.0 { num / den } else { 0.0 };
        logit_hat.push(cfg.slope_coef * s_hat + cfg.lab_coef * l_hat + cfg.intercept);
    }
    let attainable = vital_core::metrics::auroc(&logit_hat, &labels).unwrap();
    println!("ceiling (latent): {:?}", data.manifest.bayes_auroc);
    println!("attainable from observations (oracle features): {attainable:.4}");

    // Univariate check: AUROC of each variable's observed mean.
    for col in [0usize, 1, 2, cfg.vitals, cfg.vitals + 1, cfg.vitals + 2] {
        let feats: Vec<f64> = data
            .dataset
            .records
            .iter()
            .map(|rec| {
                let vals: Vec<f64> =
                    (0..rec.rows).filter(|&t| rec.observed(t, col)).map(|t| rec.value(t, col)).collect();
                if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 }
            })
            .collect();
        let a = vital_core::metrics::auroc(&feats, &labels).unwrap();
        println!("univariate mean AUROC col {col}: {a:.4}");
    }
}

#[test]
#[ignore = "manual probe for sizing runtime budgets"]
fn default_scale_learnability() {
    let data = generate(&SyntheticConfig::default()).unwrap();
    println!("bayes ceiling: {:?}", data.manifest.bayes_auroc);
    let prep = prepare(data.dataset, &PartitionConfig::default(), 0.15, 0.15, 0, 48).unwrap();

    let model = VitalModel::new(ModelConfig::default(), &prep.partition, 2).unwrap();
    let mut store = ParameterStore::new();
    model.init_params(&mut store, 0).unwrap();

    let train_set = prep.train_records();
    let val_set = prep.val_records();
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.001);
    let epochs: usize =
        std::env::var("PROBE_EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut tcfg = TrainConfig { epochs, ..TrainConfig::default() };
    tcfg.adam.lr = lr;
    let t0 = Instant::now();
    let outcome = train(&model, &mut store, &train_set, &val_set, &tcfg).unwrap();
    println!("train wall: {:?}", t0.elapsed());
    for e in &outcome.history {
        println!(
            "epoch {}: loss {:.4} val auroc {:.4} auprc {:.4}",
            e.epoch, e.train_loss, e.val_auroc, e.val_auprc
        );
    }
    println!("best val auroc: {:.4}", outcome.best_val_auroc);
}

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

/// Sizes the multi-seed protocol checks: trains small models across seeds and
/// prints the robustness curves, ablation orderings, and token separation.
#[test]
#[ignore = "manual probe for sizing runtime budgets"]
fn mini_scale_protocol_probe() {
    use vital_core::backbone::BackboneConfig;
    use vital_core::model::NmTokenMode;
    use vital_core::train::protocol::{
        ablate_not_measured, fit, robustness_sweep, sensor_removal_order, DEFAULT_RATIOS,
    };

    let patients = env_usize("PROBE_PATIENTS", 600);
    let epochs = env_usize("PROBE_EPOCHS", 6);
    let lr = env_f64("PROBE_LR", 2.5e-3);
    let panel_rate = env_f64("PROBE_PANEL", 0.85);
    let boost = env_f64("PROBE_BOOST", 0.15);
    let slope_coef = env_f64("PROBE_SLOPE", 8.0);
    let lab_coef = env_f64("PROBE_LABC", 5.5);
    println!(
        "patients {patients} epochs {epochs} lr {lr} panel {panel_rate} boost {boost} slope {slope_coef} labc {lab_coef}"
    );

    let synth = |seed: u64| SyntheticConfig {
        patients,
        vitals: 4,
        labs: 6,
        t_max: 24,
        min_len: 12,
        seed,
        panel_rate,
        label_measurement_boost: boost,
        slope_coef,
        lab_coef,
        ..SyntheticConfig::default()
    };
    let mcfg = ModelConfig {
        backbone: BackboneConfig {
            layers: 1,
            heads: 2,
            dim: 32,
            ff_dim: 64,
            vocab_size: 64,
            max_positions: 24,
            pretrain_steps: 0,
            ..BackboneConfig::default()
        },
        vital_heads: 2,
        vital_head_dim: 4,
        prototypes: 24,
        state_dim: 8,
        mixer_blocks: 2,
        nm_mode: NmTokenMode::Trainable,
        missing_word: "Missing".to_string(),
    };
    let mut tcfg = TrainConfig { epochs, batch_size: 16, ..TrainConfig::default() };
    tcfg.adam.lr = lr;

    let seeds: [u64; 5] = [0, 1, 2, 3, 4];
    let t0 = Instant::now();
    let mut combined = vec![0.0; DEFAULT_RATIOS.len()];
    let mut lab_only = vec![0.0; DEFAULT_RATIOS.len()];
    let mut full = Vec::new();
    for &seed in &seeds {
        let data = generate(&synth(seed)).unwrap();
        let prep = prepare(data.dataset, &PartitionConfig::default(), 0.15, 0.15, seed, 24).unwrap();
        let train_set = prep.train_records();
        let val_set = prep.val_records();
        let test_set = prep.test_records();
        let (model, store, _) =
            fit(&mcfg, &prep.partition, 2, &train_set, &val_set, &tcfg, seed).unwrap();
        let base = vital_core::train::evaluate(&model, &store, &test_set, "test").unwrap();
        full.push(base.auroc);
        let order = sensor_removal_order(&train_set, prep.dataset.cols()).unwrap();
        let pool: Vec<usize> = (0..prep.dataset.cols()).collect();
        let c = robustness_sweep(&model, &store, &test_set, &order, &pool, &DEFAULT_RATIOS, false)
            .unwrap();
        let l = robustness_sweep(
            &model, &store, &test_set, &order, &prep.partition.lab_idx, &DEFAULT_RATIOS, true,
        )
        .unwrap();
        for (i, p) in c.points.iter().enumerate() {
            combined[i] += p.metrics.auroc / seeds.len() as f64;
        }
        for (i, p) in l.points.iter().enumerate() {
            lab_only[i] += p.metrics.auroc / seeds.len() as f64;
        }
    }
    println!("full-test AUROC per seed: {full:?}");
    println!("robustness wall: {:?}", t0.elapsed());
    for (i, r) in DEFAULT_RATIOS.iter().enumerate() {
        println!(
            "ratio {:.1}: combined {:.4} lab-only {:.4} (lab >= comb: {})",
            r,
            combined[i],
            lab_only[i],
            lab_only[i] >= combined[i]
        );
    }

    let data = generate(&synth(7)).unwrap();
    let prep = prepare(data.dataset, &PartitionConfig::default(), 0.15, 0.15, 7, 24).unwrap();
    let train_set = prep.train_records();
    let val_set = prep.val_records();
    let test_set = prep.test_records();
    let t0 = Instant::now();
    let report = ablate_not_measured(
        &mcfg, &prep.partition, 2, &train_set, &val_set, &test_set, &tcfg, &seeds,
    )
    .unwrap();
    println!("ablation wall: {:?}", t0.elapsed());
    for m in &report.modes {
        println!(
            "mode {:<9} AUROC {:.4} +- {:.4} shifts {:?}",
            m.mode, m.test_auroc.mean, m.test_auroc.std, m.token_shift
        );
    }
    for (i, d) in report.separation.iter().enumerate() {
        println!(
            "seed {i}: nm nearest {:.4} median intra {:.4} separated {}",
            d.nm_to_nearest_measured, d.median_intra_measured, d.separated
        );
    }
}
