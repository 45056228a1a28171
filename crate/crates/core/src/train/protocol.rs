//! Evaluation protocols: ranked sensor removal, robustness sweeps, token and
//! word ablations, and the not-measured-token separation diagnostic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Partition, PatientRecord};
use crate::metrics::{auroc, spearman};
use crate::model::{ModelConfig, NmTokenMode, VitalModel};
use crate::tensor::{ParameterStore, Tape};

use super::{evaluate, train, SplitMetrics, TrainConfig, TrainError, TrainOutcome};

/// Variables ranked most-informative first by the univariate separation of
/// their per-patient mean observed value, |AUROC - 0.5|. Patients without a
/// single observation contribute the variable's global mean. Ties keep
/// variable-index order.
pub fn sensor_removal_order(records: &[PatientRecord], cols: usize) -> Result<Vec<usize>, TrainError> {
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(cols);
    for v in 0..cols {
        let means: Vec<Option<f64>> = records.iter().map(|r| r.observed_mean(v)).collect();
        let observed: Vec<f64> = means.iter().filter_map(|m| *m).collect();
        let global = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        let scores: Vec<f64> = means.iter().map(|m| m.unwrap_or(global)).collect();
        let a = auroc(&scores, &labels)?;
        scored.push((v, (a - 0.5).abs()));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(v, _)| v).collect())
}

/// Copies of `records` with the given variables made completely missing:
/// mask zeroed, values blanked. Removed dense variables therefore feed
/// all-sentinel sequences; removed sparse variables hit the
/// not-measured token.
pub fn apply_removal(records: &[PatientRecord], removed: &[usize]) -> Vec<PatientRecord> {
    let mut out = records.to_vec();
    for rec in &mut out {
        for &v in removed {
            for t in 0..rec.rows {
                rec.mask[t * rec.cols + v] = 0;
                rec.values[t * rec.cols + v] = f64::NAN;
            }
        }
    }
    out
}

/// Top `ceil(ratio * pool.len())` entries of `order` that belong to `pool`,
/// in ranked order.
pub fn removal_subset(order: &[usize], pool: &[usize], ratio: f64) -> Vec<usize> {
    let k = (ratio * pool.len() as f64).ceil() as usize;
    order.iter().copied().filter(|v| pool.contains(v)).take(k).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub ratio: f64,
    pub removed: Vec<usize>,
    pub metrics: SplitMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub lab_only: bool,
    pub order: Vec<usize>,
    pub points: Vec<RobustnessPoint>,
    /// Spearman correlation between ratio and AUROC across the points.
    pub spearman_ratio_auroc: f64,
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Evaluates the trained model on copies of the test set with the
/// top-ranked share of `pool` removed, for each ratio.
pub fn robustness_sweep(
    model: &VitalModel,
    store: &ParameterStore,
    test_set: &[PatientRecord],
    order: &[usize],
    pool: &[usize],
    ratios: &[f64],
    lab_only: bool,
) -> Result<RobustnessCurve, TrainError> {
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let removed = removal_subset(order, pool, ratio);
        let crippled = apply_removal(test_set, &removed);
        let metrics = evaluate(model, store, &crippled, "test")?;
        points.push(RobustnessPoint { ratio, removed, metrics });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.ratio).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.metrics.auroc).collect();
    let rho = spearman(&xs, &ys)?;
    Ok(RobustnessCurve { lab_only, order: order.to_vec(), points, spearman_ratio_auroc: rho })
}

/// Initializes and trains one model; `seed` drives both the parameter
/// initialization and the batch shuffling.
pub fn fit(
    cfg: &ModelConfig,
    partition: &Partition,
    demo_dim: usize,
    train_set: &[PatientRecord],
    val_set: &[PatientRecord],
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(VitalModel, ParameterStore, TrainOutcome), TrainError> {
    let model = VitalModel::new(cfg.clone(), partition, demo_dim).map_err(TrainError::Model)?;
    let mut store = ParameterStore::new();
    model.init_params(&mut store, seed).map_err(TrainError::Model)?;
    let tcfg = TrainConfig { shuffle_seed: seed, ..tcfg.clone() };
    let outcome = train(&model, &mut store, train_set, val_set, &tcfg)?;
    Ok((model, store, outcome))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl SeedSummary {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = if per_seed.len() < 2 {
            0.0
        } else {
            (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { per_seed, mean, std }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationDiagnostic {
    pub nm_to_nearest_measured: f64,
    pub median_intra_measured: f64,
    /// Token sits farther from the measured cloud than its typical spread.
    pub separated: bool,
}

/// Distance diagnostic between the not-measured token and the cloud of
/// measured lab-state rows collected from up to `cap` records.
pub fn nm_separation(
    model: &VitalModel,
    store: &ParameterStore,
    records: &[PatientRecord],
    cap: usize,
) -> Result<SeparationDiagnostic, TrainError> {
    let nm = store.get("lab.nm_token")?.data().to_vec();
    let mut cloud: Vec<Vec<f64>> = Vec::new();
    for rec in records.iter().take(cap) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, rec).map_err(TrainError::Model)?;
        if let Some(states) = fwd.lab_states {
            let t = tape.value(states);
            let s = t.shape()[1];
            for (j, &measured) in fwd.lab_measured.iter().enumerate() {
                if measured {
                    cloud.push(t.data()[j * s..(j + 1) * s].to_vec());
                }
            }
        }
    }
    if cloud.len() < 2 {
        return Err(TrainError::Config("separation diagnostic needs at least two measured lab rows".into()));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let nearest = cloud.iter().map(|row| dist(&nm, row)).fold(f64::INFINITY, f64::min);
    let mut pairwise = Vec::with_capacity(cloud.len() * (cloud.len() - 1) / 2);
    for i in 0..cloud.len() {
        for j in (i + 1)..cloud.len() {
            pairwise.push(dist(&cloud[i], &cloud[j]));
        }
    }
    pairwise.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = pairwise.len() / 2;
    let median = if pairwise.len() % 2 == 1 {
        pairwise[mid]
    } else {
        0.5 * (pairwise[mid - 1] + pairwise[mid])
    };
    Ok(SeparationDiagnostic {
        nm_to_nearest_measured: nearest,
        median_intra_measured: median,
        separated: nearest > median,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub mode: String,
    pub test_auroc: SeedSummary,
    pub test_auprc: SeedSummary,
    /// L2 displacement of the not-measured token from its initialization,
    /// per seed. Frozen modes stay at exactly zero.
    pub token_shift: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenAblationReport {
    pub modes: Vec<ModeOutcome>,
    /// Per-seed diagnostics on the trained trainable-mode models.
    pub separation: Vec<SeparationDiagnostic>,
    /// Full-scale reference results (P19 benchmark), for context only.
    pub reference_full_scale_auroc: BTreeMap<String, f64>,
    pub reference_full_scale_auprc: BTreeMap<String, f64>,
}

pub const TOKEN_MODES: [NmTokenMode; 3] =
    [NmTokenMode::Trainable, NmTokenMode::Zero, NmTokenMode::Random];

fn mode_name(mode: NmTokenMode) -> &'static str {
    match mode {
        NmTokenMode::Trainable => "trainable",
        NmTokenMode::Zero => "zero",
        NmTokenMode::Random => "random",
    }
}

/// Trains one model per (mode, seed) and summarizes test metrics.
#[allow(clippy::too_many_arguments)]
pub fn ablate_not_measured(
    cfg: &ModelConfig,
    partition: &Partition,
    demo_dim: usize,
    train_set: &[PatientRecord],
    val_set: &[PatientRecord],
    test_set: &[PatientRecord],
    tcfg: &TrainConfig,
    seeds: &[u64],
) -> Result<TokenAblationReport, TrainError> {
    let mut modes = Vec::with_capacity(TOKEN_MODES.len());
    let mut separation = Vec::new();
    for mode in TOKEN_MODES {
        let cfg = ModelConfig { nm_mode: mode, ..cfg.clone() };
        let mut aurocs = Vec::with_capacity(seeds.len());
        let mut auprcs = Vec::with_capacity(seeds.len());
        let mut shifts = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let model = VitalModel::new(cfg.clone(), partition, demo_dim).map_err(TrainError::Model)?;
            let mut store = ParameterStore::new();
            model.init_params(&mut store, seed).map_err(TrainError::Model)?;
            let nm_init = store.get("lab.nm_token")?.data().to_vec();
            let tcfg = TrainConfig { shuffle_seed: seed, ..tcfg.clone() };
            train(&model, &mut store, train_set, val_set, &tcfg)?;
            let test = evaluate(&model, &store, test_set, "test")?;
            let nm_final = store.get("lab.nm_token")?.data();
            let shift = nm_final
                .iter()
                .zip(&nm_init)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if mode == NmTokenMode::Trainable {
                separation.push(nm_separation(&model, &store, test_set, 64)?);
            }
            aurocs.push(test.auroc);
            auprcs.push(test.auprc);
            shifts.push(shift);
        }
        modes.push(ModeOutcome {
            mode: mode_name(mode).to_string(),
            test_auroc: SeedSummary::from_values(aurocs),
            test_auprc: SeedSummary::from_values(auprcs),
            token_shift: shifts,
        });
    }
    let reference_full_scale_auroc: BTreeMap<String, f64> = [
        ("trainable", 89.3),
        ("zero", 88.5),
        ("random", 86.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let reference_full_scale_auprc: BTreeMap<String, f64> = [
        ("trainable", 57.5),
        ("zero", 55.2),
        ("random", 50.5),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(TokenAblationReport {
        modes,
        separation,
        reference_full_scale_auroc,
        reference_full_scale_auprc,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordOutcome {
    pub word: String,
    pub test_auroc: SeedSummary,
    pub test_auprc: SeedSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordAblationReport {
    pub words: Vec<WordOutcome>,
    /// Full-scale reference results (P19 benchmark), for context only.
    pub reference_full_scale_auroc: BTreeMap<String, f64>,
}

pub const ABLATION_WORDS: [&str; 4] = ["Missing", "Null", "Apple", "Engineering"];

/// Trains one model per (sentinel word, seed) and summarizes test metrics.
#[allow(clippy::too_many_arguments)]
pub fn ablate_missing_word(
    cfg: &ModelConfig,
    partition: &Partition,
    demo_dim: usize,
    train_set: &[PatientRecord],
    val_set: &[PatientRecord],
    test_set: &[PatientRecord],
    tcfg: &TrainConfig,
    seeds: &[u64],
    words: &[&str],
) -> Result<WordAblationReport, TrainError> {
    let mut outcomes = Vec::with_capacity(words.len());
    for &word in words {
        let cfg = ModelConfig { missing_word: word.to_string(), ..cfg.clone() };
        let mut aurocs = Vec::with_capacity(seeds.len());
        let mut auprcs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (model, store, _) =
                fit(&cfg, partition, demo_dim, train_set, val_set, tcfg, seed)?;
            let test = evaluate(&model, &store, test_set, "test")?;
            aurocs.push(test.auroc);
            auprcs.push(test.auprc);
        }
        outcomes.push(WordOutcome {
            word: word.to_string(),
            test_auroc: SeedSummary::from_values(aurocs),
            test_auprc: SeedSummary::from_values(auprcs),
        });
    }
    let reference_full_scale_auroc: BTreeMap<String, f64> = [
        ("Missing", 89.3),
        ("Null", 87.2),
        ("Apple", 86.1),
        ("Engineering", 84.3),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(WordAblationReport { words: outcomes, reference_full_scale_auroc })
}
