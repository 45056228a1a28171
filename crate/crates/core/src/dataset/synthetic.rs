//! Synthetic cohort generator with a known labeling mechanism.
//!
//! Latent severity has two independent components: a vital slope `s` and a
//! lab level `l`, both standard normal. The label is Bernoulli of
//! `sigmoid(a*s + b*l + c)`. Vital 0 carries `s` in its level and trend,
//! vital 2 is a fixed linear coupling of vitals 0 and 1, later even-offset
//! vitals mix vital 0 with decaying coefficients, and the first labs reflect
//! `l` with decaying coefficients. Lab panels are ordered more often for
//! positive patients, so which labs exist at all is itself weak signal.
//! Scoring patients with the generator's own logit estimates the attainable
//! AUROC ceiling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Manifest, Mechanism, PatientRecord, VariableKind, VariableSpec};
use crate::metrics;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub patients: usize,
    pub vitals: usize,
    pub labs: usize,
    pub t_max: usize,
    pub min_len: usize,
    pub seed: u64,
    /// Label logit weight on the vital slope component.
    pub slope_coef: f64,
    /// Label logit weight on the lab level component.
    pub lab_coef: f64,
    pub intercept: f64,
    /// AR(1) coefficient of the nuisance dynamics.
    pub ar_rho: f64,
    pub vital_obs_rate: f64,
    pub lab_obs_rate: f64,
    /// Probability a lab panel is ordered at all for a negative patient.
    pub panel_rate: f64,
    /// Relative panel-rate increase for positive patients.
    pub label_measurement_boost: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            patients: 2000,
            vitals: 8,
            labs: 12,
            t_max: 48,
            min_len: 32,
            seed: 0,
            slope_coef: 8.0,
            lab_coef: 5.5,
            intercept: -1.4,
            ar_rho: 0.8,
            vital_obs_rate: 0.9,
            lab_obs_rate: 0.22,
            panel_rate: 0.85,
            label_measurement_boost: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.patients == 0 {
            return Err(DataError::Invalid("patients must be positive".into()));
        }
        if self.vitals < 3 {
            return Err(DataError::Invalid("need at least 3 vitals for the coupled triple".into()));
        }
        if self.labs == 0 {
            return Err(DataError::Invalid("need at least 1 lab".into()));
        }
        if self.min_len < 2 || self.min_len > self.t_max {
            return Err(DataError::Invalid("min_len must be in 2..=t_max".into()));
        }
        if !(0.0..1.0).contains(&self.ar_rho) {
            return Err(DataError::Invalid("ar_rho must be in [0, 1)".into()));
        }
        for (name, p) in [
            ("vital_obs_rate", self.vital_obs_rate),
            ("lab_obs_rate", self.lab_obs_rate),
            ("panel_rate", self.panel_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Invalid(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Mixing coefficient of vital `v` on the informative vital, or None for
    /// nuisance vitals. Vital 0 is the driver, 1 is independent, 2 is the
    /// coupled combination; from index 3 every second vital mixes with a
    /// halving coefficient.
    fn vital_mix(&self, v: usize) -> Option<f64> {
        if v < 3 {
            return None;
        }
        let j = v - 3;
        (j % 2 == 0).then(|| 0.5 / (1.0 + j as f64 / 2.0))
    }

    /// Loading of lab `j` on the lab level component; 0 for nuisance labs.
    fn lab_loading(&self, j: usize) -> f64 {
        match j {
            0 => 1.0,
            1 => 0.8,
            2 => 0.6,
            3 => 0.4,
            4 => 0.25,
            _ => 0.0,
        }
    }
}

pub struct GeneratedData {
    pub dataset: Dataset,
    pub manifest: Manifest,
    /// The generator's own logit per patient, in record order.
    pub true_logits: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// AR(1) path with unit stationary variance.
fn ar1_path(rng: &mut ChaCha8Rng, normal: &Normal<f64>, rho: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut x = normal.sample(rng);
    out.push(x);
    let innov = (1.0 - rho * rho).sqrt();
    for _ in 1..len {
        x = rho * x + innov * normal.sample(rng);
        out.push(x);
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> Result<GeneratedData, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let cols = cfg.vitals + cfg.labs;

    let mut variables = Vec::with_capacity(cols);
    for v in 0..cfg.vitals {
        variables.push(VariableSpec { name: format!("vital_{v:02}"), kind: VariableKind::Vital });
    }
    for j in 0..cfg.labs {
        variables.push(VariableSpec { name: format!("lab_{j:02}"), kind: VariableKind::Lab });
    }

    let mut records = Vec::with_capacity(cfg.patients);
    let mut true_logits = Vec::with_capacity(cfg.patients);
    let mut positives = 0usize;

    for pid in 0..cfg.patients {
        let len = rng.gen_range(cfg.min_len..=cfg.t_max);
        let slope = normal.sample(&mut rng);
        let lab_level = normal.sample(&mut rng);
        let logit = cfg.slope_coef * slope + cfg.lab_coef * lab_level + cfg.intercept;
        let label = u8::from(rng.gen_bool(sigmoid(logit)));
        positives += label as usize;

        let age = 65.0 + 12.0 * normal.sample(&mut rng);
        let sex = f64::from(rng.gen_bool(0.5));

        // Base AR(1) dynamics per vital.
        let bases: Vec<Vec<f64>> =
            (0..cfg.vitals).map(|_| ar1_path(&mut rng, &normal, cfg.ar_rho, len)).collect();

        let mut series = vec![vec![0.0; len]; cols];
        for t in 0..len {
            let phase = t as f64 / (len - 1) as f64 - 0.5;
            let driver = 1.25 * slope + 1.5 * slope * phase + 0.35 * bases[0][t];
            series[0][t] = driver;
            series[1][t] = bases[1][t];
            series[2][t] = 0.6 * series[0][t] + 0.4 * series[1][t];
            for v in 3..cfg.vitals {
                series[v][t] = match cfg.vital_mix(v) {
                    Some(m) => m * driver + (1.0 - m) * bases[v][t],
                    None => bases[v][t],
                };
            }
        }
        for j in 0..cfg.labs {
            let loading = cfg.lab_loading(j);
            for t in 0..len {
                series[cfg.vitals + j][t] = if loading > 0.0 {
                    loading * lab_level + 0.4 * normal.sample(&mut rng)
                } else {
                    normal.sample(&mut rng)
                };
            }
        }

        // Observation masks. Vitals: dense Bernoulli plus an occasional gap
        // episode. Labs: the panel may not be ordered at all; ordering is
        // more likely for positives.
        let mut mask = vec![vec![false; len]; cols];
        for v in 0..cfg.vitals {
            for t in 0..len {
                mask[v][t] = rng.gen_bool(cfg.vital_obs_rate);
            }
            if rng.gen_bool(0.3) {
                let gap_len = (len / 6).max(1);
                let start = rng.gen_range(0..len.saturating_sub(gap_len).max(1));
                for t in start..(start + gap_len).min(len) {
                    mask[v][t] = false;
                }
            }
        }
        for j in 0..cfg.labs {
            let rate = cfg.panel_rate * (1.0 + cfg.label_measurement_boost * label as f64);
            let ordered = rng.gen_bool(rate.min(1.0));
            if ordered {
                for t in 0..len {
                    mask[cfg.vitals + j][t] = rng.gen_bool(cfg.lab_obs_rate);
                }
            }
        }

        let mut values = Vec::with_capacity(len * cols);
        let mut mask_flat = Vec::with_capacity(len * cols);
        for t in 0..len {
            for c in 0..cols {
                if mask[c][t] {
                    values.push(series[c][t]);
                    mask_flat.push(1);
                } else {
                    values.push(f64::NAN);
                    mask_flat.push(0);
                }
            }
        }

        records.push(PatientRecord {
            id: format!("synth_{pid:05}"),
            rows: len,
            cols,
            values,
            mask: mask_flat,
            is_padding: vec![false; len],
            demographics: vec![age, sex],
            label,
        });
        true_logits.push(logit);
    }

    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let bayes_auroc = metrics::auroc(&true_logits, &labels).ok();

    let mechanism = Mechanism {
        slope_coef: cfg.slope_coef,
        lab_coef: cfg.lab_coef,
        intercept: cfg.intercept,
        informative_vital: 0,
        coupled_triple: [0, 1, 2],
        secondary_vital_mix: (3..cfg.vitals)
            .filter_map(|v| cfg.vital_mix(v).map(|m| (v, m)))
            .collect(),
        informative_labs: (0..cfg.labs)
            .filter(|&j| cfg.lab_loading(j) > 0.0)
            .map(|j| (cfg.vitals + j, cfg.lab_loading(j)))
            .collect(),
        label_measurement_boost: cfg.label_measurement_boost,
    };

    let dataset = Dataset {
        name: "synthetic".to_string(),
        variables,
        demographic_names: vec!["age".to_string(), "sex".to_string()],
        records,
    };
    dataset.validate()?;

    let manifest = Manifest {
        name: dataset.name.clone(),
        patients: cfg.patients,
        t_max: cfg.t_max,
        variables: dataset.variables.clone(),
        demographics: dataset.demographic_names.clone(),
        seed: Some(cfg.seed),
        positive_rate: positives as f64 / cfg.patients as f64,
        mechanism: Some(mechanism),
        bayes_auroc,
    };

    Ok(GeneratedData { dataset, manifest, true_logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_jsonl;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig { patients: 30, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("vital-synth-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let pa = dir.join("a.jsonl");
        let pb = dir.join("b.jsonl");
        write_jsonl(&a.dataset, &pa).unwrap();
        write_jsonl(&b.dataset, &pb).unwrap();
        let ba = std::fs::read(&pa).unwrap();
        let bb = std::fs::read(&pb).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(ba, bb);

        let c = generate(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.true_logits, c.true_logits);
    }

    #[test]
    fn default_ceiling_is_high_and_classes_are_balanced_enough() {
        let data = generate(&SyntheticConfig::default()).unwrap();
        let ceiling = data.manifest.bayes_auroc.unwrap();
        assert!(ceiling >= 0.98, "bayes ceiling {ceiling}");
        let rate = data.manifest.positive_rate;
        assert!((0.25..=0.65).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn coupled_triple_holds_exactly_where_all_observed() {
        let data = generate(&SyntheticConfig { patients: 50, ..Default::default() }).unwrap();
        let mut checked = 0;
        for r in &data.dataset.records {
            for t in 0..r.rows {
                if r.observed(t, 0) && r.observed(t, 1) && r.observed(t, 2) {
                    let want = 0.6 * r.value(t, 0) + 0.4 * r.value(t, 1);
                    assert_eq!(r.value(t, 2).to_bits(), want.to_bits());
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "only {checked} fully observed triples");
    }

    #[test]
    fn informative_vital_mean_discriminates_labels() {
        let data = generate(&SyntheticConfig { patients: 400, ..Default::default() }).unwrap();
        let labels = data.dataset.labels();
        let means: Vec<f64> = data
            .dataset
            .records
            .iter()
            .map(|r| r.observed_mean(0).unwrap_or(0.0))
            .collect();
        let auc = metrics::auroc(&means, &labels).unwrap();
        assert!(auc > 0.7, "informative vital mean AUROC {auc}");

        // A nuisance vital's mean should hover near chance.
        let noise_means: Vec<f64> = data
            .dataset
            .records
            .iter()
            .map(|r| r.observed_mean(4).unwrap_or(0.0))
            .collect();
        let auc_noise = metrics::auroc(&noise_means, &labels).unwrap();
        assert!((auc_noise - 0.5).abs() < 0.12, "nuisance AUROC {auc_noise}");
    }

    #[test]
    fn lab_panels_are_ordered_more_often_for_positives() {
        let cfg = SyntheticConfig { patients: 800, ..Default::default() };
        let data = generate(&cfg).unwrap();
        let mut ordered = [0usize; 2];
        let mut count = [0usize; 2];
        for r in &data.dataset.records {
            let li = r.label as usize;
            count[li] += 1;
            for j in 0..cfg.labs {
                if r.observed_count(cfg.vitals + j) > 0 {
                    ordered[li] += 1;
                }
            }
        }
        let rate_neg = ordered[0] as f64 / (count[0] * cfg.labs) as f64;
        let rate_pos = ordered[1] as f64 / (count[1] * cfg.labs) as f64;
        assert!(
            rate_pos > rate_neg + 0.05,
            "ordering rates pos {rate_pos} vs neg {rate_neg}"
        );
        // Some panels must be absent for the not-measured token to matter.
        assert!(rate_neg < 0.9);
    }

    #[test]
    fn lengths_vary_and_respect_bounds() {
        let cfg = SyntheticConfig { patients: 60, ..Default::default() };
        let data = generate(&cfg).unwrap();
        let lens: Vec<usize> = data.dataset.records.iter().map(|r| r.rows).collect();
        assert!(lens.iter().all(|&l| (cfg.min_len..=cfg.t_max).contains(&l)));
        assert!(lens.iter().any(|&l| l < cfg.t_max), "no short stays generated");
    }
}
