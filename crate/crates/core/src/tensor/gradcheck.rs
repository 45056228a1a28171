//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{ParameterStore, Tape, Var};

pub type BuildError = Box<dyn std::error::Error + Send + Sync>;

/// A loss freshly built on its own tape, with the tape positions of every
/// trainable parameter that was bound.
pub struct BuiltLoss {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<(String, Var)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor.
    pub samples_per_param: usize,
    pub seed: u64,
    /// Floor of the relative-error denominator. Central differences of an
    /// O(1) loss carry ~1e-12 absolute noise at step 1e-5, so deep graphs
    /// whose true derivative sits below that need a floor well above the
    /// noise; the comparison stays fully relative for every coordinate whose
    /// gradient exceeds the floor.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, samples_per_param: 4, seed: 0, denom_floor: 1e-12 }
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss build failed: {0}")]
    Build(String),
    #[error("function is not deterministic: {first} vs {second} on identical inputs")]
    NonDeterministic { first: f64, second: f64 },
    #[error("store error: {0}")]
    Store(#[from] super::StoreError),
    #[error("tensor error: {0}")]
    Tensor(#[from] super::TensorError),
}

#[derive(Debug, Clone)]
pub struct CoordReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordReport>,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients against central differences on randomly
/// sampled coordinates of every trainable parameter.
///
/// `build` must construct the loss from the store's current values, from
/// scratch, every time it is called. The builder is called twice up front;
/// if the two losses differ bitwise the function is rejected as
/// non-deterministic (finite differences would be meaningless). Frozen
/// parameters are never perturbed.
pub fn grad_check<F>(
    build: F,
    store: &mut ParameterStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&ParameterStore) -> Result<BuiltLoss, BuildError>,
{
    let eval = |store: &ParameterStore| -> Result<BuiltLoss, GradCheckError> {
        build(store).map_err(|e| GradCheckError::Build(e.to_string()))
    };

    let first = eval(store)?;
    let second = eval(store)?;
    let l0 = first.tape.value(first.loss).item();
    let l1 = second.tape.value(second.loss).item();
    if l0.to_bits() != l1.to_bits() {
        return Err(GradCheckError::NonDeterministic { first: l0, second: l1 });
    }

    let mut built = first;
    let grads = built.tape.backward(built.loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, var) in &built.params {
        if store.is_frozen(name)? {
            continue;
        }
        let n = store.get(name)?.len();
        let g = grads
            .wrt(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        analytic.push((name.clone(), g));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    let mut worst: Option<CoordReport> = None;

    for (name, grad) in &analytic {
        let numel = store.get(name)?.len();
        let k = cfg.samples_per_param.min(numel);
        let coords = rand::seq::index::sample(&mut rng, numel, k);
        for index in coords.iter() {
            let orig = store.get(name)?.data()[index];

            store.get_mut(name)?.data_mut()[index] = orig + cfg.step;
            let plus = eval(store)?;
            let lp = plus.tape.value(plus.loss).item();

            store.get_mut(name)?.data_mut()[index] = orig - cfg.step;
            let minus = eval(store)?;
            let lm = minus.tape.value(minus.loss).item();

            store.get_mut(name)?.data_mut()[index] = orig;

            let numeric = (lp - lm) / (2.0 * cfg.step);
            let a = grad[index];
            let r = rel_err(a, numeric, cfg.denom_floor);
            checked += 1;
            if r > max_rel {
                max_rel = r;
                worst = Some(CoordReport {
                    name: name.clone(),
                    index,
                    analytic: a,
                    numeric,
                    rel_err: r,
                });
            }
        }
    }

    Ok(GradCheckReport { checked, max_rel_err: max_rel, worst })
}
