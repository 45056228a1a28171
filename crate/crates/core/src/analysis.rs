//! Embedding projections and attention summaries behind the exported
//! figures: centered PCA via power iteration, per-variable mean attention
//! over prototypes, and top-k prototype overlap.

use thiserror::Error;

use crate::dataset::PatientRecord;
use crate::model::VitalModel;
use crate::tensor::{ParameterStore, Tape};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} vectors, got {got}")]
    TooFewVectors { need: usize, got: usize },
    #[error("vectors have inconsistent or zero dimension")]
    BadDimension,
    #[error("total variance is zero; nothing to project")]
    ZeroVariance,
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows, leading component first, sign-fixed so each
    /// component's largest-magnitude coordinate is positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Input vectors projected onto the components, in input order.
    pub coords: Vec<Vec<f64>>,
}

/// Centered PCA of the top `k` components via power iteration with
/// deflation on the population covariance.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Pca, AnalysisError> {
    let n = vectors.len();
    if n < k + 1 {
        return Err(AnalysisError::TooFewVectors { need: k + 1, got: n });
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(AnalysisError::BadDimension);
    }

    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![vec![0.0; d]; d];
    for v in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += v[i] * v[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x /= n as f64;
        }
    }
    if (0..d).map(|i| cov[i][i]).sum::<f64>() == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }

    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for _ in 0..k.min(d) {
        let (v, lambda) = dominant_eigenpair(&cov);
        // Deflate before the sign fix; the subtraction is sign-invariant.
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(fix_sign(v));
        eigenvalues.push(lambda);
    }

    let coords = centered
        .iter()
        .map(|x| components.iter().map(|c| dot(x, c)).collect())
        .collect();
    Ok(Pca { mean, components, eigenvalues, coords })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest-magnitude coordinate made positive (first index on ties).
fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    let mut arg = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[arg].abs() {
            arg = i;
        }
    }
    if v[arg] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    v
}

/// Power iteration from the axis of largest remaining variance.
fn dominant_eigenpair(cov: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = cov.len();
    let mut start = 0;
    for i in 0..d {
        if cov[i][i] > cov[start][start] {
            start = i;
        }
    }
    let mut v = vec![0.0; d];
    v[start] = 1.0;
    for _ in 0..10_000 {
        let mut w = vec![0.0; d];
        for i in 0..d {
            w[i] = dot(&cov[i], &v);
        }
        let norm = dot(&w, &w).sqrt();
        if norm < 1e-300 {
            // Remaining matrix is (numerically) zero; current axis is fine.
            return (v, 0.0);
        }
        let mut drift = 0.0;
        for (wi, vi) in w.iter_mut().zip(v.iter()) {
            *wi /= norm;
            drift += (*wi - vi) * (*wi - vi);
        }
        let converged = drift < 1e-26;
        v = w;
        if converged {
            break;
        }
    }
    let mut cv = vec![0.0; d];
    for i in 0..d {
        cv[i] = dot(&cov[i], &v);
    }
    let lambda = dot(&v, &cv);
    (v, lambda)
}

/// Final patient representations, one row per record.
pub fn patient_embeddings(
    model: &VitalModel,
    store: &ParameterStore,
    records: &[PatientRecord],
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, rec).map_err(TrainError::Model)?;
        out.push(tape.value(fwd.fused).data().to_vec());
    }
    Ok(out)
}

/// Per dense variable: attention mass per prototype, averaged over heads,
/// observed time steps, and up to `cap` records.
pub fn mean_attention(
    model: &VitalModel,
    store: &ParameterStore,
    records: &[PatientRecord],
    cap: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let protos = model.cfg().prototypes;
    let mut sums = vec![vec![0.0; protos]; model.vital_idx().len()];
    let mut counts = vec![0usize; model.vital_idx().len()];
    for rec in records.iter().take(cap) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, rec).map_err(TrainError::Model)?;
        for (slot, &v) in model.vital_idx().iter().enumerate() {
            for &head in &fwd.attention[slot] {
                let t = tape.value(head);
                for step in 0..rec.rows {
                    if rec.observed(step, v) {
                        let row = &t.data()[step * protos..(step + 1) * protos];
                        for (s, x) in sums[slot].iter_mut().zip(row) {
                            *s += x;
                        }
                        counts[slot] += 1;
                    }
                }
            }
        }
    }
    for (slot, row) in sums.iter_mut().enumerate() {
        if counts[slot] > 0 {
            for x in row.iter_mut() {
                *x /= counts[slot] as f64;
            }
        }
    }
    Ok(sums)
}

/// Indices of the `k` largest weights, ties broken toward lower index.
pub fn top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).expect("finite weights").then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean over unordered pairs of |A ∩ B| / k.
pub fn mean_pairwise_overlap(sets: &[Vec<usize>], k: usize) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let inter = sets[i].iter().filter(|x| sets[j].contains(x)).count();
            total += inter as f64 / k as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Expected |A ∩ B| / k for two independent uniform k-subsets of g items.
pub fn chance_overlap(g: usize, k: usize) -> f64 {
    k as f64 / g as f64
}
