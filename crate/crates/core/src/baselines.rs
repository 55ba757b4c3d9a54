//! Comparison scorers: raw softmax confidence, temperature-calibrated
//! softmax, the three neighborhood statistics used directly as scores,
//! and Mahalanobis distance to the predicted class centroid under a tied
//! covariance.
//!
//! Every scorer returns uncertainty scores — higher means the upstream
//! prediction is more likely wrong (or the point more likely OOD).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::KnnIndex;
use crate::repr_store::ReprSet;
use crate::stats;

/// Uncertainty from raw upstream confidence: `1 - s(ŷ)`.
pub fn softmax_score(set: &ReprSet) -> Vec<f64> {
    set.confidences().iter().map(|s| 1.0 - s).collect()
}

// ---------------------------------------------------------------------
// Temperature scaling
// ---------------------------------------------------------------------

/// A fitted softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureModel {
    pub t: f64,
}

/// Search interval for the temperature.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
/// Golden-section termination width.
pub const TEMPERATURE_TOL: f64 = 1e-4;

/// Per-point class logits in a flat row-major buffer.
#[derive(Debug, Clone)]
pub struct Logits {
    pub values: Vec<f32>,
    pub n_classes: usize,
}

impl Logits {
    pub fn new(values: Vec<f32>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || values.len() % n_classes != 0 {
            return Err(Error::Consistency(format!(
                "logit buffer length {} is not a multiple of n_classes {}",
                values.len(),
                n_classes
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("logits contain non-finite values".into()));
        }
        Ok(Logits { values, n_classes })
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn temperature_nll(logits: &Logits, labels: &[u32], t: f64) -> f64 {
    let mut total = 0.0f64;
    for i in 0..logits.count() {
        let row = logits.row(i);
        let y = labels[i] as usize;
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64 / t));
        let lse = m + row.iter().map(|v| (*v as f64 / t - m).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64 / t;
    }
    total / logits.count() as f64
}

/// Fits the temperature by golden-section search of the NLL over
/// `TEMPERATURE_RANGE`, to within `TEMPERATURE_TOL` on t.
pub fn fit_temperature(logits: &Logits, labels: &[u32]) -> Result<TemperatureModel> {
    if labels.len() != logits.count() {
        return Err(Error::Consistency(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.count()
        )));
    }
    if logits.count() == 0 {
        return Err(Error::UnsupportedInput("no calibration points".into()));
    }
    if let Some(y) = labels.iter().find(|y| **y as usize >= logits.n_classes) {
        return Err(Error::Lookup(format!(
            "label {y} outside the {} logit classes",
            logits.n_classes
        )));
    }

    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = temperature_nll(logits, labels, c);
    let mut fd = temperature_nll(logits, labels, d);
    while b - a > TEMPERATURE_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = temperature_nll(logits, labels, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = temperature_nll(logits, labels, d);
        }
    }
    let t = 0.5 * (a + b);
    if !t.is_finite() {
        return Err(Error::Numeric("temperature search diverged".into()));
    }
    Ok(TemperatureModel { t })
}

impl TemperatureModel {
    /// Calibrated max-softmax confidence of each row.
    pub fn confidences(&self, logits: &Logits) -> Vec<f64> {
        (0..logits.count())
            .map(|i| {
                let row = logits.row(i);
                let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64 / self.t));
                let z: f64 = row.iter().map(|v| (*v as f64 / self.t - m).exp()).sum();
                1.0 / z // exp(max - m) = 1
            })
            .collect()
    }

    /// Uncertainty score `1 - calibrated confidence`.
    pub fn scores(&self, logits: &Logits) -> Vec<f64> {
        self.confidences(logits).into_iter().map(|c| 1.0 - c).collect()
    }
}

/// Argmax class of one logit row (first index wins ties).
pub fn argmax_class(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

// ---------------------------------------------------------------------
// Mahalanobis distance to the predicted class centroid
// ---------------------------------------------------------------------

/// Per-class means plus a shared precision matrix (inverse of the tied
/// covariance).
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    means: BTreeMap<u32, Vec<f64>>,
    /// dim x dim, row-major, symmetric positive definite.
    precision: Vec<f64>,
    dim: usize,
}

/// Fits per-class means and the tied covariance
/// `sum_c sum_{i in c} (x - mu_c)(x - mu_c)^T / (N - C)`, then inverts it
/// after adding `lambda I` with `lambda = 1e-6 * trace / dim`.
pub fn fit_mahalanobis(train: &ReprSet) -> Result<MahalanobisModel> {
    let dim = train.dim();
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, y) in train.labels().iter().enumerate() {
        by_class.entry(*y).or_default().push(i);
    }
    if let Some((y, rows)) = by_class.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::Data(format!(
            "class {y} has only {} training point(s); need at least 2 per class",
            rows.len()
        )));
    }
    let n = train.count();
    let n_classes = by_class.len();
    if n <= n_classes {
        return Err(Error::Data("not enough points to estimate a tied covariance".into()));
    }

    let mut means = BTreeMap::new();
    let mut scatter = vec![0.0f64; dim * dim];
    let mut diff = vec![0.0f64; dim];
    for (y, rows) in &by_class {
        let mut mean = vec![0.0f64; dim];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(train.vector(i)) {
                *m += *v as f64;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        for &i in rows {
            for (d, (v, m)) in diff.iter_mut().zip(train.vector(i).iter().zip(&mean)) {
                *d = *v as f64 - m;
            }
            for r in 0..dim {
                let dr = diff[r];
                for c in r..dim {
                    scatter[r * dim + c] += dr * diff[c];
                }
            }
        }
        means.insert(*y, mean);
    }
    let denom = (n - n_classes) as f64;
    for r in 0..dim {
        for c in r..dim {
            let v = scatter[r * dim + c] / denom;
            scatter[r * dim + c] = v;
            scatter[c * dim + r] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| scatter[i * dim + i]).sum();
    let lambda = 1e-6 * trace / dim as f64;
    for i in 0..dim {
        scatter[i * dim + i] += lambda;
    }
    let precision = invert_spd(&scatter, dim).map_err(|e| match e {
        Error::Numeric(msg) => {
            let diag: Vec<f64> = (0..dim).map(|i| scatter[i * dim + i]).collect();
            let max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            Error::Numeric(format!(
                "tied covariance is singular beyond regularization (lambda={lambda:.3e}, \
                 diagonal condition estimate {:.3e}): {msg}",
                max / min.max(f64::MIN_POSITIVE)
            ))
        }
        other => other,
    })?;
    Ok(MahalanobisModel { means, precision, dim })
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
fn invert_spd(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    // Lower-triangular factor L with A = L L^T.
    let mut l = vec![0.0f64; dim * dim];
    for r in 0..dim {
        for c in 0..=r {
            let mut sum = a[r * dim + c];
            for k in 0..c {
                sum -= l[r * dim + k] * l[c * dim + k];
            }
            if r == c {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numeric(format!(
                        "Cholesky pivot {sum:.3e} at row {r} is not positive"
                    )));
                }
                l[r * dim + r] = sum.sqrt();
            } else {
                l[r * dim + c] = sum / l[c * dim + c];
            }
        }
    }
    // Solve L L^T X = I column by column.
    let mut inv = vec![0.0f64; dim * dim];
    let mut y = vec![0.0f64; dim];
    for col in 0..dim {
        for r in 0..dim {
            let mut sum = if r == col { 1.0 } else { 0.0 };
            for k in 0..r {
                sum -= l[r * dim + k] * y[k];
            }
            y[r] = sum / l[r * dim + r];
        }
        for r in (0..dim).rev() {
            let mut sum = y[r];
            for k in r + 1..dim {
                sum -= l[k * dim + r] * inv[k * dim + col];
            }
            inv[r * dim + col] = sum / l[r * dim + r];
        }
    }
    Ok(inv)
}

impl MahalanobisModel {
    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.means.keys().copied()
    }

    pub fn class_mean(&self, class: u32) -> Option<&[f64]> {
        self.means.get(&class).map(Vec::as_slice)
    }

    /// Mahalanobis distance from `x` to the centroid of `class`.
    pub fn distance(&self, x: &[f32], class: u32) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: x.len() });
        }
        let mean = self.means.get(&class).ok_or_else(|| {
            Error::Lookup(format!("predicted class {class} was not seen during fitting"))
        })?;
        let diff: Vec<f64> = x.iter().zip(mean).map(|(v, m)| *v as f64 - m).collect();
        let mut quad = 0.0f64;
        for r in 0..self.dim {
            let mut row_acc = 0.0f64;
            for c in 0..self.dim {
                row_acc += self.precision[r * self.dim + c] * diff[c];
            }
            quad += diff[r] * row_acc;
        }
        Ok(quad.max(0.0).sqrt())
    }
}

/// Scores every point by its distance to the *predicted* class centroid.
pub fn mahalanobis_score(model: &MahalanobisModel, set_query: &ReprSet) -> Result<Vec<f64>> {
    (0..set_query.count())
        .into_par_iter()
        .map(|i| model.distance(set_query.vector(i), set_query.pred_labels()[i]))
        .collect()
}

// ---------------------------------------------------------------------
// Neighborhood statistics as direct baselines
// ---------------------------------------------------------------------

/// Which neighborhood statistic to use as the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdeVariant {
    /// Mean neighbor distance, as-is.
    MeanDistance,
    /// Mean same-class neighbor distance; points with no same-class
    /// neighbor get the maximum observed value plus an ulp-scale epsilon
    /// (no same-class neighbor is maximal evidence of error).
    SameClassMeanDistance,
    /// Negated agreement count, so that higher still means more
    /// uncertain.
    Agreement,
}

/// Default neighborhood size for the statistic baselines.
pub const KDE_BASELINE_K: usize = 200;

/// Scores `set_query` against `index` with one of the three statistics.
/// Queries are not self-excluded; the query set is expected to be
/// disjoint from the indexed set.
pub fn kde_baseline_scores(
    index: &KnnIndex<'_>,
    set_query: &ReprSet,
    variant: KdeVariant,
    k: usize,
) -> Result<Vec<f64>> {
    let queries = index.query_set(set_query, k, false)?;
    let raw: Vec<Option<f64>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, nq)| {
            let pred = set_query.pred_labels()[i];
            match variant {
                KdeVariant::MeanDistance => Some(stats::kde_unconditional(nq)),
                KdeVariant::SameClassMeanDistance => stats::kde_conditional(nq, pred),
                KdeVariant::Agreement => Some(-(stats::agreement(nq, pred) as f64)),
            }
        })
        .collect();
    Ok(fill_absent_with_max(raw))
}

/// Replaces absent values with `max(present) + eps`, an epsilon above the
/// most-uncertain observed score. All-absent input degenerates to zeros.
fn fill_absent_with_max(raw: Vec<Option<f64>>) -> Vec<f64> {
    let max = raw.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fill = if max.is_finite() {
        max + f64::EPSILON * max.abs().max(1.0)
    } else {
        0.0
    };
    raw.into_iter().map(|v| v.unwrap_or(fill)).collect()
}
