//! Log-Euclidean statistics: PCA on log maps or latents, means through the
//! exponential map, latent walks and least-squares regression on latents.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DeformationField, FieldError, VectorField};
use crate::group::{exp_scaling_squaring, ExpConfig, GroupError};
use crate::leda::{Leda, LatentVector, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("requested {k} components, at most {max} available")]
    ComponentCount { k: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal principal axes, one per row, by decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Share of the total variance explained by each component.
    pub explained_fraction: Vec<f64>,
}

fn check_dims(samples: &[Vec<f64>]) -> Result<usize, StatsError> {
    let p = samples.first().map(Vec::len).unwrap_or(0);
    for s in samples {
        if s.len() != p {
            return Err(StatsError::DimensionMismatch {
                expected: p,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    Ok(p)
}

/// Mean computed as offsets from the first sample, so duplicated inputs
/// give that sample back exactly.
fn shifted_mean(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let first = &samples[0];
    let mut acc = vec![0.0; first.len()];
    for s in &samples[1..] {
        for (a, (v, f)) in acc.iter_mut().zip(s.iter().zip(first)) {
            *a += v - f;
        }
    }
    first.iter().zip(&acc).map(|(f, a)| f + a / n).collect()
}

/// Squared singular values (descending) and the matching right singular
/// vectors of `x`, from a symmetric eigensolve on the smaller Gram matrix.
/// Axes with zero singular value are completed to an orthonormal set.
fn principal_axes(x: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, p) = x.shape();
    let wide = n < p;
    let gram = if wide { x * x.transpose() } else { x.transpose() * x };
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map(|&i| eig.eigenvalues[i].max(0.0)).unwrap_or(0.0);
    let null_floor = top * 1e-24;

    let mut sq = Vec::with_capacity(order.len());
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for &i in &order {
        let lambda = eig.eigenvalues[i].max(0.0);
        let candidate: Vec<f64> = if !wide {
            eig.eigenvectors.column(i).iter().copied().collect()
        } else if lambda > null_floor && lambda > 0.0 {
            (x.transpose() * eig.eigenvectors.column(i)).iter().copied().collect()
        } else {
            Vec::new()
        };
        sq.push(if lambda > null_floor { lambda } else { 0.0 });
        axes.push(candidate);
    }
    // modified Gram-Schmidt, filling null directions from the standard basis
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(axes.len());
    let mut next_unit = 0;
    for cand in axes {
        let mut v = cand;
        loop {
            if v.is_empty() {
                v = vec![0.0; p];
                v[next_unit % p] = 1.0;
                next_unit += 1;
            }
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                break;
            }
            v = Vec::new();
        }
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().copied().fold(0.0f64, |best, a| if a.abs() > best.abs() { a } else { best });
        if pivot < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        basis.push(v);
    }
    (sq, basis)
}

/// Principal components of the centered data matrix (thin SVD).
pub fn pca_fit(samples: &[Vec<f64>], k: usize) -> Result<PcaModel, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let p = check_dims(samples)?;
    let n = samples.len();
    let max = (n - 1).min(p);
    if k == 0 || k > max {
        return Err(StatsError::ComponentCount { k, max });
    }
    let mean = shifted_mean(samples);
    let x = DMatrix::from_fn(n, p, |i, j| samples[i][j] - mean[j]);
    let (sq, axes) = principal_axes(&x);
    let total: f64 = sq.iter().sum::<f64>() / (n - 1) as f64;
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (i, row) in axes.into_iter().take(k).enumerate() {
        components.push(row);
        eigenvalues.push((sq[i] / (n - 1) as f64).max(0.0));
    }
    let explained_fraction = eigenvalues
        .iter()
        .map(|e| if total > 0.0 { e / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        explained_fraction,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, StatsError> {
        if x.len() != self.dim() {
            return Err(StatsError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(a, (v, m))| a * (v - m)).sum())
            .collect())
    }

    /// `mean + Σ coords_j · component_j`.
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>, StatsError> {
        if coords.len() != self.k() {
            return Err(StatsError::DimensionMismatch {
                expected: self.k(),
                got: coords.len(),
            });
        }
        let mut out = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// Coordinates `{-2, -1, 0, 1, 2} · sqrt(λ_j)` along component `j`.
    pub fn mode_coords(&self, j: usize) -> Result<Vec<Vec<f64>>, StatsError> {
        if j >= self.k() {
            return Err(StatsError::ComponentCount { k: j + 1, max: self.k() });
        }
        let sd = self.eigenvalues[j].sqrt();
        Ok((-2..=2)
            .map(|step| {
                let mut c = vec![0.0; self.k()];
                c[j] = step as f64 * sd;
                c
            })
            .collect())
    }
}

/// `exp(mean_i log(φ_i))` with a caller-supplied logarithm.
pub fn log_euclidean_mean(
    fields: &[DeformationField],
    mut log_fn: impl FnMut(&DeformationField) -> Result<VectorField, StatsError>,
    exp_cfg: &ExpConfig,
) -> Result<DeformationField, StatsError> {
    let first = fields.first().ok_or(StatsError::TooFewSamples { needed: 1, got: 0 })?;
    let grid = first.grid();
    let mut logs = Vec::with_capacity(fields.len());
    for f in fields {
        grid.ensure_same(&f.grid())?;
        logs.push(log_fn(f)?.into_data());
    }
    let mean = VectorField::from_vec(grid, shifted_mean(&logs))?;
    Ok(exp_scaling_squaring(&mean, exp_cfg))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    /// Coefficients on standardized latents.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub train_r: f64,
    pub test_r: f64,
    pub r_metric: String,
    /// Set when a correlation was undefined and reported as 0.
    pub r_undefined: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl RegressionModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(x.iter().zip(self.feature_mean.iter().zip(&self.feature_scale)))
                .map(|(w, (v, (m, s)))| w * (v - m) / s)
                .sum::<f64>()
    }
}

/// Seeded train/test split; the first `ceil(n * test_fraction)` shuffled
/// indices are held out.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).ceil() as usize;
    let test = idx[..n_test.min(n)].to_vec();
    let train = idx[n_test.min(n)..].to_vec();
    (train, test)
}

/// Ordinary least squares of `targets` on standardized `features`, with a
/// tiny ridge for conditioning and Pearson r on both splits.
pub fn ols_fit(
    features: &[Vec<f64>],
    targets: &[f64],
    test_fraction: f64,
    seed: u64,
) -> Result<RegressionModel, StatsError> {
    if features.len() != targets.len() {
        return Err(StatsError::DimensionMismatch {
            expected: features.len(),
            got: targets.len(),
        });
    }
    let l = check_dims(features)?;
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (train, test) = split_indices(features.len(), test_fraction, seed);
    if train.len() < l + 2 {
        return Err(StatsError::TooFewSamples {
            needed: l + 2,
            got: train.len(),
        });
    }
    let nt = train.len() as f64;
    let feature_mean: Vec<f64> = (0..l).map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / nt).collect();
    let feature_scale: Vec<f64> = (0..l)
        .map(|j| {
            let var = train
                .iter()
                .map(|&i| (features[i][j] - feature_mean[j]).powi(2))
                .sum::<f64>()
                / nt;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = DMatrix::from_fn(train.len(), l, |r, j| {
        (features[train[r]][j] - feature_mean[j]) / feature_scale[j]
    });
    let y_mean = train.iter().map(|&i| targets[i]).sum::<f64>() / nt;
    let y = DVector::from_iterator(train.len(), train.iter().map(|&i| targets[i] - y_mean));
    let gram = z.transpose() * &z + DMatrix::identity(l, l) * RIDGE;
    let rhs = z.transpose() * y;
    let weights = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or(StatsError::NonFinite)?;
    let mut model = RegressionModel {
        weights: weights.iter().copied().collect(),
        intercept: y_mean,
        feature_mean,
        feature_scale,
        train_r: 0.0,
        test_r: 0.0,
        r_metric: "pearson".to_string(),
        r_undefined: false,
        n_train: train.len(),
        n_test: test.len(),
    };
    let r_on = |m: &RegressionModel, idx: &[usize]| {
        let pred: Vec<f64> = idx.iter().map(|&i| m.predict(&features[i])).collect();
        let truth: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        pearson(&pred, &truth)
    };
    let (tr, te) = (r_on(&model, &train), r_on(&model, &test));
    model.r_undefined = tr.is_none() || te.is_none();
    model.train_r = tr.unwrap_or(0.0);
    model.test_r = te.unwrap_or(0.0);
    Ok(model)
}

/// Unit latent directions `sign(w_j) e_j` for the `k` largest `|w_j|`;
/// ties go to the lower index.
pub fn top_regression_directions(model: &RegressionModel, k: usize) -> Result<Vec<LatentVector>, StatsError> {
    let l = model.weights.len();
    if k > l {
        return Err(StatsError::ComponentCount { k, max: l });
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        model.weights[b]
            .abs()
            .total_cmp(&model.weights[a].abs())
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|j| {
            let mut v = vec![0.0; l];
            v[j] = if model.weights[j] < 0.0 { -1.0 } else { 1.0 };
            LatentVector(v)
        })
        .collect())
}

/// Stage-0 decodes of `z_start + i · scale · direction`, `i = 0..steps`.
pub fn latent_walk(
    model: &Leda,
    z_start: &LatentVector,
    direction: &LatentVector,
    steps: usize,
    scale: f64,
) -> Result<Vec<DeformationField>, StatsError> {
    if direction.len() != z_start.len() {
        return Err(StatsError::DimensionMismatch {
            expected: z_start.len(),
            got: direction.len(),
        });
    }
    let latents: Vec<LatentVector> = (0..steps)
        .map(|i| z_start.axpy(i as f64 * scale, direction))
        .collect();
    Ok(model.decode_raw(&latents)?)
}
