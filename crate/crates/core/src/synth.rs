//! Synthetic deformation pairs with known logarithms.
//!
//! Velocities are random combinations of a few fixed basis fields, each a
//! Gaussian-smoothed white-noise field. The forward deformation is the flow
//! of `v` for unit time and the backward one the flow of `-v`, both from the
//! RK4 reference integrator, so `v` is the ground-truth log of `fwd`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DeformationField, Grid2, VectorField};
use crate::group::{exp_ode_oracle, ExpConfig};

/// Name of the generated covariate.
pub const SCORE: &str = "score";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: Grid2,
    pub n_pairs: usize,
    pub smooth_sigma: f64,
    pub max_disp: f64,
    pub n_factors: usize,
    pub covariate_weights: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: Grid2::square(32),
            n_pairs: 500,
            smooth_sigma: 3.0,
            max_disp: 3.0,
            n_factors: 4,
            covariate_weights: vec![1.0, -0.5, 0.5, 0.25],
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let side = self.grid.height().min(self.grid.width()) as f64;
        let ok = self.max_disp >= 0.0
            && self.max_disp < side / 4.0
            && self.smooth_sigma >= 1.0
            && self.n_factors >= 1
            && self.covariate_weights.len() == self.n_factors
            && self.covariate_weights.iter().all(|w| w.is_finite())
            && self.noise_sigma >= 0.0;
        if !ok {
            return Err(SynthError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One generated pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub fwd: DeformationField,
    pub bwd: DeformationField,
    pub velocity: VectorField,
    /// Coefficients of `velocity` in the basis after amplitude rescaling.
    pub coeffs: Vec<f64>,
    pub covariates: BTreeMap<String, f64>,
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn convolve_axis(src: &[f64], h: usize, w: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let off = t as i64 - radius;
                let (rr, cc) = if along_rows {
                    ((r as i64 + off).clamp(0, h as i64 - 1) as usize, c)
                } else {
                    (r, (c as i64 + off).clamp(0, w as i64 - 1) as usize)
                };
                acc += k * src[rr * w + cc];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Separable Gaussian blur of each component with clamped borders.
pub fn gaussian_smooth(field: &VectorField, sigma: f64) -> VectorField {
    let grid = field.grid();
    let (h, w) = (grid.height(), grid.width());
    let kernel = gaussian_kernel(sigma);
    let planar = field.to_channels_first();
    let mut smoothed = Vec::with_capacity(planar.len());
    for plane in planar.chunks(h * w) {
        let rows = convolve_axis(plane, h, w, &kernel, true);
        smoothed.extend(convolve_axis(&rows, h, w, &kernel, false));
    }
    VectorField::from_channels_first(grid, &smoothed).expect("finite blur")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed basis fields, each scaled to unit maximum norm.
pub fn basis_fields(cfg: &SynthConfig) -> Vec<VectorField> {
    let mut rng = rng_for(cfg.seed, 0);
    (0..cfg.n_factors)
        .map(|_| {
            let noise = VectorField::from_fn(cfg.grid, |_, _| {
                [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]
            });
            let smooth = gaussian_smooth(&noise, cfg.smooth_sigma);
            let m = smooth.max_norm();
            smooth.scale(1.0 / m)
        })
        .collect()
}

/// Velocity `Σ a_j b_j` for the given coefficients.
pub fn combine(basis: &[VectorField], coeffs: &[f64]) -> VectorField {
    let mut v = VectorField::zeros(basis[0].grid());
    for (b, a) in basis.iter().zip(coeffs) {
        v = v.add(&b.scale(*a)).expect("same grid");
    }
    v
}

/// Generates pair `index` from a precomputed basis.
pub fn gen_pair_with_basis(cfg: &SynthConfig, basis: &[VectorField], index: usize) -> SynthPair {
    let mut rng = rng_for(cfg.seed, index as u64 + 1);
    let raw: Vec<f64> = (0..cfg.n_factors).map(|_| StandardNormal.sample(&mut rng)).collect();
    let unscaled = combine(basis, &raw);
    let peak = unscaled.max_norm();
    let s = if peak > 0.0 { cfg.max_disp / peak } else { 0.0 };
    let coeffs: Vec<f64> = raw.iter().map(|a| a * s).collect();
    let velocity = unscaled.scale(s);
    let noise: f64 = StandardNormal.sample(&mut rng);
    let score = cfg
        .covariate_weights
        .iter()
        .zip(&coeffs)
        .map(|(w, a)| w * a)
        .sum::<f64>()
        + cfg.noise_sigma * noise;
    let exp_cfg = ExpConfig::default();
    SynthPair {
        fwd: exp_ode_oracle(&velocity, 1.0, &exp_cfg),
        bwd: exp_ode_oracle(&velocity, -1.0, &exp_cfg),
        velocity,
        coeffs,
        covariates: BTreeMap::from([(SCORE.to_string(), score)]),
    }
}

/// Generates pair `index` of the dataset described by `cfg`.
pub fn gen_synthetic_pair(cfg: &SynthConfig, index: usize) -> Result<SynthPair, SynthError> {
    cfg.validate()?;
    Ok(gen_pair_with_basis(cfg, &basis_fields(cfg), index))
}
