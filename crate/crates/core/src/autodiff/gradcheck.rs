//! Central finite-difference gradient checks.
//!
//! The checker perturbs a sample of coordinates of each input by `±h`,
//! re-evaluates the scalar function, and compares against the analytic
//! gradient. A perturbation whose forward passes take a different
//! piecewise-linear branch (interpolation cell, clamp, rectifier sign) is
//! skipped: the function is not differentiable across it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub step: f64,
    pub samples_per_tensor: usize,
    pub rel_tol: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 32,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `analytic[t]` against central differences of `eval`, which maps
/// the inputs to `(value, branch_signature)`.
pub fn check(
    inputs: &[Tensor],
    analytic: &[Tensor],
    cfg: &CheckConfig,
    mut eval: impl FnMut(&[Tensor]) -> (f64, u64),
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CheckReport::default();
    let (_, base_sig) = eval(inputs);
    let mut work = inputs.to_vec();
    for t in 0..inputs.len() {
        let n = inputs[t].len();
        let picks: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_tensor).into_vec()
        };
        for idx in picks {
            let orig = inputs[t].data()[idx];
            work[t].data_mut()[idx] = orig + cfg.step;
            let (fp, sp) = eval(&work);
            work[t].data_mut()[idx] = orig - cfg.step;
            let (fm, sm) = eval(&work);
            work[t].data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[t].data()[idx];
            let e = rel_err(a, numeric, cfg.abs_floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(e);
            if e >= cfg.rel_tol {
                report.failures.push(Mismatch {
                    tensor: t,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    report
}
