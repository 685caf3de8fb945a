//! Exponential and logarithm maps between stationary velocity fields and
//! deformations.
//!
//! The exponential is computed by scaling and squaring, with an independent
//! fixed-step RK4 flow integrator as reference. The logarithm baseline is
//! inverse scaling and squaring: take `N` successive square roots by
//! gradient descent on the composition residual, then rescale the last
//! near-identity root by `2^N`.

use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::field::{self, DeformationField, FieldError, Grid2, VectorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("square root {stage} did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        stage: usize,
        residual: f64,
        iterations: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpConfig {
    pub n_squarings: u32,
    pub oracle_steps: usize,
}

impl Default for ExpConfig {
    fn default() -> Self {
        Self {
            n_squarings: 6,
            oracle_steps: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IssConfig {
    pub n_roots: u32,
    pub sqrt_max_iters: usize,
    /// Stopping tolerance on the RMS composition residual, grid units.
    pub sqrt_tol: f64,
    pub step_size: f64,
}

impl Default for IssConfig {
    fn default() -> Self {
        Self {
            n_roots: 6,
            sqrt_max_iters: 500,
            sqrt_tol: 1e-4,
            step_size: 1e-1,
        }
    }
}

impl IssConfig {
    // negated comparisons so NaN settings are rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GroupError> {
        if self.n_roots == 0
            || self.sqrt_max_iters == 0
            || !(self.sqrt_tol > 0.0 && self.sqrt_tol < 1.0)
            || !(self.step_size > 0.0)
        {
            return Err(GroupError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `exp(v) ≈ C_{2^S}(id + v / 2^S)`.
pub fn exp_scaling_squaring(velocity: &VectorField, cfg: &ExpConfig) -> DeformationField {
    let small = velocity.scale(0.5f64.powi(cfg.n_squarings as i32));
    field::self_compose(&DeformationField::from_displacement(small), cfg.n_squarings)
}

/// Flow of the stationary field `v` for time `t`, integrated with
/// `cfg.oracle_steps` fixed RK4 steps; `v` is sampled bilinearly with
/// border clamping.
pub fn exp_ode_oracle(velocity: &VectorField, t: f64, cfg: &ExpConfig) -> DeformationField {
    let grid = velocity.grid();
    let steps = cfg.oracle_steps.max(1);
    let dt = t / steps as f64;
    let disp = VectorField::from_fn(grid, |r, c| {
        let x0 = [r as f64, c as f64];
        let mut p = x0;
        let v = |q: [f64; 2]| velocity.sample(q[0], q[1]);
        for _ in 0..steps {
            let k1 = v(p);
            let k2 = v([p[0] + 0.5 * dt * k1[0], p[1] + 0.5 * dt * k1[1]]);
            let k3 = v([p[0] + 0.5 * dt * k2[0], p[1] + 0.5 * dt * k2[1]]);
            let k4 = v([p[0] + dt * k3[0], p[1] + dt * k3[1]]);
            for i in 0..2 {
                p[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        [p[0] - x0[0], p[1] - x0[1]]
    });
    DeformationField::from_displacement(disp)
}

/// Result of one square-root solve.
#[derive(Debug, Clone)]
pub struct SqrtOutcome {
    pub root: DeformationField,
    /// RMS of `root ∘ root - phi`, grid units.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SqrtOutcome {
    /// `NonConvergence` when the final residual is above ten times the
    /// tolerance.
    pub fn check(&self, cfg: &IssConfig, stage: usize) -> Result<(), GroupError> {
        if self.residual > 10.0 * cfg.sqrt_tol {
            return Err(GroupError::NonConvergence {
                stage,
                residual: self.residual,
                iterations: self.iterations,
            });
        }
        Ok(())
    }
}

struct Residual {
    rms: f64,
    grad: Vec<f64>,
}

/// Mean squared composition residual and the gradient of
/// `½ Σ_pixels ‖ψ∘ψ − φ‖²` with respect to ψ's channel-first displacement.
fn sqrt_residual(grid: Grid2, psi: &[f64], target: &Tensor) -> Residual {
    let shape = vec![1, 2, grid.height(), grid.width()];
    let mut tape = Tape::new();
    let psi = tape.param(Tensor::new(shape, psi.to_vec()).expect("shape"));
    let target = tape.constant(target.clone());
    let squared = tape.warp(psi, psi).expect("shape");
    let diff = tape.sub(squared, target).expect("shape");
    let half_sum = tape.sum_squares(diff, 0.5);
    let value = tape.value(half_sum).item();
    let mut grads = tape.backward(half_sum).expect("scalar loss");
    let grad = grads.take(psi).expect("param gradient").into_data();
    Residual {
        rms: (2.0 * value / grid.len() as f64).sqrt(),
        grad,
    }
}

/// Square root of `phi` by gradient descent on the composition residual,
/// starting from `id + u/2`. Rejected steps halve the step size; the best
/// iterate is returned.
pub fn sqrt_field(phi: &DeformationField, cfg: &IssConfig) -> SqrtOutcome {
    let grid = phi.grid();
    let target = Tensor::new(
        vec![1, 2, grid.height(), grid.width()],
        phi.displacement().to_channels_first(),
    )
    .expect("shape");
    let mut psi: Vec<f64> = target.data().iter().map(|v| 0.5 * v).collect();
    let mut current = sqrt_residual(grid, &psi, &target);
    let mut step = cfg.step_size;
    let mut iterations = 0;
    while iterations < cfg.sqrt_max_iters && current.rms > cfg.sqrt_tol && step > 1e-12 {
        iterations += 1;
        let trial: Vec<f64> = psi.iter().zip(&current.grad).map(|(p, g)| p - step * g).collect();
        let next = sqrt_residual(grid, &trial, &target);
        if next.rms < current.rms {
            psi = trial;
            current = next;
        } else {
            step *= 0.5;
        }
    }
    let root = DeformationField::from_displacement(
        VectorField::from_channels_first(grid, &psi).expect("finite iterate"),
    );
    SqrtOutcome {
        converged: current.rms <= cfg.sqrt_tol,
        residual: current.rms,
        iterations,
        root,
    }
}

/// Successive roots and the resulting logarithm estimate.
#[derive(Debug, Clone)]
pub struct IssOutcome {
    /// `roots[k]` is the `2^(k+1)`-th root.
    pub roots: Vec<SqrtOutcome>,
    pub log: VectorField,
}

impl IssOutcome {
    pub fn deepest_root(&self) -> &DeformationField {
        &self.roots.last().expect("at least one root").root
    }

    /// First stage whose residual exceeds the non-convergence threshold.
    pub fn non_convergence(&self, cfg: &IssConfig) -> Option<GroupError> {
        self.roots
            .iter()
            .enumerate()
            .find_map(|(k, r)| r.check(cfg, k + 1).err())
    }
}

/// Inverse scaling and squaring: `log(phi) ≈ 2^N (phi^(1/2^N) − id)`.
///
/// Always returns the estimate; inspect [`IssOutcome::non_convergence`] for
/// stages that stalled.
pub fn iss_log(phi: &DeformationField, cfg: &IssConfig) -> Result<IssOutcome, GroupError> {
    cfg.validate()?;
    let mut roots = Vec::with_capacity(cfg.n_roots as usize);
    let mut current = phi.clone();
    for _ in 0..cfg.n_roots {
        let out = sqrt_field(&current, cfg);
        current = out.root.clone();
        roots.push(out);
    }
    let log = current.displacement().scale(2f64.powi(cfg.n_roots as i32));
    Ok(IssOutcome { roots, log })
}

/// Residuals of the negated-root check, grid units (RMS).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegationReport {
    /// `C_{2^N}(id − u_root_fwd)` against `bwd`.
    pub fwd_to_bwd: f64,
    /// `C_{2^N}(id − u_root_bwd)` against `fwd`.
    pub bwd_to_fwd: f64,
}

/// Negates each deep root, composes it `2^N` times and compares with the
/// opposite field of the pair.
pub fn validate_log_negation(
    fwd: &DeformationField,
    bwd: &DeformationField,
    root_fwd: &DeformationField,
    root_bwd: &DeformationField,
    cfg: &IssConfig,
) -> Result<NegationReport, GroupError> {
    let grid = fwd.grid();
    for g in [bwd.grid(), root_fwd.grid(), root_bwd.grid()] {
        grid.ensure_same(&g)?;
    }
    let rebuild = |root: &DeformationField| {
        let neg = DeformationField::from_displacement(field::negate(root.displacement()));
        field::self_compose(&neg, cfg.n_roots)
    };
    Ok(NegationReport {
        fwd_to_bwd: rebuild(root_fwd).displacement().rms_diff(bwd.displacement())?,
        bwd_to_fwd: rebuild(root_bwd).displacement().rms_diff(fwd.displacement())?,
    })
}
