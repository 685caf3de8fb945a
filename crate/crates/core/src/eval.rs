//! Held-out evaluation of a trained autoencoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{inverse_consistency_residual, self_compose, FieldError};
use crate::group::{exp_ode_oracle, iss_log, ExpConfig, GroupError, IssConfig};
use crate::io::LoadedPair;
use crate::leda::{Leda, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub fields: usize,
    pub iss_seconds_per_field: f64,
    pub leda_seconds_per_field: f64,
    /// ISS time over amortized inference time.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    /// Mean over pairs and directions of `rms(root_0 − φ) / rms(φ)`.
    pub reconstruction_rel_rms: f64,
    /// Mean over pairs and directions of `rms(C(root_n) − root_0) / rms(root_0)`,
    /// averaged over stages `n ≥ 1`.
    pub stage_consistency_rel_rms: f64,
    /// Mean inverse-consistency residual of paired roots (grid units),
    /// averaged over stages.
    pub root_inverse_residual: f64,
    pub latent_cosine_mean: f64,
    /// Decodes of `−z_AB` against the true inverse roots, relative RMS,
    /// averaged over stages (stage 0 only without ground-truth velocities).
    pub negated_latent_rel_rms: f64,
    /// Median `‖infer_log(φ) − v‖ / ‖v‖`, when ground truth is available.
    pub log_rel_l2_median: Option<f64>,
    /// Mean cosine between flattened `infer_log(φ_AB)` and `infer_log(φ_BA)`.
    pub log_negation_cosine: f64,
    pub degenerate_latents: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub timing: bool,
    pub iss: IssConfig,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Relative RMS with a floor so identity targets do not divide by zero.
fn rel_rms(diff_rms: f64, reference_rms: f64) -> f64 {
    diff_rms / reference_rms.max(1e-12)
}

pub fn evaluate(model: &Leda, pairs: &[LoadedPair], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_stages = model.config().n_stages;
    let exp_cfg = ExpConfig::default();
    let (mut recon, mut stage_gap, mut inv, mut cos, mut neg, mut log_err, mut log_cos) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut degenerate = 0;
    for lp in pairs {
        let (fwd, bwd) = (&lp.pair.fwd, &lp.pair.bwd);
        let z = model.encode_batch(&[fwd, bwd])?;
        let (z_ab, z_ba) = (&z[0], &z[1]);
        let roots_ab = model.decode_all_roots(z_ab)?;
        let roots_ba = model.decode_all_roots(z_ba)?;
        for (roots, target) in [(&roots_ab, fwd), (&roots_ba, bwd)] {
            let d0 = roots[0].displacement();
            recon.push(rel_rms(d0.rms_diff(target.displacement())?, target.displacement().rms()));
            let gaps: Vec<f64> = (1..=n_stages as usize)
                .map(|n| {
                    let c = self_compose(&roots[n], n as u32);
                    Ok(rel_rms(c.displacement().rms_diff(d0)?, d0.rms()))
                })
                .collect::<Result<_, FieldError>>()?;
            stage_gap.push(mean(&gaps));
        }
        let residuals: Vec<f64> = roots_ab
            .iter()
            .zip(&roots_ba)
            .map(|(a, b)| inverse_consistency_residual(a, b))
            .collect::<Result<_, _>>()?;
        inv.push(mean(&residuals));
        match z_ab.cosine(z_ba) {
            Some(c) => cos.push(c),
            None => {
                degenerate += 1;
                cos.push(0.0);
            }
        }

        let negated = model.decode_all_roots(&z_ab.neg())?;
        let errs: Vec<f64> = match &lp.velocity {
            Some(v) => negated
                .iter()
                .enumerate()
                .map(|(n, r)| {
                    let truth = exp_ode_oracle(v, -0.5f64.powi(n as i32), &exp_cfg);
                    Ok(rel_rms(
                        r.displacement().rms_diff(truth.displacement())?,
                        truth.displacement().rms(),
                    ))
                })
                .collect::<Result<_, FieldError>>()?,
            None => vec![rel_rms(
                negated[0].displacement().rms_diff(bwd.displacement())?,
                bwd.displacement().rms(),
            )],
        };
        neg.push(mean(&errs));

        let scale = 2f64.powi(n_stages as i32);
        let log_ab = roots_ab[n_stages as usize].displacement().scale(scale);
        let log_ba = roots_ba[n_stages as usize].displacement().scale(scale);
        log_cos.push(cosine(log_ab.data(), log_ba.data()));
        if let Some(v) = &lp.velocity {
            log_err.push(log_ab.rel_l2(v)?);
        }
    }

    let timing = if opts.timing { Some(time_logs(model, pairs, &opts.iss)?) } else { None };
    Ok(EvalReport {
        pairs: pairs.len(),
        reconstruction_rel_rms: mean(&recon),
        stage_consistency_rel_rms: mean(&stage_gap),
        root_inverse_residual: mean(&inv),
        latent_cosine_mean: mean(&cos),
        negated_latent_rel_rms: mean(&neg),
        log_rel_l2_median: (!log_err.is_empty()).then(|| median(&log_err)),
        log_negation_cosine: mean(&log_cos),
        degenerate_latents: degenerate,
        timing,
    })
}

/// Wall-clock of `iss_log` against `infer_log` on the forward fields.
pub fn time_logs(model: &Leda, pairs: &[LoadedPair], iss: &IssConfig) -> Result<TimingReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let start = Instant::now();
    for lp in pairs {
        iss_log(&lp.pair.fwd, iss)?;
    }
    let iss_total = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for lp in pairs {
        model.infer_log(&lp.pair.fwd)?;
    }
    let leda_total = start.elapsed().as_secs_f64();
    let n = pairs.len() as f64;
    Ok(TimingReport {
        fields: pairs.len(),
        iss_seconds_per_field: iss_total / n,
        leda_seconds_per_field: leda_total / n,
        speedup: iss_total / leda_total.max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid2;
    use crate::leda::{LedaConfig, PairSample};
    use crate::synth::{gen_synthetic_pair, SynthConfig};
    use std::collections::BTreeMap;

    fn pairs(n: usize) -> Vec<LoadedPair> {
        let cfg = SynthConfig {
            grid: Grid2::square(8),
            max_disp: 1.0,
            smooth_sigma: 1.5,
            ..SynthConfig::default()
        };
        (0..n)
            .map(|i| {
                let p = gen_synthetic_pair(&cfg, i).unwrap();
                LoadedPair {
                    pair: PairSample { fwd: p.fwd, bwd: p.bwd },
                    velocity: Some(p.velocity),
                    record: crate::io::PairRecord {
                        pair_id: format!("p{i}"),
                        path_fwd: String::new(),
                        path_bwd: String::new(),
                        path_gt_velocity: None,
                        covariates: BTreeMap::new(),
                        factor_coeffs: None,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn report_is_deterministic_and_bounded() {
        let model = Leda::new(
            Grid2::square(8),
            LedaConfig {
                latent_dim: 4,
                n_stages: 2,
                ..LedaConfig::default()
            },
        )
        .unwrap();
        let data = pairs(3);
        let a = evaluate(&model, &data, &EvalOptions::default()).unwrap();
        let b = evaluate(&model, &data, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, 3);
        assert!(a.timing.is_none());
        assert!(a.latent_cosine_mean.abs() <= 1.0 + 1e-12);
        assert!(a.log_rel_l2_median.is_some());
        assert!(matches!(evaluate(&model, &[], &EvalOptions::default()), Err(EvalError::Empty)));
        let timed = evaluate(
            &model,
            &data[..1],
            &EvalOptions {
                timing: true,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert!(timed.timing.unwrap().speedup > 0.0);
    }
}
