use std::fs;
use std::path::Path;

use diffeo_core::eval::{evaluate, EvalOptions};
use diffeo_core::field::{DeformationField, Grid2, VectorField};
use diffeo_core::group::{exp_ode_oracle, exp_scaling_squaring, iss_log, ExpConfig, IssConfig};
use diffeo_core::io::{
    load_checkpoint, load_checkpoint_for, read_deformation, read_field, save_checkpoint, write_field,
    write_synthetic_dataset, Dataset, Dtype, LoadedPair,
};
use diffeo_core::leda::{train, LatentVector, Leda, LedaConfig, PairSample};
use diffeo_core::render::{render_grid_ppm, render_logdet_ppm};
use diffeo_core::stats::{latent_walk, ols_fit, pca_fit, top_regression_directions, RegressionModel};
use diffeo_core::synth::SynthConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::{Command, Failure, LogMethod, PcaSource, WalkMode, EXIT_NON_CONVERGENCE};

type CmdResult = Result<(), Failure>;

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::Gen {
            seed,
            pairs,
            size,
            max_disp,
            sigma,
            out,
        } => gen(seed, pairs, size, max_disp, sigma, &out),
        Command::Log {
            method,
            field,
            model,
            n_roots,
            out,
            strict,
        } => log(method, &field, model.as_deref(), n_roots, &out, strict),
        Command::Exp { velocity, oracle, out } => exp(&velocity, oracle, &out),
        Command::Train {
            data,
            latent,
            stages,
            epochs,
            seed,
            batch_size,
            lr,
            holdout,
            out,
        } => {
            let cfg = LedaConfig {
                latent_dim: latent,
                n_stages: stages,
                epochs,
                seed,
                batch_size,
                lr,
                ..LedaConfig::default()
            };
            train_cmd(&data, cfg, holdout, &out)
        }
        Command::Eval {
            data,
            model,
            report,
            holdout,
            timing,
        } => eval(&data, &model, &report, holdout, timing),
        Command::Pca {
            source,
            data,
            model,
            k,
            out,
            render,
        } => pca(source, &data, model.as_deref(), k, &out, render.as_deref()),
        Command::Regress {
            data,
            model,
            covariate,
            test_fraction,
            seed,
            out,
        } => regress(&data, &model, &covariate, test_fraction, seed, &out),
        Command::Walk {
            model,
            mode,
            steps,
            scale,
            render,
            regression,
            data,
            seed,
            line_every,
        } => walk(&WalkArgs {
            model: &model,
            mode,
            steps,
            scale,
            render: &render,
            regression: regression.as_deref(),
            data: data.as_deref(),
            seed,
            line_every,
        }),
        Command::Render {
            field,
            out_grid,
            out_logdet,
            line_every,
        } => {
            let f = read_deformation(&field).map_err(Failure::data)?;
            render_grid_ppm(&out_grid, &f, line_every).map_err(Failure::data)?;
            render_logdet_ppm(&out_logdet, &f).map_err(Failure::data)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))
}

fn open_pairs(dir: &Path) -> Result<(Grid2, Vec<LoadedPair>), Failure> {
    let data = Dataset::open(dir).map_err(Failure::data)?;
    Ok((data.grid(), data.load_all().map_err(Failure::data)?))
}

fn encode_forward(model: &Leda, pairs: &[LoadedPair]) -> Result<Vec<LatentVector>, Failure> {
    pairs
        .iter()
        .map(|p| model.encode(&p.pair.fwd).map_err(Failure::data))
        .collect()
}

fn gen(seed: u64, pairs: usize, grid: Grid2, max_disp: f64, sigma: f64, out: &Path) -> CmdResult {
    let cfg = SynthConfig {
        grid,
        n_pairs: pairs,
        max_disp,
        smooth_sigma: sigma,
        seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    make_dir(out)?;
    let manifest = write_synthetic_dataset(out, &cfg).map_err(Failure::data)?;
    println!("wrote {} pairs ({grid}) to {}", manifest.records.len(), out.display());
    Ok(())
}

fn log(method: LogMethod, field: &Path, model: Option<&Path>, n_roots: Option<u32>, out: &Path, strict: bool) -> CmdResult {
    let phi = read_deformation(field).map_err(Failure::data)?;
    let log = match method {
        LogMethod::Iss => {
            let mut cfg = IssConfig::default();
            if let Some(n) = n_roots {
                cfg.n_roots = n;
            }
            cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let outcome = iss_log(&phi, &cfg).map_err(Failure::data)?;
            if let Some(err) = outcome.non_convergence(&cfg) {
                if strict {
                    return Err(Failure {
                        code: EXIT_NON_CONVERGENCE,
                        message: err.to_string(),
                    });
                }
                eprintln!("warning: {err}");
            }
            outcome.log
        }
        LogMethod::Leda => {
            let path = model.ok_or_else(|| Failure::usage("--model is required for --method leda"))?;
            let leda = load_checkpoint_for(path, phi.grid()).map_err(Failure::data)?;
            if let Some(n) = n_roots.filter(|&n| n != leda.config().n_stages) {
                return Err(Failure::usage(format!(
                    "--n-roots {n} does not match the model's {} stages",
                    leda.config().n_stages
                )));
            }
            leda.infer_log(&phi).map_err(Failure::data)?
        }
    };
    write_field(out, &log, Dtype::F64).map_err(Failure::data)
}

fn exp(velocity: &Path, oracle: bool, out: &Path) -> CmdResult {
    let v = read_field(velocity).map_err(Failure::data)?;
    let cfg = ExpConfig::default();
    let phi = if oracle {
        exp_ode_oracle(&v, 1.0, &cfg)
    } else {
        exp_scaling_squaring(&v, &cfg)
    };
    write_field(out, phi.displacement(), Dtype::F64).map_err(Failure::data)
}

fn train_cmd(data: &Path, cfg: LedaConfig, holdout: usize, out: &Path) -> CmdResult {
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let (grid, pairs) = open_pairs(data)?;
    let n_train = pairs.len().saturating_sub(holdout);
    let samples: Vec<PairSample> = pairs.into_iter().take(n_train).map(|p| p.pair).collect();
    let outcome = train(&samples, grid, &cfg, |stats| println!("{stats}")).map_err(Failure::data)?;
    save_checkpoint(out, &outcome.model).map_err(Failure::data)
}

fn eval(data: &Path, model: &Path, report: &Path, holdout: usize, timing: bool) -> CmdResult {
    let (grid, pairs) = open_pairs(data)?;
    if holdout > pairs.len() {
        return Err(Failure::data(format!("--holdout {holdout} exceeds {} pairs", pairs.len())));
    }
    let leda = load_checkpoint_for(model, grid).map_err(Failure::data)?;
    let start = if holdout == 0 { 0 } else { pairs.len() - holdout };
    let opts = EvalOptions {
        timing,
        ..EvalOptions::default()
    };
    let rep = evaluate(&leda, &pairs[start..], &opts).map_err(Failure::data)?;
    write_json(report, &rep)
}

const MODE_STEPS: [&str; 5] = ["m2", "m1", "0", "p1", "p2"];

fn render_pair(dir: &Path, stem: &str, f: &DeformationField, line_every: usize) -> CmdResult {
    render_grid_ppm(&dir.join(format!("{stem}_grid.ppm")), f, line_every).map_err(Failure::data)?;
    render_logdet_ppm(&dir.join(format!("{stem}_logdet.ppm")), f).map_err(Failure::data)
}

fn pca(source: PcaSource, data: &Path, model: Option<&Path>, k: usize, out: &Path, render: Option<&Path>) -> CmdResult {
    let (grid, pairs) = open_pairs(data)?;
    let leda = model
        .map(|m| load_checkpoint_for(m, grid).map_err(Failure::data))
        .transpose()?;
    let samples: Vec<Vec<f64>> = match (source, &leda) {
        (PcaSource::Latents, Some(m)) => encode_forward(m, &pairs)?.into_iter().map(|z| z.0).collect(),
        (PcaSource::Latents, None) => return Err(Failure::usage("--model is required for --source latents")),
        (PcaSource::Logmaps, Some(m)) => pairs
            .iter()
            .map(|p| m.infer_log(&p.pair.fwd).map(VectorField::into_data).map_err(Failure::data))
            .collect::<Result<_, _>>()?,
        (PcaSource::Logmaps, None) => {
            let cfg = IssConfig::default();
            let mut stalled = 0;
            let mut logs = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let outcome = iss_log(&p.pair.fwd, &cfg).map_err(Failure::data)?;
                stalled += usize::from(outcome.non_convergence(&cfg).is_some());
                logs.push(outcome.log.into_data());
            }
            if stalled > 0 {
                eprintln!("warning: {stalled} ISS logarithms did not converge");
            }
            logs
        }
    };
    let pca = pca_fit(&samples, k).map_err(Failure::data)?;
    write_json(out, &pca)?;
    for (j, frac) in pca.explained_fraction.iter().enumerate() {
        println!("component={} eigenvalue={:.6e} explained={frac:.4}", j + 1, pca.eigenvalues[j]);
    }

    let Some(dir) = render else { return Ok(()) };
    make_dir(dir)?;
    for j in 0..pca.k().min(3) {
        let coords = pca.mode_coords(j).map_err(Failure::data)?;
        for (c, label) in coords.iter().zip(MODE_STEPS) {
            let x = pca.reconstruct(c).map_err(Failure::data)?;
            let field = match (source, &leda) {
                (PcaSource::Latents, Some(m)) => m.decode_root(&LatentVector(x), 0).map_err(Failure::data)?,
                _ => {
                    let v = VectorField::from_vec(grid, x).map_err(Failure::data)?;
                    exp_scaling_squaring(&v, &ExpConfig::default())
                }
            };
            render_pair(dir, &format!("mode{}_{label}", j + 1), &field, 4)?;
        }
    }
    Ok(())
}

fn regress(data: &Path, model: &Path, covariate: &str, test_fraction: f64, seed: u64, out: &Path) -> CmdResult {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Failure::usage("--test-fraction must lie in [0, 1)"));
    }
    let (grid, pairs) = open_pairs(data)?;
    let leda = load_checkpoint_for(model, grid).map_err(Failure::data)?;
    let targets: Vec<f64> = pairs
        .iter()
        .map(|p| {
            p.record.covariates.get(covariate).copied().ok_or_else(|| {
                Failure::data(format!("pair {} has no covariate {covariate:?}", p.record.pair_id))
            })
        })
        .collect::<Result<_, _>>()?;
    let features: Vec<Vec<f64>> = encode_forward(&leda, &pairs)?.into_iter().map(|z| z.0).collect();
    let fit = ols_fit(&features, &targets, test_fraction, seed).map_err(Failure::data)?;
    println!("train_r={:.4} test_r={:.4}", fit.train_r, fit.test_r);
    write_json(out, &fit)
}

struct WalkArgs<'a> {
    model: &'a Path,
    mode: WalkMode,
    steps: usize,
    scale: f64,
    render: &'a Path,
    regression: Option<&'a Path>,
    data: Option<&'a Path>,
    seed: u64,
    line_every: usize,
}

fn walk(args: &WalkArgs) -> CmdResult {
    let leda = load_checkpoint(args.model).map_err(Failure::data)?;
    let dim = leda.config().latent_dim;
    let direction = match args.mode {
        WalkMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let d = LatentVector((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect());
            d.scaled(1.0 / d.norm().max(f64::MIN_POSITIVE))
        }
        WalkMode::RegressionTop => {
            let path = args
                .regression
                .ok_or_else(|| Failure::usage("--regression is required for --mode regression-top"))?;
            let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
            let fit: RegressionModel = serde_json::from_str(&text).map_err(Failure::data)?;
            if fit.weights.len() != dim {
                return Err(Failure::data(format!(
                    "regression has {} weights but the model has {dim} latents",
                    fit.weights.len()
                )));
            }
            top_regression_directions(&fit, 1).map_err(Failure::data)?.remove(0)
        }
    };
    let start = match args.data {
        Some(dir) => {
            let (grid, pairs) = open_pairs(dir)?;
            if grid != leda.grid() {
                return Err(Failure::data(format!("data grid {grid} but model grid {}", leda.grid())));
            }
            let latents = encode_forward(&leda, &pairs)?;
            let n = latents.len().max(1) as f64;
            latents
                .iter()
                .fold(LatentVector::zeros(dim), |acc, z| acc.axpy(1.0 / n, z))
        }
        None => LatentVector::zeros(dim),
    };
    let fields = latent_walk(&leda, &start, &direction, args.steps, args.scale).map_err(Failure::data)?;
    make_dir(args.render)?;
    for (i, f) in fields.iter().enumerate() {
        render_pair(args.render, &format!("walk_{i:03}"), f, args.line_every)?;
        let step = match i {
            0 => 0.0,
            _ => f.displacement().rms_diff(fields[i - 1].displacement()).map_err(Failure::data)?,
        };
        println!("step={i} rms={:.6e} step_change={step:.6e}", f.displacement().rms());
    }
    Ok(())
}
