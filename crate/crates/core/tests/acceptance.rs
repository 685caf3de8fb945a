//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The shared training run (500 pairs, 32×32, L = 32, N = 4, 60 epochs)
//! dominates the wall clock: several minutes on one core.

mod support;

use std::fs;
use std::path::Path;
use std::time::Instant;

use diffeo_core::eval::{evaluate, median, time_logs, EvalOptions, EvalReport};
use diffeo_core::field::{DeformationField, Grid2, VectorField};
use diffeo_core::group::{
    exp_ode_oracle, exp_scaling_squaring, iss_log, validate_log_negation, ExpConfig, IssConfig,
};
use diffeo_core::io::{
    decode_field, encode_checkpoint, encode_field, load_checkpoint, read_field, save_checkpoint, write_field,
    write_manifest, write_synthetic_dataset, Dataset, Dtype, LoadedPair, MANIFEST_FILE,
};
use diffeo_core::leda::{train, EpochStats, Leda, LedaConfig, PairSample};
use diffeo_core::stats::{ols_fit, pca_fit};
use diffeo_core::synth::{basis_fields, gen_pair_with_basis, SynthConfig, SCORE};

const TRAIN_PAIRS: usize = 500;
const HELD_OUT: usize = 50;
const EPOCHS: usize = 60;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Trained {
    data: Vec<LoadedPair>,
    model: Leda,
    history: Vec<EpochStats>,
    train_seconds: f64,
    report: EvalReport,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gram_error(rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            worst = worst.max((d - f64::from(u8::from(i == j))).abs());
        }
    }
    worst
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut reports = support::op_reports();
    reports.push(("full_loss", support::full_loss_report()));
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| *n).collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} cases, {checked} coordinates, max rel err {worst:.2e}, failed {failed:?}, {secs:.1}s",
            reports.len()
        ),
    )
}

fn exp_agreement(data: &[LoadedPair]) -> Outcome {
    let cfg = ExpConfig::default();
    let (mut diff_sq, mut ref_sq, mut per_field) = (0.0, 0.0, Vec::new());
    for lp in &data[..20] {
        let v = lp.velocity.as_ref().expect("synthetic velocity");
        let ss = exp_scaling_squaring(v, &cfg);
        let ode = exp_ode_oracle(v, 1.0, &cfg);
        let d = ss.displacement().rms_diff(ode.displacement()).unwrap();
        let r = ode.displacement().rms();
        diff_sq += d * d;
        ref_sq += r * r;
        per_field.push(d / r);
    }
    let pooled = (diff_sq / ref_sq).sqrt();
    let worst = per_field.iter().copied().fold(0.0, f64::max);
    outcome(
        pooled < 0.01,
        format!(
            "pooled rel RMS {:.3}% (mean {:.3}%, worst field {:.3}%) over 20 fields",
            100.0 * pooled,
            100.0 * mean(&per_field),
            100.0 * worst
        ),
    )
}

fn iss_recovery(data: &[LoadedPair]) -> Outcome {
    let cfg = IssConfig::default();
    let (mut errs, mut secs, mut stalled) = (Vec::new(), Vec::new(), 0);
    for lp in &data[..20] {
        let start = Instant::now();
        let out = iss_log(&lp.pair.fwd, &cfg).unwrap();
        secs.push(start.elapsed().as_secs_f64());
        stalled += usize::from(out.non_convergence(&cfg).is_some());
        errs.push(out.log.rel_l2(lp.velocity.as_ref().unwrap()).unwrap());
    }
    let med = median(&errs);
    let slowest = secs.iter().copied().fold(0.0, f64::max);
    outcome(
        med < 0.05 && slowest < 5.0,
        format!(
            "median rel L2 {:.2}%, worst {:.2}%, slowest field {slowest:.3}s, {stalled} stalled roots",
            100.0 * med,
            100.0 * errs.iter().copied().fold(0.0, f64::max)
        ),
    )
}

fn negation(data: &[LoadedPair]) -> Outcome {
    let cfg = IssConfig::default();
    let mut worst: f64 = 0.0;
    for lp in &data[..20] {
        let (fwd, bwd) = (&lp.pair.fwd, &lp.pair.bwd);
        let rf = iss_log(fwd, &cfg).unwrap();
        let rb = iss_log(bwd, &cfg).unwrap();
        let rep = validate_log_negation(fwd, bwd, rf.deepest_root(), rb.deepest_root(), &cfg).unwrap();
        worst = worst
            .max(rep.fwd_to_bwd / bwd.displacement().rms())
            .max(rep.bwd_to_fwd / fwd.displacement().rms());
    }
    outcome(
        worst <= 0.10,
        format!("worst negated-root residual {:.2}% of inverse RMS over 20 pairs, both directions", 100.0 * worst),
    )
}

fn training(t: &Trained) -> Outcome {
    let r = &t.report;
    let first = t.history.first().unwrap().total;
    let last = t.history.last().unwrap().total;
    let pass = r.reconstruction_rel_rms <= 0.10
        && r.root_inverse_residual <= 0.5
        && r.latent_cosine_mean <= -0.95
        && r.negated_latent_rel_rms <= 0.10
        && t.train_seconds <= 1800.0
        && last < first;
    outcome(
        pass,
        format!(
            "(a) rec {:.2}% (b) inverse residual {:.4} (c) cosine {:.4} (d) negated {:.2}%; \
             loss {first:.3e} -> {last:.3e} in {EPOCHS} epochs, {:.0}s",
            100.0 * r.reconstruction_rel_rms,
            r.root_inverse_residual,
            r.latent_cosine_mean,
            100.0 * r.negated_latent_rel_rms,
            t.train_seconds
        ),
    )
}

fn amortized_log(t: &Trained) -> Outcome {
    let med = t.report.log_rel_l2_median.unwrap();
    outcome(
        med <= 0.15,
        format!("median rel L2 {:.2}% on {} held-out pairs", 100.0 * med, t.report.pairs),
    )
}

fn timing(t: &Trained) -> Outcome {
    let rep = time_logs(&t.model, &t.data[TRAIN_PAIRS..], &IssConfig::default()).unwrap();
    outcome(
        rep.speedup >= 10.0,
        format!(
            "ISS {:.2} ms vs inference {:.3} ms per field, ratio {:.1}",
            1e3 * rep.iss_seconds_per_field,
            1e3 * rep.leda_seconds_per_field,
            rep.speedup
        ),
    )
}

fn pca_rank_two() -> Outcome {
    let cfg = SynthConfig {
        n_factors: 2,
        covariate_weights: vec![1.0, -0.5],
        seed: 11,
        ..SynthConfig::default()
    };
    let basis = basis_fields(&cfg);
    let iss = IssConfig::default();
    let logs: Vec<Vec<f64>> = (0..30)
        .map(|i| {
            let p = gen_pair_with_basis(&cfg, &basis, i);
            iss_log(&p.fwd, &iss).unwrap().log.into_data()
        })
        .collect();
    let pca = pca_fit(&logs, 2).unwrap();
    let explained: f64 = pca.explained_fraction.iter().sum();
    let ortho = gram_error(&pca.components);
    outcome(
        explained >= 0.95 && ortho <= 1e-8,
        format!(
            "top-2 explained {:.2}% over 30 ISS log maps, orthonormality error {ortho:.1e}",
            100.0 * explained
        ),
    )
}

fn regression(t: &Trained) -> Outcome {
    let fields: Vec<&DeformationField> = t.data.iter().map(|lp| &lp.pair.fwd).collect();
    let latents = t.model.encode_batch(&fields).unwrap();
    let features: Vec<Vec<f64>> = latents.into_iter().map(|z| z.0).collect();
    let targets: Vec<f64> = t.data.iter().map(|lp| lp.record.covariates[SCORE]).collect();
    let fit = ols_fit(&features, &targets, 0.2, 0).unwrap();
    outcome(
        fit.test_r >= 0.8 && !fit.r_undefined,
        format!(
            "held-out Pearson r {:.4} (train {:.4}, {} train / {} test)",
            fit.test_r, fit.train_r, fit.n_train, fit.n_test
        ),
    )
}

fn round_trips(t: &Trained, dataset_dir: &Path) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();

    let v = t.data[0].velocity.clone().unwrap();
    let path = tmp.path().join("v.ledf");
    write_field(&path, &v, Dtype::F64).unwrap();
    let back = read_field(&path).unwrap();
    if back.data().iter().zip(v.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        problems.push("LEDF f64");
    }
    let narrow = VectorField::from_vec(v.grid(), v.data().iter().map(|&x| f64::from(x as f32)).collect()).unwrap();
    let (decoded, dtype) = decode_field(&encode_field(&narrow, Dtype::F32)).unwrap();
    if dtype != Dtype::F32 || decoded != narrow {
        problems.push("LEDF f32");
    }

    let ckpt = tmp.path().join("m.ledm");
    save_checkpoint(&ckpt, &t.model).unwrap();
    let reloaded = load_checkpoint(&ckpt).unwrap();
    if reloaded != t.model || encode_checkpoint(&reloaded).unwrap() != fs::read(&ckpt).unwrap() {
        problems.push("LEDM");
    }
    for lp in &t.data[TRAIN_PAIRS..TRAIN_PAIRS + 5] {
        let a = t.model.infer_log(&lp.pair.fwd).unwrap();
        let b = reloaded.infer_log(&lp.pair.fwd).unwrap();
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            problems.push("inference after reload");
            break;
        }
    }

    let original = fs::read(dataset_dir.join(MANIFEST_FILE)).unwrap();
    let opened = Dataset::open(dataset_dir).unwrap();
    write_manifest(tmp.path(), &opened.manifest).unwrap();
    if fs::read(tmp.path().join(MANIFEST_FILE)).unwrap() != original {
        problems.push("manifest");
    }
    outcome(
        problems.is_empty(),
        format!("LEDF f64/f32, LEDM, manifest, inference after reload; mismatches {problems:?}"),
    )
}

fn determinism(t: &Trained) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig {
        grid: Grid2::square(16),
        n_pairs: 6,
        max_disp: 2.0,
        smooth_sigma: 2.0,
        seed: 7,
        ..SynthConfig::default()
    };
    write_synthetic_dataset(a.path(), &cfg).unwrap();
    write_synthetic_dataset(b.path(), &cfg).unwrap();
    let mut same_files = true;
    for rec in &Dataset::open(a.path()).unwrap().manifest.records {
        for p in [&rec.path_fwd, &rec.path_bwd, rec.path_gt_velocity.as_ref().unwrap()] {
            same_files &= fs::read(a.path().join(p)).unwrap() == fs::read(b.path().join(p)).unwrap();
        }
    }
    let same_manifest =
        fs::read(a.path().join(MANIFEST_FILE)).unwrap() == fs::read(b.path().join(MANIFEST_FILE)).unwrap();

    let pairs: Vec<PairSample> = Dataset::open(a.path())
        .unwrap()
        .load_all()
        .unwrap()
        .into_iter()
        .map(|lp| lp.pair)
        .collect();
    let lc = LedaConfig {
        latent_dim: 4,
        n_stages: 2,
        epochs: 3,
        batch_size: 2,
        seed: 5,
        ..LedaConfig::default()
    };
    let (mut lines_a, mut lines_b) = (Vec::new(), Vec::new());
    let ta = train(&pairs, cfg.grid, &lc, |s| lines_a.push(s.to_string())).unwrap();
    let tb = train(&pairs, cfg.grid, &lc, |s| lines_b.push(s.to_string())).unwrap();
    let same_training =
        lines_a == lines_b && encode_checkpoint(&ta.model).unwrap() == encode_checkpoint(&tb.model).unwrap();

    let held_out = &t.data[TRAIN_PAIRS..];
    let r1 = serde_json::to_string(&evaluate(&t.model, held_out, &EvalOptions::default()).unwrap()).unwrap();
    let r2 = serde_json::to_string(&t.report).unwrap();
    let same_report = r1 == r2;
    outcome(
        same_files && same_manifest && same_training && same_report,
        format!(
            "gen files {same_files}, manifests {same_manifest}, loss history + checkpoint {same_training}, \
             eval report {same_report}"
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, o: Outcome| {
        println!("{} {id}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };

    report("criterion 1 gradient suite", gradients());

    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_pairs: TRAIN_PAIRS + HELD_OUT,
        ..SynthConfig::default()
    };
    write_synthetic_dataset(dir.path(), &synth).unwrap();
    let data = Dataset::open(dir.path()).unwrap().load_all().unwrap();

    report("criterion 2 exp vs oracle", exp_agreement(&data));
    report("criterion 3 ISS recovery", iss_recovery(&data));
    report("criterion 4 negation check", negation(&data));
    report("criterion 8 PCA rank-2 recovery", pca_rank_two());

    let cfg = LedaConfig {
        epochs: EPOCHS,
        ..LedaConfig::default()
    };
    let pairs: Vec<PairSample> = data[..TRAIN_PAIRS].iter().map(|lp| lp.pair.clone()).collect();
    let start = Instant::now();
    let out = train(&pairs, synth.grid, &cfg, |_| {}).unwrap();
    let train_seconds = start.elapsed().as_secs_f64();
    let report_held_out = evaluate(&out.model, &data[TRAIN_PAIRS..], &EvalOptions::default()).unwrap();
    let trained = Trained {
        data,
        model: out.model,
        history: out.history,
        train_seconds,
        report: report_held_out,
    };

    report("criterion 5 training run", training(&trained));
    report("criterion 6 amortized log", amortized_log(&trained));
    report("criterion 7 timing ratio", timing(&trained));
    report("criterion 9 latent regression", regression(&trained));
    report("criterion 10 format round trips", round_trips(&trained, dir.path()));
    report("criterion 11 determinism", determinism(&trained));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} passed, {} failed ({:.0}s)",
        results.len() - failed.len(),
        failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
