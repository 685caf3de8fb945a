//! Finite-difference checks over every tape op, shared by the gradient and
//! acceptance targets.

use diffeo_core::autodiff::gradcheck::{check, CheckConfig, CheckReport};
use diffeo_core::autodiff::{Activation, Tape, Tensor, Var};
use diffeo_core::field::Grid2;
use diffeo_core::leda::{Leda, LedaConfig, PairSample};
use diffeo_core::synth::{gen_synthetic_pair, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Tape, &[Var]) -> Var;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
}

/// Checks the gradient of `Σ (build(inputs) + c)²` for a fixed random `c`;
/// scalar-valued builds are used as the loss directly.
pub fn check_op(inputs: &[Tensor], build: Build, seed: u64) -> CheckReport {
    let offset = |tape: &Tape, y: Var| {
        let shape = tape.value(y).shape().to_vec();
        random_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee), &shape, 1.0)
    };
    let forward = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let loss = if tape.value(y).len() == 1 {
            y
        } else {
            let c = offset(&tape, y);
            let c = tape.constant(c);
            let shifted = tape.add(y, c).unwrap();
            tape.sum_squares(shifted, 1.0)
        };
        (tape, vars, loss)
    };
    let (tape, vars, loss) = forward(inputs);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let cfg = CheckConfig {
        seed,
        ..CheckConfig::default()
    };
    check(inputs, &analytic, &cfg, |ts| {
        let (tape, _, loss) = forward(ts);
        (tape.value(loss).item(), tape.kink_signature())
    })
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub amp: f64,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], amp: f64, build: Build) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        amp,
        build,
    }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("dense", &[&[3, 4], &[4, 2], &[2]], 1.0, |t, v| t.dense(v[0], v[1], v[2]).unwrap()),
        case("conv2d_stride1", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], 1.0, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1).unwrap()
        }),
        case("conv2d_stride2", &[&[1, 2, 7, 6], &[2, 2, 3, 3], &[2]], 1.0, |t, v| {
            t.conv2d(v[0], v[1], v[2], 2).unwrap()
        }),
        case("conv_transpose2d", &[&[2, 3, 4, 3], &[3, 2, 3, 3], &[2]], 1.0, |t, v| {
            t.conv_transpose2d(v[0], v[1], v[2], 2, (7, 6)).unwrap()
        }),
        case("leaky_relu", &[&[4, 5]], 1.0, |t, v| t.pointwise(v[0], Activation::LeakyRelu)),
        case("tanh", &[&[4, 5]], 1.5, |t, v| t.pointwise(v[0], Activation::Tanh)),
        case("identity", &[&[4, 5]], 1.0, |t, v| t.pointwise(v[0], Activation::Identity)),
        case("reshape", &[&[2, 6]], 1.0, |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        case("scale", &[&[7]], 1.0, |t, v| t.scale(v[0], -2.5)),
        case("add", &[&[2, 3], &[2, 3]], 1.0, |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[2, 3], &[2, 3]], 1.0, |t, v| t.sub(v[0], v[1]).unwrap()),
        case("warp", &[&[2, 2, 6, 5], &[2, 2, 6, 5]], 1.5, |t, v| t.warp(v[0], v[1]).unwrap()),
        case("warp_fan_out", &[&[1, 2, 6, 6]], 1.5, |t, v| t.warp(v[0], v[0]).unwrap()),
        case("sum_squares", &[&[3, 4]], 1.0, |t, v| t.sum_squares(v[0], 0.3)),
        case("sum", &[&[3, 4]], 1.0, |t, v| {
            let s = t.sum(v[0]);
            t.pointwise(s, Activation::Tanh)
        }),
        case("latent_inverse", &[&[3, 4], &[3, 4]], 1.0, |t, v| t.latent_inverse(v[0], v[1]).unwrap()),
        case("weighted_sum", &[&[3], &[2, 2]], 1.0, |t, v| {
            let a = t.sum_squares(v[0], 1.0);
            let b = t.sum(v[1]);
            t.weighted_sum(&[(a, 0.7), (b, -1.3)]).unwrap()
        }),
        case("concat", &[&[2, 3], &[1, 3]], 1.0, |t, v| t.concat(&[v[0], v[1], v[0]]).unwrap()),
        case("rows", &[&[4, 3]], 1.0, |t, v| t.rows(v[0], 1, 2).unwrap()),
    ]
}

/// Runs every op case; `(name, report)` in a fixed order.
pub fn op_reports() -> Vec<(&'static str, CheckReport)> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random_tensor(&mut rng, s, c.amp)).collect();
            (c.name, check_op(&inputs, c.build, i as u64))
        })
        .collect()
}

pub fn tiny_model_config() -> LedaConfig {
    LedaConfig {
        latent_dim: 4,
        n_stages: 2,
        channels: [2, 3, 4],
        ..LedaConfig::default()
    }
}

/// Finite-difference check of the full autoencoder loss on an 8×8 pair.
pub fn full_loss_report() -> CheckReport {
    let grid = Grid2::square(8);
    let synth = SynthConfig {
        grid,
        max_disp: 1.0,
        smooth_sigma: 1.5,
        ..SynthConfig::default()
    };
    let p = gen_synthetic_pair(&synth, 0).unwrap();
    let pair = PairSample { fwd: p.fwd, bwd: p.bwd };
    let model = Leda::new(grid, tiny_model_config()).unwrap();
    let (_, grads, _) = model.loss_and_grads(&pair).unwrap();
    let inputs = model.params().tensors().to_vec();
    check(&inputs, &grads, &CheckConfig::default(), |ts| {
        let mut m = model.clone();
        m.params_mut().tensors_mut().clone_from_slice(ts);
        m.loss_with_signature(&pair).unwrap()
    })
}
