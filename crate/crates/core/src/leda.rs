//! Siamese log-Euclidean autoencoder.
//!
//! An encoder maps a deformation to a latent vector `z`. A single shared
//! decoder maps `z / 2^n` to the `2^n`-th root of the deformation, for
//! `n = 0..=N`. Training pairs `(phi_AB, phi_BA)` are pushed through the same
//! weights, and three losses tie the network to the group structure:
//!
//! * reconstruction: each root composed `2^n` times gives back the input;
//! * inverse consistency: forward and backward roots of the same stage
//!   compose to the identity in both orders;
//! * latent inverse consistency: `z_AB` and `z_BA` are antiparallel with
//!   zero sum.
//!
//! The logarithm is then read off the deepest root, `log(phi) ≈ 2^N (root_N - id)`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, latent_row, Activation, AdamState, AutodiffError, Tape, Tensor, Var};
use crate::field::{self, DeformationField, FieldError, Grid2, VectorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stage {stage} out of range 0..={max}")]
    StageOutOfRange { stage: u32, max: u32 },
    #[error("latent has {got} entries, model expects {expected}")]
    LatentSize { expected: usize, got: usize },
    #[error("training needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedaConfig {
    pub latent_dim: usize,
    /// Deepest root stage `N`; roots `2^n` for `n = 0..=N` are decoded.
    pub n_stages: u32,
    pub alpha_rec: f64,
    pub alpha_inv: f64,
    pub alpha_linv: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Encoder widths; the decoder mirrors them.
    #[serde(default = "default_channels")]
    pub channels: [usize; 3],
}

fn default_channels() -> [usize; 3] {
    [16, 32, 64]
}

impl Default for LedaConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            n_stages: 4,
            alpha_rec: 1.0,
            alpha_inv: 0.5,
            alpha_linv: 0.1,
            lr: 1e-3,
            batch_size: 8,
            epochs: 200,
            seed: 0,
            channels: default_channels(),
        }
    }
}

impl LedaConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let weights = [self.alpha_rec, self.alpha_inv, self.alpha_linv];
        let ok = self.latent_dim >= 1
            && self.n_stages >= 1
            && self.n_stages <= 16
            && weights.iter().all(|w| w.is_finite() && *w >= 0.0)
            && self.alpha_rec > 0.0
            && self.lr > 0.0
            && self.batch_size >= 1
            && self.channels.iter().all(|&c| c >= 1);
        if !ok {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Latent code of one deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn neg(&self) -> Self {
        self.scaled(-1.0)
    }

    /// `self + factor * other`.
    pub fn axpy(&self, factor: f64, other: &LatentVector) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + factor * b).collect())
    }

    /// Cosine similarity; `None` if either vector is (numerically) zero.
    pub fn cosine(&self, other: &LatentVector) -> Option<f64> {
        let (na, nb) = (self.norm(), other.norm());
        if na < 1e-12 || nb < 1e-12 {
            return None;
        }
        Some(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f64>() / (na * nb))
    }
}

/// Latent inverse-consistency term `(1 + cos θ)/2 + ‖z_AB + z_BA‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentLoss {
    pub value: f64,
    /// A vector was below the norm floor and the cosine term was set to 0.5.
    pub degenerate: bool,
}

pub fn loss_linv(z_ab: &LatentVector, z_ba: &LatentVector) -> LatentLoss {
    let t = latent_row(&z_ab.0, &z_ba.0);
    LatentLoss {
        value: t.value,
        degenerate: t.degenerate,
    }
}

/// Spatial sizes through the stride-2 stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pyramid {
    sizes: [(usize, usize); 4],
}

impl Pyramid {
    fn new(grid: Grid2) -> Self {
        let mut sizes = [(grid.height(), grid.width()); 4];
        for i in 1..4 {
            sizes[i] = (sizes[i - 1].0.div_ceil(2), sizes[i - 1].1.div_ceil(2));
        }
        Self { sizes }
    }

    fn bottleneck(&self) -> usize {
        self.sizes[3].0 * self.sizes[3].1
    }
}

/// Named weight tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

const KERNEL: usize = 3;

/// Expected `(name, shape)` list of the network for a grid and config.
pub fn architecture(grid: Grid2, config: &LedaConfig) -> Vec<(String, Vec<usize>)> {
    let [c1, c2, c3] = config.channels;
    let flat = c3 * Pyramid::new(grid).bottleneck();
    let l = config.latent_dim;
    let k = KERNEL;
    let spec: Vec<(&str, Vec<usize>)> = vec![
        ("enc.conv1.weight", vec![c1, 2, k, k]),
        ("enc.conv1.bias", vec![c1]),
        ("enc.conv2.weight", vec![c2, c1, k, k]),
        ("enc.conv2.bias", vec![c2]),
        ("enc.conv3.weight", vec![c3, c2, k, k]),
        ("enc.conv3.bias", vec![c3]),
        ("enc.fc.weight", vec![flat, l]),
        ("enc.fc.bias", vec![l]),
        ("dec.fc.weight", vec![l, flat]),
        ("dec.fc.bias", vec![flat]),
        // transposed kernels are stored as the adjoint conv's [narrow, wide, k, k]
        ("dec.deconv1.weight", vec![c3, c2, k, k]),
        ("dec.deconv1.bias", vec![c2]),
        ("dec.deconv2.weight", vec![c2, c1, k, k]),
        ("dec.deconv2.bias", vec![c1]),
        ("dec.deconv3.weight", vec![c1, 2, k, k]),
        ("dec.deconv3.bias", vec![2]),
    ];
    spec.into_iter().map(|(n, s)| (n.to_string(), s)).collect()
}

fn init_params(grid: Grid2, config: &LedaConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in architecture(grid, config) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let fan_in = match shape.len() {
                2 => shape[0],
                // each output pixel of a stride-2 transposed conv sees about a
                // quarter of the kernel taps
                _ if name.starts_with("dec.") => (shape[0] * shape[2] * shape[3]).div_ceil(4),
                _ => shape[1] * shape[2] * shape[3],
            };
            let mut bound = (6.0 / ((1.0 + Activation::LEAK.powi(2)) * fan_in as f64)).sqrt();
            if name == "dec.deconv3.weight" {
                bound *= 0.1;
            }
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data).expect("architecture shape"));
    }
    ModelParams { names, tensors }
}

/// Parameter handles on a tape, in [`architecture`] order.
struct Net<'a> {
    vars: Vec<Var>,
    grid: Grid2,
    config: &'a LedaConfig,
}

impl Net<'_> {
    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let v = &self.vars;
        let batch = tape.value(x).shape()[0];
        let mut h = x;
        for layer in 0..3 {
            h = tape.conv2d(h, v[2 * layer], v[2 * layer + 1], 2)?;
            h = tape.pointwise(h, Activation::LeakyRelu);
        }
        let flat = tape.value(h).len() / batch;
        let h = tape.reshape(h, &[batch, flat])?;
        tape.dense(h, v[6], v[7])
    }

    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var, AutodiffError> {
        let v = &self.vars;
        let batch = tape.value(z).shape()[0];
        let pyr = Pyramid::new(self.grid);
        let c3 = self.config.channels[2];
        let h = tape.dense(z, v[8], v[9])?;
        let h = tape.pointwise(h, Activation::LeakyRelu);
        let (bh, bw) = pyr.sizes[3];
        let mut h = tape.reshape(h, &[batch, c3, bh, bw])?;
        for layer in 0..3 {
            let out = pyr.sizes[2 - layer];
            h = tape.conv_transpose2d(h, v[10 + 2 * layer], v[11 + 2 * layer], 2, out)?;
            if layer < 2 {
                h = tape.pointwise(h, Activation::LeakyRelu);
            }
        }
        Ok(h)
    }

    /// Roots for all stages from latents `z: [B, L]`; row `n * B + b` of the
    /// result is stage `n` of sample `b`.
    fn decode_stages(&self, tape: &mut Tape, z: Var) -> Result<Var, AutodiffError> {
        let scaled: Vec<Var> = (0..=self.config.n_stages)
            .map(|n| tape.scale(z, 0.5f64.powi(n as i32)))
            .collect();
        let all = tape.concat(&scaled)?;
        self.decode(tape, all)
    }
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rec: f64,
    pub inv: f64,
    pub linv: f64,
    pub total: f64,
}

/// A forward/backward deformation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub fwd: DeformationField,
    pub bwd: DeformationField,
}

struct PairGraph {
    total: Var,
    rec: Var,
    inv: Var,
    linv: Var,
}

/// Trained (or freshly initialized) autoencoder bound to a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Leda {
    config: LedaConfig,
    grid: Grid2,
    params: ModelParams,
}

impl Leda {
    /// Randomly initialized network, seeded from `config.seed`.
    pub fn new(grid: Grid2, config: LedaConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params(grid, &config, &mut rng);
        Ok(Self { config, grid, params })
    }

    /// Wraps existing weights, checking names and shapes against the
    /// architecture.
    pub fn from_params(grid: Grid2, config: LedaConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        let arch = architecture(grid, &config);
        let ok = arch.len() == params.names.len()
            && arch
                .iter()
                .zip(params.names.iter().zip(&params.tensors))
                .all(|((n, s), (pn, pt))| n == pn && s.as_slice() == pt.shape());
        if !ok {
            return Err(ModelError::InvalidConfig(format!(
                "parameters do not match the architecture for grid {grid}"
            )));
        }
        Ok(Self { config, grid, params })
    }

    pub fn config(&self) -> &LedaConfig {
        &self.config
    }

    pub fn grid(&self) -> Grid2 {
        self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn net<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Net<'a> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Net {
            vars,
            grid: self.grid,
            config: &self.config,
        }
    }

    fn field_tensor(&self, fields: &[&DeformationField]) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(fields.len() * 2 * self.grid.len());
        for f in fields {
            self.grid.ensure_same(&f.grid())?;
            data.extend(f.displacement().to_channels_first());
        }
        Ok(Tensor::new(
            vec![fields.len(), 2, self.grid.height(), self.grid.width()],
            data,
        )?)
    }

    fn unpack_fields(&self, t: &Tensor) -> Vec<DeformationField> {
        t.data()
            .chunks(2 * self.grid.len())
            .map(|c| {
                DeformationField::from_displacement(
                    VectorField::from_channels_first(self.grid, c).expect("finite decoder output"),
                )
            })
            .collect()
    }

    pub fn encode(&self, phi: &DeformationField) -> Result<LatentVector, ModelError> {
        Ok(self.encode_batch(&[phi])?.remove(0))
    }

    pub fn encode_batch(&self, fields: &[&DeformationField]) -> Result<Vec<LatentVector>, ModelError> {
        let mut tape = Tape::new();
        let net = self.net(&mut tape, false);
        let x = tape.constant(self.field_tensor(fields)?);
        let z = net.encode(&mut tape, x)?;
        Ok(tape
            .value(z)
            .data()
            .chunks(self.config.latent_dim)
            .map(|c| LatentVector(c.to_vec()))
            .collect())
    }

    fn check_latent(&self, z: &LatentVector) -> Result<(), ModelError> {
        if z.len() != self.config.latent_dim {
            return Err(ModelError::LatentSize {
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Decoder applied to `z / 2^stage`: the predicted `2^stage`-th root.
    pub fn decode_root(&self, z: &LatentVector, stage: u32) -> Result<DeformationField, ModelError> {
        if stage > self.config.n_stages {
            return Err(ModelError::StageOutOfRange {
                stage,
                max: self.config.n_stages,
            });
        }
        self.check_latent(z)?;
        let scaled = z.scaled(0.5f64.powi(stage as i32));
        Ok(self.decode_raw(&[scaled])?.remove(0))
    }

    /// Decoder applied to the given latents as-is (stage 0).
    pub fn decode_raw(&self, latents: &[LatentVector]) -> Result<Vec<DeformationField>, ModelError> {
        for z in latents {
            self.check_latent(z)?;
        }
        let mut tape = Tape::new();
        let net = self.net(&mut tape, false);
        let data: Vec<f64> = latents.iter().flat_map(|z| z.0.iter().copied()).collect();
        let z = tape.constant(Tensor::new(vec![latents.len(), self.config.latent_dim], data)?);
        let out = net.decode(&mut tape, z)?;
        Ok(self.unpack_fields(tape.value(out)))
    }

    /// All roots `0..=N` of the deformation encoded by `z`.
    pub fn decode_all_roots(&self, z: &LatentVector) -> Result<Vec<DeformationField>, ModelError> {
        self.check_latent(z)?;
        let latents: Vec<LatentVector> = (0..=self.config.n_stages)
            .map(|n| z.scaled(0.5f64.powi(n as i32)))
            .collect();
        self.decode_raw(&latents)
    }

    /// Amortized logarithm `2^N (root_N − id)`.
    pub fn infer_log(&self, phi: &DeformationField) -> Result<VectorField, ModelError> {
        let z = self.encode(phi)?;
        let root = self.decode_root(&z, self.config.n_stages)?;
        Ok(root
            .displacement()
            .scale(2f64.powi(self.config.n_stages as i32)))
    }

    fn pair_graph(&self, tape: &mut Tape, net: &Net, pair: &PairSample) -> Result<PairGraph, ModelError> {
        let pixels = self.grid.len() as f64;
        let x = tape.constant(self.field_tensor(&[&pair.fwd, &pair.bwd])?);
        let z = net.encode(tape, x)?;
        let roots = net.decode_stages(tape, z)?;
        let mut rec_terms = Vec::new();
        let mut inv_terms = Vec::new();
        for n in 0..=self.config.n_stages {
            let stage = tape.rows(roots, 2 * n as usize, 2)?;
            let mut composed = stage;
            for _ in 0..n {
                composed = tape.warp(composed, composed)?;
            }
            let diff = tape.sub(composed, x)?;
            rec_terms.push((tape.sum_squares(diff, 1.0 / pixels), 1.0));

            let ab = tape.rows(stage, 0, 1)?;
            let ba = tape.rows(stage, 1, 1)?;
            let swapped = tape.concat(&[ba, ab])?;
            // row 0: ab ∘ ba, row 1: ba ∘ ab
            let round_trip = tape.warp(stage, swapped)?;
            inv_terms.push((tape.sum_squares(round_trip, 1.0 / pixels), 1.0));
        }
        let rec = tape.weighted_sum(&rec_terms)?;
        let inv = tape.weighted_sum(&inv_terms)?;
        let z_ab = tape.rows(z, 0, 1)?;
        let z_ba = tape.rows(z, 1, 1)?;
        let linv = tape.latent_inverse(z_ab, z_ba)?;
        let c = &self.config;
        let total = tape.weighted_sum(&[(rec, c.alpha_rec), (inv, c.alpha_inv), (linv, c.alpha_linv)])?;
        Ok(PairGraph { total, rec, inv, linv })
    }

    fn breakdown(tape: &Tape, g: &PairGraph) -> LossBreakdown {
        LossBreakdown {
            rec: tape.value(g.rec).item(),
            inv: tape.value(g.inv).item(),
            linv: tape.value(g.linv).item(),
            total: tape.value(g.total).item(),
        }
    }

    /// Loss terms of one pair.
    pub fn losses(&self, pair: &PairSample) -> Result<LossBreakdown, ModelError> {
        let mut tape = Tape::new();
        let net = self.net(&mut tape, false);
        let g = self.pair_graph(&mut tape, &net, pair)?;
        Ok(Self::breakdown(&tape, &g))
    }

    /// Loss terms of one pair with the gradient of the total loss for every
    /// parameter tensor, plus the branch signature of the forward pass.
    pub fn loss_and_grads(&self, pair: &PairSample) -> Result<(LossBreakdown, Vec<Tensor>, u64), ModelError> {
        let mut tape = Tape::new();
        let net = self.net(&mut tape, true);
        let g = self.pair_graph(&mut tape, &net, pair)?;
        let mut grads = tape.backward(g.total)?;
        let param_grads = net
            .vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((Self::breakdown(&tape, &g), param_grads, tape.kink_signature()))
    }

    /// Total loss and branch signature; the finite-difference counterpart of
    /// [`Leda::loss_and_grads`].
    pub fn loss_with_signature(&self, pair: &PairSample) -> Result<(f64, u64), ModelError> {
        let mut tape = Tape::new();
        let net = self.net(&mut tape, false);
        let g = self.pair_graph(&mut tape, &net, pair)?;
        Ok((tape.value(g.total).item(), tape.kink_signature()))
    }
}

/// Reconstruction term from explicit roots: for every stage `n`,
/// `mean_x ‖C_{2^n}(root_n)(x) − phi(x)‖²`, summed over stages and both
/// directions.
pub fn reconstruction_loss(
    roots_ab: &[DeformationField],
    roots_ba: &[DeformationField],
    pair: &PairSample,
) -> Result<f64, FieldError> {
    let mut total = 0.0;
    for (n, (ra, rb)) in roots_ab.iter().zip(roots_ba).enumerate() {
        for (root, target) in [(ra, &pair.fwd), (rb, &pair.bwd)] {
            let c = field::self_compose(root, n as u32);
            total += c.displacement().rms_diff(target.displacement())?.powi(2);
        }
    }
    Ok(total)
}

/// Inverse-consistency term from explicit roots: for every stage,
/// `mean_x ‖(ab ∘ ba)(x) − x‖² + mean_x ‖(ba ∘ ab)(x) − x‖²`, summed.
pub fn inverse_loss(roots_ab: &[DeformationField], roots_ba: &[DeformationField]) -> Result<f64, FieldError> {
    let mut total = 0.0;
    for (ra, rb) in roots_ab.iter().zip(roots_ba) {
        total += field::compose(ra, rb)?.displacement().rms().powi(2);
        total += field::compose(rb, ra)?.displacement().rms().powi(2);
    }
    Ok(total)
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub rec: f64,
    pub inv: f64,
    pub linv: f64,
    pub total: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} rec={:.6e} inv={:.6e} linv={:.6e} total={:.6e}",
            self.epoch, self.rec, self.inv, self.linv, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Leda,
    pub history: Vec<EpochStats>,
}

/// Adam over seeded, shuffled mini-batches. Each pair's forward and backward
/// fields share all weights; batch gradients are averaged in index order.
pub fn train(
    pairs: &[PairSample],
    grid: Grid2,
    config: &LedaConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, ModelError> {
    if pairs.len() < 2 {
        return Err(ModelError::TooFewPairs(pairs.len()));
    }
    for p in pairs {
        grid.ensure_same(&p.fwd.grid())?;
        grid.ensure_same(&p.bwd.grid())?;
    }
    let mut model = Leda::new(grid, config.clone())?;
    let mut adam = AdamState::new(&model.params.tensors, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut acc: Vec<Tensor> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in chunk {
                let (loss, grads, _) = model.loss_and_grads(&pairs[i])?;
                if !loss.total.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch, batch });
                }
                sums.rec += loss.rec;
                sums.inv += loss.inv;
                sums.linv += loss.linv;
                sums.total += loss.total;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(&mut model.params.tensors, &acc, &mut adam)?;
        }
        let n = pairs.len() as f64;
        let stats = EpochStats {
            epoch,
            rec: sums.rec / n,
            inv: sums.inv / n,
            linv: sums.linv / n,
            total: sums.total / n,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}
