use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::conv::{self, ConvGeom};
use super::gemm::{gemm_acc, Layout};
use super::warp;
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Leaky rectifier with negative slope 0.1.
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    pub const LEAK: f64 = 0.1;

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    Self::LEAK * x
                }
            }
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    Self::LEAK
                }
            }
            Self::Tanh => 1.0 - y * y,
            Self::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leaky_relu" => Ok(Self::LeakyRelu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(AutodiffError::UnknownActivation(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv { x: Var, k: Var, b: Var, geom: ConvGeom },
    /// Adjoint of a `Conv` whose wide side is this node's output.
    ConvTranspose { x: Var, k: Var, b: Var, geom: ConvGeom },
    Pointwise { x: Var, act: Activation },
    Reshape { x: Var },
    Scale { x: Var, factor: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Warp { outer: Var, inner: Var },
    SumSquares { x: Var, scale: f64 },
    Sum { x: Var },
    LatentInverse { a: Var, b: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    Concat { parts: Vec<Var> },
    Rows { x: Var, start: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and the backward sweep is a single reverse pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    latent_flags: usize,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Number of latent-inverse evaluations that hit a near-zero vector and
    /// fell back to the neutral cosine term.
    pub fn degenerate_latent_count(&self) -> usize {
        self.latent_flags
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// `x · w + b` for `x: [B, I]`, `w: [I, O]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(mismatch("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, inp, outp) = (xs[0], ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y: Vec<f64> = (0..batch).flat_map(|_| bv.iter().copied()).collect();
        gemm_acc(batch, inp, outp, xv, Layout::Plain, wv, Layout::Plain, &mut y);
        let value = Tensor::new(vec![batch, outp], y)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Dense { x, w, b }, value, rg))
    }

    /// Zero-padded strided cross-correlation. `x: [B, C, H, W]`,
    /// `k: [F, C, k, k]` with odd `k`, `b: [F]`; output `[B, F, ⌈H/s⌉, ⌈W/s⌉]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var, AutodiffError> {
        let (xs, ks, bs) = (self.value(x).shape(), self.value(k).shape(), self.value(b).shape());
        if xs.len() != 4
            || ks.len() != 4
            || bs.len() != 1
            || ks[1] != xs[1]
            || ks[2] != ks[3]
            || ks[2] % 2 == 0
            || bs[0] != ks[0]
            || stride == 0
        {
            return Err(mismatch("conv2d", format!("x {xs:?}, k {ks:?}, b {bs:?}, stride {stride}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ks[0],
            h: xs[2],
            w: xs[3],
            k: ks[2],
            stride,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let mut y = vec![0.0; geom.batch * geom.out_ch * ho * wo];
        conv::correlate(&geom, self.value(x).data(), self.value(k).data(), &mut y);
        add_channel_bias(&mut y, self.value(b).data(), ho * wo);
        let value = Tensor::new(vec![geom.batch, geom.out_ch, ho, wo], y)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(Op::Conv { x, k, b, geom }, value, rg))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] mapping
    /// `x: [B, F, ⌈H/s⌉, ⌈W/s⌉]` to `[B, C, H, W]` with `k: [F, C, k, k]` and
    /// `b: [C]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<Var, AutodiffError> {
        let (xs, ks, bs) = (self.value(x).shape(), self.value(k).shape(), self.value(b).shape());
        let shape_ok = xs.len() == 4
            && ks.len() == 4
            && bs.len() == 1
            && ks[0] == xs[1]
            && ks[2] == ks[3]
            && ks[2] % 2 == 1
            && bs[0] == ks[1]
            && stride > 0;
        if !shape_ok {
            return Err(mismatch(
                "conv_transpose2d",
                format!("x {xs:?}, k {ks:?}, b {bs:?}, stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: ks[1],
            out_ch: ks[0],
            h: out_hw.0,
            w: out_hw.1,
            k: ks[2],
            stride,
        };
        if geom.out_h() != xs[2] || geom.out_w() != xs[3] {
            return Err(mismatch(
                "conv_transpose2d",
                format!("input {xs:?} is not the strided image of {out_hw:?}"),
            ));
        }
        let (h, w) = out_hw;
        let mut y = vec![0.0; geom.batch * geom.in_ch * h * w];
        conv::correlate_adjoint(&geom, self.value(x).data(), self.value(k).data(), &mut y);
        add_channel_bias(&mut y, self.value(b).data(), h * w);
        let value = Tensor::new(vec![geom.batch, geom.in_ch, h, w], y)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(Op::ConvTranspose { x, k, b, geom }, value, rg))
    }

    pub fn pointwise(&mut self, x: Var, act: Activation) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| act.apply(t)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Pointwise { x, act }, value, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|t| t * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(Op::Scale { x, factor }, value, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub { a, b }, value, rg))
    }

    /// Differentiable `outer ∘ inner` on `[B, 2, H, W]` displacement tensors.
    pub fn warp(&mut self, outer: Var, inner: Var) -> Result<Var, AutodiffError> {
        let (os, is) = (self.value(outer).shape(), self.value(inner).shape());
        if os != is || os.len() != 4 || os[1] != 2 || os[2] < 2 || os[3] < 2 {
            return Err(mismatch("warp", format!("outer {os:?}, inner {is:?}")));
        }
        let (b, h, w) = (os[0], os[2], os[3]);
        let mut out = vec![0.0; b * 2 * h * w];
        warp::warp_forward(b, h, w, self.value(outer).data(), self.value(inner).data(), &mut out);
        let value = Tensor::new(os.to_vec(), out)?;
        let rg = self.rg(&[outer, inner]);
        Ok(self.push(Op::Warp { outer, inner }, value, rg))
    }

    /// `scale · Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var, scale: f64) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Op::SumSquares { x, scale }, Tensor::scalar(scale * s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    /// `Σ_rows (1 + cos θ)/2 + ‖a + b‖²` over rows of `[B, L]` inputs.
    ///
    /// Rows where either vector has norm below 1e-12 use the neutral cosine
    /// term 0.5 (and contribute no cosine gradient); each such row is counted
    /// in [`Tape::degenerate_latent_count`].
    pub fn latent_inverse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.shape().len() != 2 {
            return Err(mismatch("latent_inverse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let l = av.shape()[1];
        let mut total = 0.0;
        let mut flagged = 0;
        for (ra, rb) in av.data().chunks(l).zip(bv.data().chunks(l)) {
            let t = latent_row(ra, rb);
            total += t.value;
            flagged += usize::from(t.degenerate);
        }
        self.latent_flags += flagged;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::LatentInverse { a, b }, Tensor::scalar(total), rg))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, AutodiffError> {
        let mut total = 0.0;
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(mismatch("weighted_sum", format!("non-scalar term {:?}", t.shape())));
            }
            total += wgt * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(total),
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape()[1..] != tail[..] {
                return Err(mismatch("concat", format!("{:?} vs trailing {:?}", v.shape(), tail)));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, value, rg))
    }

    /// Rows `start..start + count` along the leading axis.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let lead = v.shape()[0];
        if count == 0 || start + count > lead {
            return Err(mismatch("rows", format!("{start}..{} of {lead}", start + count)));
        }
        let row = v.len() / lead;
        let mut shape = v.shape().to_vec();
        shape[0] = count;
        let value = Tensor::new(shape, v.data()[start * row..(start + count) * row].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Rows { x, start }, value, rg))
    }

    /// Hash of every piecewise-linear branch taken in the forward pass
    /// (interpolation cells, clamp states, rectifier signs). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Warp { inner, .. } => {
                    let s = self.value(*inner).shape();
                    warp::warp_cells(s[0], s[2], s[3], self.value(*inner).data(), |v| hasher.write_u64(v));
                }
                Op::Pointwise {
                    x,
                    act: Activation::LeakyRelu,
                } => {
                    for chunk in self.value(*x).data().chunks(64) {
                        let mut bits = 0u64;
                        for (i, v) in chunk.iter().enumerate() {
                            bits |= u64::from(*v > 0.0) << i;
                        }
                        hasher.write_u64(bits);
                    }
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::NotOnTape(loss.0));
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(self.value(var).shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let outp = self.value(*w).shape()[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |gx| {
                    gemm_acc(batch, outp, inp, gd, Layout::Plain, wv, Layout::Transposed, gx);
                });
                self.accumulate(grads, *w, |gw| {
                    gemm_acc(inp, batch, outp, xv, Layout::Transposed, gd, Layout::Plain, gw);
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..batch {
                        for (gbo, go) in gb.iter_mut().zip(&gd[r * outp..(r + 1) * outp]) {
                            *gbo += go;
                        }
                    }
                });
            }
            Op::Conv { x, k, b, geom } => {
                let plane = geom.out_h() * geom.out_w();
                self.accumulate(grads, *x, |gx| {
                    conv::correlate_adjoint(geom, gd, self.value(*k).data(), gx);
                });
                self.accumulate(grads, *k, |gk| {
                    conv::correlate_kernel_grad(geom, self.value(*x).data(), gd, gk);
                });
                self.accumulate(grads, *b, |gb| channel_bias_grad(gd, gb, plane));
            }
            Op::ConvTranspose { x, k, b, geom } => {
                self.accumulate(grads, *x, |gx| {
                    conv::correlate(geom, gd, self.value(*k).data(), gx);
                });
                self.accumulate(grads, *k, |gk| {
                    conv::correlate_kernel_grad(geom, gd, self.value(*x).data(), gk);
                });
                self.accumulate(grads, *b, |gb| channel_bias_grad(gd, gb, geom.h * geom.w));
            }
            Op::Pointwise { x, act } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * act.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd, 1.0));
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd, *factor));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd, 1.0));
                self.accumulate(grads, *b, |gb| add_into(gb, gd, 1.0));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd, 1.0));
                self.accumulate(grads, *b, |gb| add_into(gb, gd, -1.0));
            }
            Op::Warp { outer, inner } => {
                let s = node.value.shape();
                let (bn, h, w) = (s[0], s[2], s[3]);
                let ov = self.value(*outer).data();
                let iv = self.value(*inner).data();
                // outer and inner may be the same variable (psi ∘ psi); the
                // two contributions are accumulated one after the other.
                self.accumulate(grads, *outer, |go| {
                    warp::warp_backward(bn, h, w, ov, iv, gd, Some(go), None);
                });
                self.accumulate(grads, *inner, |gi| {
                    warp::warp_backward(bn, h, w, ov, iv, gd, None, Some(gi));
                });
            }
            Op::SumSquares { x, scale } => {
                let xv = self.value(*x).data();
                let c = 2.0 * scale * gd[0];
                self.accumulate(grads, *x, |gx| add_into(gx, xv, c));
            }
            Op::Sum { x } => {
                let c = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += c));
            }
            Op::LatentInverse { a, b } => {
                let l = self.value(*a).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = gd[0];
                let rows: Vec<LatentTerm> = av.chunks(l).zip(bv.chunks(l)).map(|(x, y)| latent_row(x, y)).collect();
                self.accumulate(grads, *a, |ga| {
                    for (r, t) in rows.iter().enumerate() {
                        for i in 0..l {
                            ga[r * l + i] += c * t.grad_a[i];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (r, t) in rows.iter().enumerate() {
                        for i in 0..l {
                            gb[r * l + i] += c * t.grad_b[i];
                        }
                    }
                });
            }
            Op::WeightedSum { terms } => {
                for &(v, wgt) in terms {
                    self.accumulate(grads, v, |gv| gv[0] += wgt * gd[0]);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &gd[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::Rows { x, start } => {
                let n = gd.len();
                let off = start * n / node.value.shape()[0];
                self.accumulate(grads, *x, |gx| add_into(&mut gx[off..off + n], gd, 1.0));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let bv = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn channel_bias_grad(g: &[f64], gb: &mut [f64], plane: usize) {
    let ch = gb.len();
    for (i, chunk) in g.chunks(plane).enumerate() {
        gb[i % ch] += chunk.iter().sum::<f64>();
    }
}

pub(crate) struct LatentTerm {
    pub value: f64,
    pub degenerate: bool,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

pub(crate) const LATENT_NORM_FLOOR: f64 = 1e-12;

/// `(1 + cos θ)/2 + ‖a + b‖²` and its gradient for one pair of latents.
pub(crate) fn latent_row(a: &[f64], b: &[f64]) -> LatentTerm {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sum_sq: f64 = a.iter().zip(b).map(|(x, y)| (x + y) * (x + y)).sum();
    let mut grad_a: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x + y)).collect();
    let mut grad_b = grad_a.clone();
    if na < LATENT_NORM_FLOOR || nb < LATENT_NORM_FLOOR {
        return LatentTerm {
            value: 0.5 + sum_sq,
            degenerate: true,
            grad_a,
            grad_b,
        };
    }
    let cos = dot / (na * nb);
    // d cos / da = b/(|a||b|) - cos a/|a|²
    for i in 0..a.len() {
        grad_a[i] += 0.5 * (b[i] / (na * nb) - cos * a[i] / (na * na));
        grad_b[i] += 0.5 * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
    }
    LatentTerm {
        value: 0.5 * (1.0 + cos) + sum_sq,
        degenerate: false,
        grad_a,
        grad_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.param(Tensor::zeros(&[2]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x0 = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.param(t(&[2], &[0.5, -1.0]));
        let y0 = tape.dense(x0, eye, b).unwrap();
        assert_eq!(tape.value(y0).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let xv: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let wv: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 4], &xv));
        let w = tape.constant(t(&[4, 2], &wv));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.dense(x, w, b).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let naive: f64 = (0..4).map(|k| xv[r * 4 + k] * wv[k * 2 + c]).sum();
                assert!((tape.value(y).data()[r * 2 + c] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_kernel_conv_is_identity_and_zero_input_gives_bias() {
        let xv: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &xv));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), xv.as_slice());

        let zero = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k3 = tape.constant(Tensor::full(&[2, 1, 3, 3], 0.3));
        let b2 = tape.constant(t(&[2], &[1.5, -2.0]));
        let y = tape.conv2d(zero, k3, b2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn warp_with_zero_inner_passes_outer_and_its_gradient() {
        let outer_v: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut tape = Tape::new();
        let outer = tape.param(t(&[1, 2, 4, 4], &outer_v));
        let inner = tape.param(Tensor::zeros(&[1, 2, 4, 4]));
        let y = tape.warp(outer, inner).unwrap();
        assert_eq!(tape.value(y).data(), outer_v.as_slice());
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(outer).unwrap().data().iter().all(|&v| v == 1.0));

        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.25));
        let doubled = tape.warp(c, c).unwrap();
        assert!(tape.value(doubled).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let leaky = tape.pointwise(x, Activation::LeakyRelu);
        assert_eq!(tape.value(leaky).data(), &[-0.1, 0.0, 2.0]);
        let th = tape.pointwise(x, Activation::Tanh);
        assert_eq!(tape.value(th).data()[1], 0.0);
        assert_eq!("tanh".parse::<Activation>().unwrap(), Activation::Tanh);
        assert!("relu".parse::<Activation>().is_err());
    }

    #[test]
    fn sum_and_norm_gradients() {
        let xv = [0.5, -2.0, 3.0];
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &xv));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);
        let n = tape.sum_squares(x, 1.0);
        assert_eq!(tape.backward(n).unwrap().get(x).unwrap().data(), &[1.0, -4.0, 6.0]);
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let y = tape.add(c, p).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
