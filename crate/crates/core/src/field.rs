//! Dense 2D displacement fields and the group operations on them.
//!
//! Fields live on a regular pixel grid with unit spacing. A [`VectorField`]
//! stores one `(d_row, d_col)` vector per pixel in row-major order; a
//! [`DeformationField`] interprets that vector field as the displacement of
//! the map `phi(x) = x + u(x)`.
//!
//! Off-grid values are obtained by bilinear interpolation after clamping the
//! query coordinate to `[0, H-1] x [0, W-1]`. With that convention constant
//! fields are closed under composition, and sampling at integer coordinates
//! returns the stored value bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid grid {height}x{width}: both dimensions must be at least 4")]
    InvalidGrid { height: usize, width: usize },
    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: Grid2, right: Grid2 },
    #[error("data length {got} does not match grid {grid} (expected {expected})")]
    LengthMismatch {
        grid: Grid2,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("non-finite query coordinate ({row}, {col})")]
    NonFiniteCoordinate { row: f64, col: f64 },
}

/// Regular 2D pixel grid with unit spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct Grid2 {
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    height: usize,
    width: usize,
}

impl TryFrom<RawGrid> for Grid2 {
    type Error = FieldError;

    fn try_from(raw: RawGrid) -> Result<Self, FieldError> {
        Grid2::new(raw.height, raw.width)
    }
}

impl From<Grid2> for RawGrid {
    fn from(g: Grid2) -> Self {
        RawGrid {
            height: g.height,
            width: g.width,
        }
    }
}

impl Grid2 {
    pub const MIN_SIDE: usize = 4;

    pub fn new(height: usize, width: usize) -> Result<Self, FieldError> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(FieldError::InvalidGrid { height, width });
        }
        Ok(Self { height, width })
    }

    /// Square grid, panics on sides below [`Grid2::MIN_SIDE`].
    pub fn square(side: usize) -> Self {
        Self::new(side, side).expect("grid side must be at least 4")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.height - 1) as f64 / 2.0,
            (self.width - 1) as f64 / 2.0,
        )
    }

    pub(crate) fn ensure_same(&self, other: &Grid2) -> Result<(), FieldError> {
        if self != other {
            return Err(FieldError::GridMismatch {
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Grid2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Bilinear sample of a single channel of an interleaved `H x W x stride`
/// buffer at a clamped coordinate.
///
/// The interpolation is written in lerp form `a + t (b - a)` so that constant
/// data and integer coordinates are reproduced exactly.
#[inline]
pub(crate) fn bilinear(
    data: &[f64],
    height: usize,
    width: usize,
    stride: usize,
    channel: usize,
    row: f64,
    col: f64,
) -> f64 {
    let cell = Cell::locate(height, width, row, col);
    cell.interpolate(|r, c| data[(r * width + c) * stride + channel])
}

/// Interpolation cell of a clamped query coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cell {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub tr: f64,
    pub tc: f64,
    /// The row coordinate was outside `[0, H-1]` and got clamped.
    pub row_clamped: bool,
    pub col_clamped: bool,
}

impl Cell {
    #[inline]
    pub fn locate(height: usize, width: usize, row: f64, col: f64) -> Self {
        let (r0, r1, tr, row_clamped) = axis(row, height);
        let (c0, c1, tc, col_clamped) = axis(col, width);
        Self {
            r0,
            r1,
            c0,
            c1,
            tr,
            tc,
            row_clamped,
            col_clamped,
        }
    }

    #[inline]
    pub fn interpolate(&self, at: impl Fn(usize, usize) -> f64) -> f64 {
        let a = at(self.r0, self.c0);
        let b = at(self.r0, self.c1);
        let c = at(self.r1, self.c0);
        let d = at(self.r1, self.c1);
        let top = a + self.tc * (b - a);
        let bottom = c + self.tc * (d - c);
        top + self.tr * (bottom - top)
    }

    /// Partial derivatives of the interpolant with respect to the query
    /// coordinate. Clamped axes have zero derivative.
    #[inline]
    pub fn gradient(&self, at: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let a = at(self.r0, self.c0);
        let b = at(self.r0, self.c1);
        let c = at(self.r1, self.c0);
        let d = at(self.r1, self.c1);
        let d_row = if self.row_clamped || self.r0 == self.r1 {
            0.0
        } else {
            let top = a + self.tc * (b - a);
            let bottom = c + self.tc * (d - c);
            bottom - top
        };
        let d_col = if self.col_clamped || self.c0 == self.c1 {
            0.0
        } else {
            (b - a) + self.tr * ((d - c) - (b - a))
        };
        (d_row, d_col)
    }

    /// Corner weights in the order `(r0,c0), (r0,c1), (r1,c0), (r1,c1)`.
    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (ur, uc) = (1.0 - self.tr, 1.0 - self.tc);
        [ur * uc, ur * self.tc, self.tr * uc, self.tr * self.tc]
    }
}

#[inline]
fn axis(x: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&x);
    let x = x.clamp(0.0, max);
    let i0 = x.floor() as usize;
    if i0 >= n - 1 {
        (n - 1, n - 1, 0.0, clamped)
    } else {
        (i0, i0 + 1, x - i0 as f64, clamped)
    }
}

/// `H x W x 2` grid of vectors in grid-index units, component order
/// `(d_row, d_col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid2,
    data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid2) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len() * 2],
        }
    }

    pub fn constant(grid: Grid2, value: [f64; 2]) -> Self {
        Self::from_fn(grid, |_, _| value)
    }

    pub fn from_fn(grid: Grid2, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(grid.len() * 2);
        for r in 0..grid.height {
            for c in 0..grid.width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { grid, data }
    }

    /// Wraps interleaved row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(grid: Grid2, data: Vec<f64>) -> Result<Self, FieldError> {
        if data.len() != grid.len() * 2 {
            return Err(FieldError::LengthMismatch {
                grid,
                expected: grid.len() * 2,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite { index });
        }
        Ok(Self { grid, data })
    }

    /// Builds a field from channel-first `[2, H, W]` data.
    pub fn from_channels_first(grid: Grid2, planar: &[f64]) -> Result<Self, FieldError> {
        let n = grid.len();
        if planar.len() != 2 * n {
            return Err(FieldError::LengthMismatch {
                grid,
                expected: 2 * n,
                got: planar.len(),
            });
        }
        let mut data = vec![0.0; 2 * n];
        for p in 0..n {
            data[2 * p] = planar[p];
            data[2 * p + 1] = planar[n + p];
        }
        Self::from_vec(grid, data)
    }

    pub fn to_channels_first(&self) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; 2 * n];
        for p in 0..n {
            out[p] = self.data[2 * p];
            out[n + p] = self.data[2 * p + 1];
        }
        out
    }

    pub fn grid(&self) -> Grid2 {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        let i = 2 * (row * self.grid.width + col);
        [self.data[i], self.data[i + 1]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: [f64; 2]) {
        let i = 2 * (row * self.grid.width + col);
        self.data[i] = value[0];
        self.data[i + 1] = value[1];
    }

    /// Clamped bilinear sample; the caller guarantees finite coordinates.
    #[inline]
    pub fn sample(&self, row: f64, col: f64) -> [f64; 2] {
        let cell = Cell::locate(self.grid.height, self.grid.width, row, col);
        let w = self.grid.width;
        [
            cell.interpolate(|r, c| self.data[2 * (r * w + c)]),
            cell.interpolate(|r, c| self.data[2 * (r * w + c) + 1]),
        ]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &VectorField) -> Result<Self, FieldError> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &VectorField) -> Result<Self, FieldError> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Root mean squared vector norm over pixels.
    pub fn rms(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|v| v * v).sum();
        (sum / self.grid.len() as f64).sqrt()
    }

    /// Largest per-pixel vector norm.
    pub fn max_norm(&self) -> f64 {
        self.data
            .chunks_exact(2)
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of the flattened data.
    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn rms_diff(&self, other: &VectorField) -> Result<f64, FieldError> {
        Ok(self.sub(other)?.rms())
    }

    /// `||self - reference|| / ||reference||` over the flattened data.
    pub fn rel_l2(&self, reference: &VectorField) -> Result<f64, FieldError> {
        Ok(self.sub(reference)?.l2() / reference.l2())
    }
}

/// Single-channel `H x W` map (images, log-det maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid2,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn from_fn(grid: Grid2, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                data.push(f(r, c));
            }
        }
        Self { grid, data }
    }

    pub fn from_vec(grid: Grid2, data: Vec<f64>) -> Result<Self, FieldError> {
        if data.len() != grid.len() {
            return Err(FieldError::LengthMismatch {
                grid,
                expected: grid.len(),
                got: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> Grid2 {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.grid.width + col]
    }

    #[inline]
    pub fn sample(&self, row: f64, col: f64) -> f64 {
        bilinear(
            &self.data,
            self.grid.height,
            self.grid.width,
            1,
            0,
            row,
            col,
        )
    }
}

/// The map `phi(x) = x + u(x)`.
///
/// Folded fields are valid values; use [`DeformationField::min_jacobian_det`]
/// to check diffeomorphism validity.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    displacement: VectorField,
}

impl DeformationField {
    pub fn from_displacement(displacement: VectorField) -> Self {
        Self { displacement }
    }

    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField {
        self.displacement
    }

    pub fn grid(&self) -> Grid2 {
        self.displacement.grid
    }

    /// Smallest Jacobian determinant over the grid (`-inf` never occurs;
    /// folded pixels give values `<= 0`).
    pub fn min_jacobian_det(&self) -> f64 {
        jacobian_det(self)
            .data
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn make_identity(grid: Grid2) -> DeformationField {
    DeformationField::from_displacement(VectorField::zeros(grid))
}

/// Samples the field at arbitrary `(row, col)` points.
pub fn sample_displacement(
    field: &VectorField,
    points: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>, FieldError> {
    points
        .iter()
        .map(|&[row, col]| {
            if !row.is_finite() || !col.is_finite() {
                return Err(FieldError::NonFiniteCoordinate { row, col });
            }
            Ok(field.sample(row, col))
        })
        .collect()
}

/// `(outer ∘ inner)(x) = outer(inner(x))`.
pub fn compose(
    outer: &DeformationField,
    inner: &DeformationField,
) -> Result<DeformationField, FieldError> {
    let grid = outer.grid();
    grid.ensure_same(&inner.grid())?;
    let u_in = &inner.displacement;
    let u_out = &outer.displacement;
    let out = VectorField::from_fn(grid, |r, c| {
        let [dr, dc] = u_in.get(r, c);
        let [sr, sc] = u_out.sample(r as f64 + dr, c as f64 + dc);
        [dr + sr, dc + sc]
    });
    Ok(DeformationField::from_displacement(out))
}

/// `C_{2^n}(f)`: `n` repeated squarings `psi <- psi ∘ psi`.
pub fn self_compose(field: &DeformationField, n_doublings: u32) -> DeformationField {
    let mut psi = field.clone();
    for _ in 0..n_doublings {
        psi = compose(&psi, &psi).expect("same grid");
    }
    psi
}

pub fn negate(field: &VectorField) -> VectorField {
    field.map(|v| -v)
}

/// Mean Euclidean norm of the displacement of `fwd ∘ bwd`.
pub fn inverse_consistency_residual(
    fwd: &DeformationField,
    bwd: &DeformationField,
) -> Result<f64, FieldError> {
    inverse_consistency_residual_interior(fwd, bwd, 0)
}

/// Like [`inverse_consistency_residual`] but averaged only over pixels at
/// least `margin` pixels away from the border.
pub fn inverse_consistency_residual_interior(
    fwd: &DeformationField,
    bwd: &DeformationField,
    margin: usize,
) -> Result<f64, FieldError> {
    let composed = compose(fwd, bwd)?;
    let grid = composed.grid();
    let u = composed.displacement();
    let (mut sum, mut count) = (0.0, 0usize);
    for r in margin..grid.height.saturating_sub(margin) {
        for c in margin..grid.width.saturating_sub(margin) {
            let [a, b] = u.get(r, c);
            sum += a.hypot(b);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn diff_axis(n: usize, i: usize, at: impl Fn(usize) -> f64) -> f64 {
    if i == 0 {
        at(1) - at(0)
    } else if i == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        0.5 * (at(i + 1) - at(i - 1))
    }
}

/// Jacobian determinant of `phi = x + u`; central differences in the
/// interior, one-sided on the border rows and columns.
pub fn jacobian_det(field: &DeformationField) -> ScalarField {
    let grid = field.grid();
    let u = field.displacement();
    let (h, w) = (grid.height, grid.width);
    ScalarField::from_fn(grid, |r, c| {
        let durr = diff_axis(h, r, |i| u.get(i, c)[0]);
        let dcr = diff_axis(h, r, |i| u.get(i, c)[1]);
        let durc = diff_axis(w, c, |j| u.get(r, j)[0]);
        let dcc = diff_axis(w, c, |j| u.get(r, j)[1]);
        (1.0 + durr) * (1.0 + dcc) - durc * dcr
    })
}

/// Pointwise log of the Jacobian determinant; NaN where the map folds
/// (`det <= 0`).
pub fn jacobian_logdet(field: &DeformationField) -> ScalarField {
    let det = jacobian_det(field);
    let data = det
        .data
        .iter()
        .map(|&d| if d > 0.0 { d.ln() } else { f64::NAN })
        .collect();
    ScalarField {
        grid: det.grid,
        data,
    }
}

/// Pulls `image` back through `phi`: `out(x) = image(phi(x))`.
pub fn warp_image(
    image: &ScalarField,
    field: &DeformationField,
) -> Result<ScalarField, FieldError> {
    image.grid.ensure_same(&field.grid())?;
    let u = field.displacement();
    Ok(ScalarField::from_fn(image.grid, |r, c| {
        let [dr, dc] = u.get(r, c);
        image.sample(r as f64 + dr, c as f64 + dc)
    }))
}
