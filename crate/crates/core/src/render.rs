//! Binary PPM (P6) renderings of deformations.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::field::{jacobian_logdet, warp_image, DeformationField, FieldError, Grid2, ScalarField};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("grid line spacing must be at least 2, got {0}")]
    LineSpacing(usize),
    #[error("not a P6 image: {0}")]
    BadPpm(String),
}

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RenderError> {
        Ok(fs::write(path, self.encode())?)
    }

    /// Parses a P6 file with maxval 255 (comments are not supported).
    pub fn decode(bytes: &[u8]) -> Result<Self, RenderError> {
        let bad = |m: &str| RenderError::BadPpm(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates maxval from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(bad("magic"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("dimension"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval"));
        }
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != width * height * 3 {
            return Err(bad("raster size"));
        }
        let pixels = raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { width, height, pixels })
    }
}

fn channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Diverging color map, symmetric around zero with range `±max|value|`:
/// negative (contraction) towards red, positive (expansion) towards blue,
/// zero white, NaN black.
pub fn logdet_image(map: &ScalarField) -> RgbImage {
    let grid = map.grid();
    let peak = map
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let pixels = map
        .data()
        .iter()
        .map(|&v| {
            if v.is_nan() {
                return [0, 0, 0];
            }
            let t = if peak > 0.0 { v / peak } else { 0.0 };
            let fade = channel(1.0 - t.abs());
            if t < 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        })
        .collect();
    RgbImage {
        width: grid.width(),
        height: grid.height(),
        pixels,
    }
}

pub fn render_logdet(field: &DeformationField) -> RgbImage {
    logdet_image(&jacobian_logdet(field))
}

/// Image with value 1 on every `line_every`-th row and column, 0 elsewhere.
pub fn grid_lines(grid: Grid2, line_every: usize) -> Result<ScalarField, RenderError> {
    if line_every < 2 {
        return Err(RenderError::LineSpacing(line_every));
    }
    Ok(ScalarField::from_fn(grid, |r, c| {
        f64::from(u8::from(r % line_every == 0 || c % line_every == 0))
    }))
}

/// Gray image: 0 renders white, 1 black.
pub fn gray_image(img: &ScalarField) -> RgbImage {
    let grid = img.grid();
    RgbImage {
        width: grid.width(),
        height: grid.height(),
        pixels: img
            .data()
            .iter()
            .map(|&v| {
                let g = channel(1.0 - v);
                [g, g, g]
            })
            .collect(),
    }
}

/// Grid-line image pulled back through `field`.
pub fn render_grid(field: &DeformationField, line_every: usize) -> Result<RgbImage, RenderError> {
    let lines = grid_lines(field.grid(), line_every)?;
    Ok(gray_image(&warp_image(&lines, field)?))
}

pub fn render_logdet_ppm(path: &Path, field: &DeformationField) -> Result<(), RenderError> {
    render_logdet(field).write(path)
}

pub fn render_grid_ppm(path: &Path, field: &DeformationField, line_every: usize) -> Result<(), RenderError> {
    render_grid(field, line_every)?.write(path)
}
