//! Similarity deformations used to build intra-subject image pairs.
//!
//! Points are `[x, y]` pixel coordinates with pixel centres on integers, `x`
//! along columns and `y` along rows. The forward map is
//! `p -> c + s * R(theta) * (p - c) + (tx * W, ty * H)` with `c` the image
//! centre `((W - 1) / 2, (H - 1) / 2)`; with `y` pointing down a positive
//! angle turns the `+x` axis towards `+y`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformParams {
    pub scale: f64,
    /// Radians.
    pub rotation: f64,
    /// Fractions of image width and height.
    pub translation: (f64, f64),
}

impl DeformParams {
    pub const IDENTITY: DeformParams = DeformParams {
        scale: 1.0,
        rotation: 0.0,
        translation: (0.0, 0.0),
    };

    pub fn new(scale: f64, rotation: f64, translation: (f64, f64)) -> Result<Self> {
        let p = Self {
            scale,
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (tx, ty) = self.translation;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Input(format!("scale must be positive, got {}", self.scale)));
        }
        if !(-PI..=PI).contains(&self.rotation) {
            return Err(Error::Input(format!(
                "rotation {} outside [-pi, pi]",
                self.rotation
            )));
        }
        if !(tx.abs() <= 0.5 && ty.abs() <= 0.5) {
            return Err(Error::Input(format!(
                "translation ({tx}, {ty}) exceeds half the image size"
            )));
        }
        Ok(())
    }

    /// 2x3 matrix of the forward map for a `width x height` image.
    pub fn forward_matrix(&self, width: usize, height: usize) -> [[f64; 3]; 2] {
        let (cx, cy) = center(width, height);
        let (sin, cos) = self.rotation.sin_cos();
        let (a, b) = (self.scale * cos, -self.scale * sin);
        let (c, d) = (self.scale * sin, self.scale * cos);
        let tx = self.translation.0 * width as f64;
        let ty = self.translation.1 * height as f64;
        [
            [a, b, cx + tx - a * cx - b * cy],
            [c, d, cy + ty - c * cx - d * cy],
        ]
    }
}

fn center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformRanges {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Radians.
    pub rot_max: f64,
    pub trans_max: f64,
}

impl Default for DeformRanges {
    fn default() -> Self {
        Self {
            scale_min: 0.9,
            scale_max: 1.1,
            rot_max: 15f64.to_radians(),
            trans_max: 0.1,
        }
    }
}

impl DeformRanges {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            rot_max: 0.0,
            trans_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite())
        {
            return Err(Error::Config(format!(
                "deform scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=PI).contains(&self.rot_max) {
            return Err(Error::Config(format!(
                "deform rotation bound {} must lie in [0, pi]",
                self.rot_max
            )));
        }
        if !(0.0..=0.5).contains(&self.trans_max) {
            return Err(Error::Config(format!(
                "deform translation bound {} must lie in [0, 0.5]",
                self.trans_max
            )));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws scale, rotation and both translations independently and uniformly.
pub fn sample_deform<R: Rng + ?Sized>(ranges: &DeformRanges, rng: &mut R) -> Result<DeformParams> {
    ranges.validate()?;
    let scale = uniform(rng, ranges.scale_min, ranges.scale_max);
    let rotation = uniform(rng, -ranges.rot_max, ranges.rot_max);
    let tx = uniform(rng, -ranges.trans_max, ranges.trans_max);
    let ty = uniform(rng, -ranges.trans_max, ranges.trans_max);
    Ok(DeformParams {
        scale,
        rotation,
        translation: (tx, ty),
    })
}

/// Maps points the same way content moves under [`apply_warp_image`].
pub fn apply_warp_points(points: &[Point], params: &DeformParams, width: usize, height: usize) -> Vec<Point> {
    let m = params.forward_matrix(width, height);
    points
        .iter()
        .map(|&[x, y]| {
            [
                m[0][0] * x + m[0][1] * y + m[0][2],
                m[1][0] * x + m[1][1] * y + m[1][2],
            ]
        })
        .collect()
}

/// Reflects a continuous coordinate into `[0, n - 1]` about the edge pixel centres.
fn reflect(v: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let v = v.rem_euclid(2.0 * max);
    if v > max {
        2.0 * max - v
    } else {
        v
    }
}

/// Resamples `image` under the forward map of `params` with bilinear
/// interpolation and reflection padding. Output has the input's shape.
pub fn apply_warp_image(image: &Image, params: &DeformParams) -> Result<Image> {
    params.validate()?;
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let (cx, cy) = center(w, h);
    let (sin, cos) = params.rotation.sin_cos();
    let inv_s = 1.0 / params.scale;
    let tx = params.translation.0 * w as f64;
    let ty = params.translation.1 * h as f64;
    let mut out = Image::zeros(h, w, ch);
    for row in 0..h {
        for col in 0..w {
            // inverse map: p = c + R(-theta) (q - c - t) / s
            let dx = col as f64 - cx - tx;
            let dy = row as f64 - cy - ty;
            let sx = cx + (cos * dx + sin * dy) * inv_s;
            let sy = cy + (-sin * dx + cos * dy) * inv_s;
            let sx = reflect(sx, w);
            let sy = reflect(sy, h);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..ch {
                let v00 = image.get(y0, x0, c) as f64;
                let v01 = image.get(y0, x1, c) as f64;
                let v10 = image.get(y1, x0, c) as f64;
                let v11 = image.get(y1, x1, c) as f64;
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out.set(row, col, c, (top + (bottom - top) * fy) as f32);
            }
        }
    }
    Ok(out)
}
