//! Affine augmentation and the warps that keep teacher pseudo-heatmaps
//! aligned with differently transformed student views.

use ndarray::{Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{HeatmapStack, KeypointSet};

/// Row-major 2x3 affine matrix mapping source `(x, y)` to destination.
pub type Matrix = [[f64; 3]; 2];

const IDENTITY: Matrix = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

/// A similarity transform about a centre point: `x' = s R (x - c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAug {
    /// Degrees, counter-clockwise in a y-down frame appears clockwise on screen.
    pub rotation: f64,
    pub scale: f64,
    pub translation: (f64, f64),
    pub matrix: Matrix,
}

impl AffineAug {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
            matrix: IDENTITY,
        }
    }

    pub fn new(rotation: f64, scale: f64, translation: (f64, f64), center: (f64, f64)) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::param(format!("affine scale must be finite and non-zero, got {scale}")));
        }
        let (sin, cos) = rotation.to_radians().sin_cos();
        let (a, b) = (scale * cos, -scale * sin);
        let (d, e) = (scale * sin, scale * cos);
        let (cx, cy) = center;
        let matrix = [
            [a, b, cx - a * cx - b * cy + translation.0],
            [d, e, cy - d * cx - e * cy + translation.1],
        ];
        Ok(Self {
            rotation,
            scale,
            translation,
            matrix,
        })
    }

    /// Wraps an arbitrary invertible matrix; rotation and scale are recovered
    /// from the linear part and `translation` is the matrix's offset column.
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::param("affine matrix is not invertible"));
        }
        Ok(Self {
            rotation: matrix[1][0].atan2(matrix[0][0]).to_degrees(),
            scale: det.abs().sqrt(),
            translation: (matrix[0][2], matrix[1][2]),
            matrix,
        })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::param("affine matrix is not invertible"));
        }
        let (a, b, d, e) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Self::from_matrix([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [d, e, -(d * m[0][2] + e * m[1][2])],
        ])
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &AffineAug) -> Result<Self> {
        let a = &self.matrix;
        let b = &inner.matrix;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            out[r][2] += a[r][2];
        }
        Self::from_matrix(out)
    }

    /// The same transform expressed on a grid `stride` times coarser.
    pub fn to_heatmap_frame(&self, stride: f64) -> Result<Self> {
        let mut m = self.matrix;
        m[0][2] /= stride;
        m[1][2] /= stride;
        Self::from_matrix(m)
    }

    pub fn transform_keypoints(&self, kp: &KeypointSet) -> KeypointSet {
        kp.map_coords(|p| self.apply(p))
    }
}

/// Sampling ranges for one augmentation strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugRanges {
    /// Rotation is drawn from `[-rotation_max, rotation_max]` degrees.
    pub rotation_max: f64,
    pub scale_range: (f64, f64),
    /// Translation per axis up to this fraction of the image side.
    pub translate_frac: f64,
}

impl AugRanges {
    pub fn weak() -> Self {
        Self {
            rotation_max: 15.0,
            scale_range: (0.9, 1.1),
            translate_frac: 0.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            rotation_max: 45.0,
            scale_range: (0.7, 1.3),
            translate_frac: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) || self.rotation_max < 0.0 || self.translate_frac < 0.0 {
            return Err(Error::param(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    /// Draws a transform about the centre of an image of `(height, width)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, image_size: (usize, usize)) -> AffineAug {
        let (h, w) = image_size;
        let rotation = uniform(rng, -self.rotation_max, self.rotation_max);
        let scale = uniform(rng, self.scale_range.0, self.scale_range.1);
        let tx = uniform(rng, -self.translate_frac, self.translate_frac) * w as f64;
        let ty = uniform(rng, -self.translate_frac, self.translate_frac) * h as f64;
        let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        AffineAug::new(rotation, scale, (tx, ty), center).expect("scale range is positive")
    }
}

impl Default for AugRanges {
    fn default() -> Self {
        Self::weak()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // still consume a draw so streams stay aligned across configurations
        let _: f64 = rng.random();
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_weak<R: Rng + ?Sized>(rng: &mut R, image_size: (usize, usize)) -> AffineAug {
    AugRanges::weak().sample(rng, image_size)
}

pub fn sample_strong<R: Rng + ?Sized>(rng: &mut R, image_size: (usize, usize)) -> AffineAug {
    AugRanges::strong().sample(rng, image_size)
}

/// Bilinear sample with zero padding outside the plane.
fn bilinear(plane: ArrayView2<'_, f32>, x: f64, y: f64) -> f32 {
    let (h, w) = plane.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xx: i64, yy: i64| -> f32 {
        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
            0.0
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps every plane of a `(C, H, W)` array into an output of `out_size`.
pub fn warp_planes(planes: &Array3<f32>, aug: &AffineAug, out_size: (usize, usize)) -> Result<Array3<f32>> {
    let inv = aug.inverse()?;
    let (c, _, _) = planes.dim();
    let (oh, ow) = out_size;
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            for ch in 0..c {
                out[[ch, y, x]] = bilinear(planes.index_axis(Axis(0), ch), sx, sy);
            }
        }
    }
    Ok(out)
}

/// Resamples a `(C, H, W)` image under `aug`, keeping its size.
pub fn warp_image(image: &Array3<f32>, aug: &AffineAug) -> Result<Array3<f32>> {
    let (_, h, w) = image.dim();
    warp_planes(image, aug, (h, w))
}

/// Warps a heatmap stack; `rel` must already be expressed in heatmap cells.
pub fn warp_heatmaps(stack: &HeatmapStack, rel: &AffineAug) -> Result<HeatmapStack> {
    let warped = warp_planes(stack.as_array(), rel, stack.size())?;
    HeatmapStack::new(warped, stack.sample_id.clone())
}
