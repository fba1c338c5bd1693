use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WarpError;

/// Points whose homogeneous `w` falls below this are treated as mapped to infinity.
pub const MIN_W: f64 = 1e-12;

/// Projective map of the plane, stored with `h33 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Normalizes so `h33 = 1` and rejects (near-)singular matrices.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, WarpError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(WarpError::Singular("non-finite entry".into()));
        }
        let h33 = m[(2, 2)];
        if h33.abs() < MIN_W {
            return Err(WarpError::Singular("h33 is zero".into()));
        }
        let m = if h33 == 1.0 { m } else { m / h33 };
        let det = m.determinant();
        if det.abs() <= 1e-8 {
            return Err(WarpError::Singular(format!("determinant {det:e}")));
        }
        Ok(Self { m })
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self, WarpError> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Homography {
        let inv = self.m.try_inverse().expect("homography is invertible by construction");
        Self::from_matrix(inv).expect("inverse of an invertible homography")
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &Homography) -> Result<Homography, WarpError> {
        Self::from_matrix(self.m * first.m)
    }

    /// Maps a point; `None` when it lands on or behind the plane at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w < MIN_W {
            return None;
        }
        let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
        let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
        Some((u, v))
    }

    /// Exact homography through four point correspondences (8x8 linear solve).
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self, WarpError> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| WarpError::Singular("degenerate correspondences".into()))?;
        Self::from_matrix(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }
}

/// Ranges for random viewpoint changes, relative to the patch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomographyLimits {
    /// Maximum absolute in-plane rotation, degrees.
    pub rotation_deg: f64,
    /// Per-axis scale range.
    pub scale: (f64, f64),
    /// Maximum absolute translation as a fraction of the patch side.
    pub translation: f64,
    /// Maximum absolute corner displacement as a fraction of the patch side.
    pub perspective: f64,
    /// Minimum fraction of source pixels that must land inside the target frame.
    pub min_overlap: f64,
}

impl Default for HomographyLimits {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            scale: (0.7, 1.4),
            translation: 0.1,
            perspective: 0.08,
            min_overlap: 0.4,
        }
    }
}

impl HomographyLimits {
    /// No viewpoint change at all.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translation: 0.0,
            perspective: 0.0,
            min_overlap: 0.0,
        }
    }
}

/// Pixels `(x, y)` of a `width x height` grid, row-major, that `g` maps inside
/// the `[0, out_w - 1] x [0, out_h - 1]` frame.
pub fn visibility_mask(g: &Homography, width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            mask.push(g.apply(x as f64, y as f64).is_some_and(|(u, v)| inside(u, v, out_w, out_h)));
        }
    }
    mask
}

#[inline]
pub(crate) fn inside(u: f64, v: f64, w: usize, h: usize) -> bool {
    u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64
}

pub fn overlap_fraction(g: &Homography, width: usize, height: usize) -> f64 {
    let mask = visibility_mask(g, width, height, width, height);
    mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a centre-anchored rotation + anisotropic scale, a translation, and a
/// perspective corner jitter, retrying until the overlap constraint holds.
pub fn sample_homography(
    rng: &mut impl Rng,
    limits: &HomographyLimits,
    width: usize,
    height: usize,
) -> Result<Homography, WarpError> {
    const MAX_DRAWS: usize = 100;
    let side = width.min(height) as f64;
    for _ in 0..MAX_DRAWS {
        let theta = uniform(rng, -limits.rotation_deg, limits.rotation_deg).to_radians();
        let sx = uniform(rng, limits.scale.0, limits.scale.1);
        let sy = uniform(rng, limits.scale.0, limits.scale.1);
        let t = limits.translation * side;
        let tx = uniform(rng, -t, t);
        let ty = uniform(rng, -t, t);
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (s, c) = theta.sin_cos();
        let rs = Matrix3::new(c * sx, -s * sy, 0.0, s * sx, c * sy, 0.0, 0.0, 0.0, 1.0);
        let about_centre = Homography::translation(cx, cy).m * rs * Homography::translation(-cx, -cy).m;
        let affine = Homography::translation(tx, ty).m * about_centre;
        let mut g = match Homography::from_matrix(affine) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if limits.perspective > 0.0 {
            let j = limits.perspective * side;
            let (w1, h1) = (width as f64 - 1.0, height as f64 - 1.0);
            let corners = [(0.0, 0.0), (w1, 0.0), (w1, h1), (0.0, h1)];
            let mut moved = [(0.0, 0.0); 4];
            for (m, &(x, y)) in moved.iter_mut().zip(&corners) {
                let (u, v) = g.apply(x, y).expect("affine map is finite");
                *m = (u + uniform(rng, -j, j), v + uniform(rng, -j, j));
            }
            g = match Homography::from_correspondences(&corners, &moved) {
                Ok(g) => g,
                Err(_) => continue,
            };
        }
        if limits.min_overlap <= 0.0 || overlap_fraction(&g, width, height) >= limits.min_overlap {
            return Ok(g);
        }
    }
    Err(WarpError::SamplingFailed(MAX_DRAWS))
}
