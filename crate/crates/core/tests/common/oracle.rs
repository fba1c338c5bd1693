//! Slow reference implementations of matching and suppression.

use mdnet::extractor::MultiFeatureSet;

/// Sequential f64 dot product of two f32 rows.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (&x, &y)| s + x as f64 * y as f64)
}

/// Mutual nearest neighbours by scanning the whole row and column for every
/// candidate pair. Ties go to the lowest index.
pub fn brute_mnn(a: &[f32], b: &[f32], dim: usize) -> Vec<(usize, usize)> {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let row = |i: usize| &a[i * dim..(i + 1) * dim];
    let col = |j: usize| &b[j * dim..(j + 1) * dim];
    let mut out = Vec::new();
    for i in 0..na {
        for j in 0..nb {
            let s = dot(row(i), col(j));
            let row_ok = (0..nb).all(|k| {
                let t = dot(row(i), col(k));
                if k < j { t < s } else { t <= s }
            });
            let col_ok = (0..na).all(|k| {
                let t = dot(row(k), col(j));
                if k < i { t < s } else { t <= s }
            });
            if row_ok && col_ok {
                out.push((i, j));
            }
        }
    }
    out
}

/// Union of per-set brute-force matches as `(set, idx1, idx2)`.
pub fn brute_partitioned(f1: &MultiFeatureSet, f2: &MultiFeatureSet) -> Vec<(usize, usize, usize)> {
    let dim = f1.descriptor_dim;
    f1.sets
        .iter()
        .zip(&f2.sets)
        .enumerate()
        .flat_map(|(s, (a, b))| {
            brute_mnn(&a.descriptors, &b.descriptors, dim)
                .into_iter()
                .map(move |(i, j)| (s, i, j))
        })
        .collect()
}

/// Local maxima found by visiting the full `(2r+1)^2` window of every pixel.
/// A pixel must beat earlier neighbours (row-major) strictly and later ones
/// weakly. Returns `(x, y)` in row-major order.
pub fn brute_nms(d: &[f64], h: usize, w: usize, threshold: f64, r: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if v <= threshold {
                continue;
            }
            let mut keep = true;
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    if (yy, xx) == (y, x) {
                        continue;
                    }
                    let q = d[yy * w + xx];
                    keep &= if (yy, xx) < (y, x) { v > q } else { v >= q };
                }
            }
            if keep {
                out.push((x, y));
            }
        }
    }
    out
}
