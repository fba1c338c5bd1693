//! Multi-set keypoint extraction: per-detector thresholded NMS on every level
//! of an image pyramid, a per-detector top-K across levels, and descriptors
//! read from the descriptor volume at the detection pixel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward, ModelWeights};
use crate::raster::Image;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MDF1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("model has {model} detectors but {requested} sets were requested")]
    SetMismatch { model: usize, requested: usize },
    #[error("budget {budget} is smaller than the {sets} keypoint sets")]
    BudgetTooSmall { budget: usize, sets: usize },
    #[error("image {width}x{height} is below the {min}px receptive field")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("feature file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated feature file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("feature file has {0} trailing bytes")]
    TrailingBytes(usize),
}

/// Local maximum of a heatmap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Pixels above `threshold` that dominate their `(2r+1)^2` neighbourhood:
/// at least every later pixel in row-major order and strictly above every
/// earlier one. Returned in row-major order.
pub fn nms<T: Scalar>(heatmap: &Tensor<T>, threshold: f64, radius: usize) -> Vec<Detection> {
    let [h, w] = heatmap.dims2("nms");
    nms_plane(heatmap.data(), h, w, threshold, radius)
}

fn nms_plane<T: Scalar>(d: &[T], h: usize, w: usize, threshold: f64, radius: usize) -> Vec<Detection> {
    assert!(radius >= 1, "nms radius must be at least 1");
    // Separable max filter over the clipped square window.
    let mut rows = vec![T::neg_infinity(); h * w];
    for y in 0..h {
        let line = &d[y * w..(y + 1) * w];
        for x in 0..w {
            let win = &line[x.saturating_sub(radius)..(x + radius + 1).min(w)];
            rows[y * w + x] = win.iter().copied().fold(T::neg_infinity(), T::max);
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let v = d[y * w + x];
            if v.as_f64() <= threshold {
                continue;
            }
            if (y0..y1).any(|yy| rows[yy * w + x] > v) {
                continue;
            }
            // v is a window maximum; an equal value earlier in row-major order wins.
            let tied_earlier = (y0..=y).any(|yy| {
                let x1 = if yy == y { x } else { (x + radius + 1).min(w) };
                (x.saturating_sub(radius)..x1).any(|xx| d[yy * w + xx] == v)
            });
            if !tied_earlier {
                out.push(Detection {
                    x,
                    y,
                    score: v.as_f64(),
                });
            }
        }
    }
    out
}

/// Level sizes `(w, h)` of a pyramid with `round(dim / factor^k)` per level,
/// kept while the shorter side is at least `min_dim`. Level 0 is always present.
pub fn pyramid_sizes(width: usize, height: usize, factor: f64, min_dim: usize) -> Vec<(usize, usize)> {
    assert!(factor > 1.0, "pyramid factor must exceed 1");
    let mut out = vec![(width, height)];
    for k in 1.. {
        let s = factor.powi(k);
        let (w, h) = ((width as f64 / s).round() as usize, (height as f64 / s).round() as usize);
        if w.min(h) < min_dim || w == 0 || h == 0 {
            break;
        }
        out.push((w, h));
    }
    out
}

/// Bilinear pyramid; see [`pyramid_sizes`].
pub fn build_pyramid(image: &Image, factor: f64, min_dim: usize) -> Vec<Image> {
    pyramid_sizes(image.width(), image.height(), factor, min_dim)
        .into_iter()
        .enumerate()
        .map(|(k, (w, h))| if k == 0 { image.clone() } else { image.resize(w, h) })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Total keypoint budget `M`; each set keeps at most `ceil(M / N)`.
    pub budget: usize,
    pub threshold: f64,
    pub nms_radius: usize,
    pub scale_factor: f64,
    pub min_dim: usize,
    /// Suppress same-set detections that land within the NMS radius of a
    /// stronger one from another pyramid level.
    pub cross_scale_nms: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            budget: 1024,
            threshold: 0.7,
            nms_radius: 3,
            scale_factor: std::f64::consts::SQRT_2,
            min_dim: 256,
            cross_scale_nms: false,
        }
    }
}

impl ExtractConfig {
    pub fn per_set_budget(&self, sets: usize) -> usize {
        self.budget.div_ceil(sets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Level-0 pixel coordinates.
    pub x: f32,
    pub y: f32,
    pub score: f32,
    /// Pyramid level the keypoint was found at.
    pub scale: u8,
    /// Index of the detector (keypoint set) that produced it.
    pub set: usize,
}

/// Keypoints of one set and their descriptors, stored row-major `count x C`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<f32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize, dim: usize) -> &[f32] {
        &self.descriptors[i * dim..(i + 1) * dim]
    }
}

/// Features of one image partitioned into `N` sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiFeatureSet {
    pub width: usize,
    pub height: usize,
    pub descriptor_dim: usize,
    pub sets: Vec<FeatureSet>,
}

impl MultiFeatureSet {
    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(FeatureSet::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.sets.iter().map(FeatureSet::len).collect()
    }

    /// All keypoints, set by set.
    pub fn keypoints(&self) -> impl Iterator<Item = &Keypoint> {
        self.sets.iter().flat_map(|s| s.keypoints.iter())
    }

    /// Little-endian MDF1 encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32, self.sets.len() as u32, self.descriptor_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.sets {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for (i, k) in s.keypoints.iter().enumerate() {
                out.extend_from_slice(&k.x.to_le_bytes());
                out.extend_from_slice(&k.y.to_le_bytes());
                out.extend_from_slice(&k.score.to_le_bytes());
                out.extend_from_slice(&[k.scale, 0, 0, 0]);
                for v in s.descriptor(i, self.descriptor_dim) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ExtractError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(ExtractError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ExtractError::UnsupportedVersion(version));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let f32_at = |b: &[u8]| f32::from_le_bytes(b.try_into().expect("4 bytes"));
        let mut sets = Vec::with_capacity(n);
        for set in 0..n {
            let count = r.u32()? as usize;
            let mut fs = FeatureSet::default();
            for _ in 0..count {
                let rec = r.take(16 + 4 * c)?;
                fs.keypoints.push(Keypoint {
                    x: f32_at(&rec[0..4]),
                    y: f32_at(&rec[4..8]),
                    score: f32_at(&rec[8..12]),
                    scale: rec[12],
                    set,
                });
                fs.descriptors.extend(rec[16..].chunks_exact(4).map(f32_at));
            }
            sets.push(fs);
        }
        if r.pos != bytes.len() {
            return Err(ExtractError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            width,
            height,
            descriptor_dim: c,
            sets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        crate::io::write_atomic(path, &self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExtractError> {
        if self.pos + n > self.bytes.len() {
            return Err(ExtractError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ExtractError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

struct Candidate {
    score: f64,
    level: usize,
    u: usize,
    v: usize,
    x: f32,
    y: f32,
    descriptor: Vec<f32>,
}

/// Runs the network on every pyramid level and keeps, for each detector, the
/// `ceil(M / N)` strongest local maxima across levels. Equal scores resolve
/// to the lower level, then row-major order.
pub fn extract<T: Scalar>(image: &Image, weights: &ModelWeights<T>, cfg: &ExtractConfig) -> Result<MultiFeatureSet, ExtractError> {
    let n = weights.num_detectors();
    let c = weights.descriptor_dim();
    if cfg.budget < n {
        return Err(ExtractError::BudgetTooSmall { budget: cfg.budget, sets: n });
    }
    let min = weights.config.min_input_size();
    if image.width().min(image.height()) < min {
        return Err(ExtractError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            min,
        });
    }
    let weights = weights.detached();
    let (w0, h0) = (image.width() as f32, image.height() as f32);
    let mut per_set: Vec<Vec<Candidate>> = (0..n).map(|_| Vec::new()).collect();
    for (level, img) in build_pyramid(image, cfg.scale_factor, cfg.min_dim.max(min)).iter().enumerate() {
        let (wk, hk) = (img.width(), img.height());
        let out = forward(&img.to_tensor::<T>(), &weights);
        let heat = out.heatmaps.expect("forward produces heatmaps");
        let desc = out.descriptors.data();
        let hw = wk * hk;
        let (sx, sy) = (w0 / wk as f32, h0 / hk as f32);
        for (set, cands) in per_set.iter_mut().enumerate() {
            let plane = &heat.data()[set * hw..(set + 1) * hw];
            for d in nms_plane(plane, hk, wk, cfg.threshold, cfg.nms_radius) {
                let p = d.y * wk + d.x;
                cands.push(Candidate {
                    score: d.score,
                    level,
                    u: d.x,
                    v: d.y,
                    x: d.x as f32 * sx,
                    y: d.y as f32 * sy,
                    descriptor: (0..c).map(|ch| desc[ch * hw + p].as_f64() as f32).collect(),
                });
            }
        }
    }

    let k = cfg.per_set_budget(n);
    let r2 = (cfg.nms_radius * cfg.nms_radius) as f32;
    let sets = per_set
        .into_iter()
        .enumerate()
        .map(|(set, mut cands)| {
            cands.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.level.cmp(&b.level))
                    .then((a.v, a.u).cmp(&(b.v, b.u)))
            });
            let mut fs = FeatureSet::default();
            for cand in cands {
                if fs.len() == k {
                    break;
                }
                if cfg.cross_scale_nms
                    && fs.keypoints.iter().any(|q| {
                        q.scale as usize != cand.level && (q.x - cand.x).powi(2) + (q.y - cand.y).powi(2) <= r2
                    })
                {
                    continue;
                }
                fs.keypoints.push(Keypoint {
                    x: cand.x,
                    y: cand.y,
                    score: cand.score as f32,
                    scale: cand.level as u8,
                    set,
                });
                fs.descriptors.extend(cand.descriptor);
            }
            fs
        })
        .collect();
    Ok(MultiFeatureSet {
        width: image.width(),
        height: image.height(),
        descriptor_dim: c,
        sets,
    })
}

/// As [`extract`], first checking that the model provides `sets` detectors.
pub fn extract_sets<T: Scalar>(
    image: &Image,
    weights: &ModelWeights<T>,
    cfg: &ExtractConfig,
    sets: usize,
) -> Result<MultiFeatureSet, ExtractError> {
    if weights.num_detectors() != sets {
        return Err(ExtractError::SetMismatch {
            model: weights.num_detectors(),
            requested: sets,
        });
    }
    extract(image, weights, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn plane(h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(&[h, w], data)
    }

    /// Every pixel against its whole window, row-major tie rule.
    fn brute_nms(d: &[f64], h: usize, w: usize, t: f64, r: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = d[y * w + x];
                let mut keep = v > t;
                for yy in 0..h {
                    for xx in 0..w {
                        if yy.abs_diff(y) > r || xx.abs_diff(x) > r || (yy, xx) == (y, x) {
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

    #[test]
    fn nms_equals_brute_force_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..40 {
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let r = rng.gen_range(1..5);
            // Coarse levels make plateaus and ties common.
            let levels = if trial % 2 == 0 { 4.0 } else { 1000.0 };
            let d: Vec<f64> = (0..h * w).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
            let got: Vec<(usize, usize)> = nms(&plane(h, w, d.clone()), 0.2, r).iter().map(|k| (k.x, k.y)).collect();
            assert_eq!(got, brute_nms(&d, h, w, 0.2, r), "trial {trial}");
        }
    }

    #[test]
    fn single_delta_detected() {
        let mut d = vec![0.1; 81];
        d[4 * 9 + 6] = 0.9;
        let out = nms(&plane(9, 9, d), 0.7, 3);
        assert_eq!(out, vec![Detection { x: 6, y: 4, score: 0.9 }]);
    }

    #[test]
    fn close_equal_peaks_give_one_detection() {
        let mut d = vec![0.0; 100];
        d[5 * 10 + 3] = 0.9;
        d[5 * 10 + 5] = 0.9;
        let out = nms(&plane(10, 10, d), 0.7, 3);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x, out[0].y), (3, 5));
    }

    #[test]
    fn below_threshold_ignored() {
        let out = nms(&plane(4, 4, vec![0.7; 16]), 0.7, 1);
        assert!(out.is_empty());
    }

    #[test]
    fn pyramid_ladders() {
        let short = |w, h| pyramid_sizes(w, h, std::f64::consts::SQRT_2, 256).iter().map(|&(w, h)| w.min(h)).collect::<Vec<_>>();
        assert_eq!(short(512, 512), vec![512, 362, 256]);
        assert_eq!(short(200, 200), vec![200]);
        assert_eq!(short(640, 480), vec![480, 339]);
        assert_eq!(pyramid_sizes(640, 480, std::f64::consts::SQRT_2, 256)[1], (453, 339));
    }

    #[test]
    fn feature_file_round_trip() {
        let f = MultiFeatureSet {
            width: 40,
            height: 30,
            descriptor_dim: 2,
            sets: vec![
                FeatureSet {
                    keypoints: vec![Keypoint {
                        x: 1.5,
                        y: 2.25,
                        score: 0.8,
                        scale: 1,
                        set: 0,
                    }],
                    descriptors: vec![0.6, 0.8],
                },
                FeatureSet::default(),
            ],
        };
        let bytes = f.encode();
        assert_eq!(bytes.len(), 4 + 20 + 4 + (16 + 8) + 4);
        let back = MultiFeatureSet::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.encode(), bytes);
        assert!(matches!(MultiFeatureSet::decode(&bytes[..bytes.len() - 1]), Err(ExtractError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MultiFeatureSet::decode(&bad), Err(ExtractError::BadMagic(_))));
    }

    fn low_threshold() -> ExtractConfig {
        ExtractConfig {
            budget: 40,
            threshold: 0.0,
            min_dim: 32,
            ..ExtractConfig::default()
        }
    }

    #[test]
    fn extraction_respects_budget_and_is_deterministic() {
        let w = ModelWeights::<f32>::init(ModelConfig::tiny(8, 2), 3).unwrap();
        let img = crate::synthwarp::generate_texture(4, 64, 48);
        let cfg = low_threshold();
        let a = extract(&img, &w, &cfg).unwrap();
        let b = extract(&img, &w, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_sets(), 2);
        for (n, s) in a.sets.iter().enumerate() {
            assert!(s.len() <= 20);
            assert!(!s.is_empty());
            for (i, k) in s.keypoints.iter().enumerate() {
                assert_eq!(k.set, n);
                assert!(k.x >= 0.0 && k.x < 64.0 && k.y >= 0.0 && k.y < 48.0);
                let norm: f32 = s.descriptor(i, 8).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5);
            }
            for win in s.keypoints.windows(2) {
                assert!(win[0].score >= win[1].score);
            }
        }
    }

    #[test]
    fn set_and_budget_checks() {
        let w = ModelWeights::<f32>::init(ModelConfig::tiny(8, 4), 3).unwrap();
        let img = crate::synthwarp::generate_texture(4, 32, 32);
        assert!(matches!(
            extract_sets(&img, &w, &low_threshold(), 2),
            Err(ExtractError::SetMismatch { model: 4, requested: 2 })
        ));
        let cfg = ExtractConfig {
            budget: 3,
            ..low_threshold()
        };
        assert!(matches!(extract(&img, &w, &cfg), Err(ExtractError::BudgetTooSmall { .. })));
        let tiny = crate::synthwarp::generate_texture(4, 5, 5);
        assert!(matches!(extract(&tiny, &w, &low_threshold()), Err(ExtractError::ImageTooSmall { .. })));
    }
}
