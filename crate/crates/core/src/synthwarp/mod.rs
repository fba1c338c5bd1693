//! Self-supervision data: random homographies, image/point/heatmap warping
//! with validity masks, photometric distortion and training-pair sampling.

mod homography;
mod photometric;
pub mod texture;

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Image;
use crate::tensor::{Scalar, Tensor};

pub use homography::{overlap_fraction, sample_homography, visibility_mask, Homography, HomographyLimits, MIN_W};
pub use photometric::{photometric_augment, PhotometricParams};
pub use texture::{checkerboard, flat_band_image, generate_texture};

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("singular homography: {0}")]
    Singular(String),
    #[error("no homography met the overlap constraint in {0} draws")]
    SamplingFailed(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no corpus image is at least {0}px on each side")]
    NoUsableImage(usize),
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
}

/// Inverse-maps every target pixel through `g` and samples `image` bilinearly.
/// The mask marks target pixels whose preimage lies inside the source frame;
/// other pixels are zero.
pub fn warp_image(image: &Image, g: &Homography, out_w: usize, out_h: usize) -> (Image, Vec<bool>) {
    warp_image_offset(image, g, out_w, out_h, (0.0, 0.0))
}

/// As [`warp_image`], with the source frame of `g` starting at `offset` inside `image`.
fn warp_image_offset(image: &Image, g: &Homography, out_w: usize, out_h: usize, offset: (f64, f64)) -> (Image, Vec<bool>) {
    let inv = g.inverse();
    let mut out = Image::new(out_w, out_h);
    let mut mask = vec![false; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let Some((u, v)) = inv.apply(x as f64, y as f64) else {
                continue;
            };
            if let Some(rgb) = image.sample(u + offset.0, v + offset.1) {
                out.set_rgb(x, y, rgb);
                mask[y * out_w + x] = true;
            }
        }
    }
    (out, mask)
}

/// Homogeneous transform with perspective divide; points sent to infinity come back `None`.
pub fn warp_points(points: &[(f64, f64)], g: &Homography) -> Vec<Option<(f64, f64)>> {
    points.iter().map(|&(x, y)| g.apply(x, y)).collect()
}

/// Pulls a `[N, H', W']` heatmap volume defined on the warped frame back onto
/// the `out_h x out_w` source frame: `out(p) = heat(g(p))`, bilinear. Returns
/// the resampled volume and the mask of source pixels whose image lies inside
/// the warped frame. Differentiable with respect to `heat`.
pub fn warp_heatmap<T: Scalar>(heat: &Tensor<T>, g: &Homography, out_h: usize, out_w: usize) -> (Tensor<T>, Vec<bool>) {
    let [_, h, w] = match heat.shape() {
        &[n, h, w] => [n, h, w],
        s => panic!("warp_heatmap: expected [N, H, W], got {s:?}"),
    };
    let mut coords = Vec::with_capacity(out_h * out_w);
    let mut mask = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let c = g
                .apply(x as f64, y as f64)
                .filter(|&(u, v)| homography::inside(u, v, w, h));
            mask.push(c.is_some());
            coords.push(c);
        }
    }
    (heat.bilinear_sample(&coords, out_h, out_w), mask)
}

/// Images available for pair sampling.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub images: Vec<Image>,
}

impl Corpus {
    pub fn new(images: Vec<Image>) -> Self {
        Self { images }
    }

    /// Every PNG/PPM file directly inside `dir`, in name order.
    pub fn from_dir(dir: &Path) -> Result<Self, WarpError> {
        let paths = crate::io::list_images(dir)?;
        let images = paths
            .iter()
            .map(|p| crate::io::load_image(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { images })
    }

    /// `count` generated textures of `size x size`, image `i` seeded with `seed + i`.
    pub fn synthetic(seed: u64, count: usize, size: usize) -> Self {
        Self {
            images: (0..count).map(|i| generate_texture(seed.wrapping_add(i as u64), size, size)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub patch_size: usize,
    pub limits: HomographyLimits,
    /// Photometric distortion strength in [0, 1], applied independently to both patches.
    pub photometric: f32,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            patch_size: 192,
            limits: HomographyLimits::default(),
            photometric: 1.0,
        }
    }
}

/// A source patch, its warped counterpart and the homography between them.
#[derive(Clone, Debug)]
pub struct WarpSample {
    pub source: Image,
    pub warped: Image,
    /// Maps source-patch pixels to warped-patch pixels.
    pub homography: Homography,
    /// Source pixels whose image under `homography` is inside the warped patch.
    pub source_mask: Vec<bool>,
    /// Warped pixels whose preimage is inside the source patch.
    pub warped_mask: Vec<bool>,
}

impl WarpSample {
    pub fn overlap(&self) -> f64 {
        self.source_mask.iter().filter(|&&m| m).count() as f64 / self.source_mask.len().max(1) as f64
    }
}

/// Draws an image, crops a patch, warps it by a random homography and applies
/// independent photometric distortions. Context around the crop is used for
/// the warped patch where the image has it.
pub fn sample_training_pair(corpus: &Corpus, seed: u64, cfg: &PairConfig) -> Result<WarpSample, WarpError> {
    if corpus.is_empty() {
        return Err(WarpError::EmptyCorpus);
    }
    let p = cfg.patch_size;
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let img = &corpus.images[i];
            let ok = img.width() >= p && img.height() >= p;
            if !ok {
                warn!("skipping corpus image {i}: {}x{} is smaller than the {p}px patch", img.width(), img.height());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(WarpError::NoUsableImage(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = &corpus.images[usable[rng.gen_range(0..usable.len())]];

    // Context margin on each side of the patch, as much as the image allows up to p/4.
    let mx = ((img.width() - p) / 2).min(p / 4);
    let my = ((img.height() - p) / 2).min(p / 4);
    let ox = rng.gen_range(0..=img.width() - p - 2 * mx);
    let oy = rng.gen_range(0..=img.height() - p - 2 * my);
    let region = img.crop(ox, oy, p + 2 * mx, p + 2 * my);
    let source = region.crop(mx, my, p, p);

    let g = sample_homography(&mut rng, &cfg.limits, p, p)?;
    let (warped, _) = warp_image_offset(&region, &g, p, p, (mx as f64, my as f64));
    let source_mask = visibility_mask(&g, p, p, p, p);
    let warped_mask = visibility_mask(&g.inverse(), p, p, p, p);

    let s1 = rng.gen();
    let s2 = rng.gen();
    Ok(WarpSample {
        source: photometric_augment(&source, s1, cfg.photometric),
        warped: photometric_augment(&warped, s2, cfg.photometric),
        homography: g,
        source_mask,
        warped_mask,
    })
}
