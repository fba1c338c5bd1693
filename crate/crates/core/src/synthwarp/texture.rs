//! Procedural training and test imagery: coloured value noise, filled
//! polygons and discs, and flat constant-colour bands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::Image;

const NOISE_CONTRAST: f32 = 2.5;

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise, one independent field per colour channel.
fn value_noise(rng: &mut impl Rng, img: &mut Image, base_period: f32, octaves: usize) {
    let (w, h) = (img.width(), img.height());
    for c in 0..3 {
        let mut acc = vec![0.0f32; w * h];
        let mut period = base_period;
        let mut amp = 1.0f32;
        let mut total = 0.0f32;
        for _ in 0..octaves {
            let gw = (w as f32 / period).ceil() as usize + 2;
            let gh = (h as f32 / period).ceil() as usize + 2;
            let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.gen()).collect();
            for y in 0..h {
                let fy = y as f32 / period;
                let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
                for x in 0..w {
                    let fx = x as f32 / period;
                    let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                    let l = |i: usize, j: usize| lattice[j * gw + i];
                    let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
                    let bot = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
                    acc[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
            total += amp;
            amp *= 0.55;
            period = (period / 2.0).max(2.0);
        }
        // Averaging octaves pulls values toward 0.5; stretch them back out.
        for (dst, v) in img.plane_mut(c).iter_mut().zip(acc) {
            *dst = (0.5 + NOISE_CONTRAST * (v / total - 0.5)).clamp(0.0, 1.0);
        }
    }
}

fn random_colour(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Fills the convex polygon `pts` (counter-clockwise or clockwise).
fn fill_convex(img: &mut Image, pts: &[(f32, f32)], rgb: [f32; 3]) {
    let (w, h) = (img.width(), img.height());
    let xmin = pts.iter().map(|p| p.0).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let xmax = pts.iter().map(|p| p.0).fold(f32::NEG_INFINITY, f32::max).ceil().min((w - 1) as f32);
    let ymin = pts.iter().map(|p| p.1).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let ymax = pts.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max).ceil().min((h - 1) as f32);
    if xmax < 0.0 || ymax < 0.0 {
        return;
    }
    for y in ymin..=ymax as usize {
        for x in xmin..=xmax as usize {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut pos = false;
            let mut neg = false;
            for i in 0..pts.len() {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[(i + 1) % pts.len()];
                let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                pos |= cross > 0.0;
                neg |= cross < 0.0;
            }
            if !(pos && neg) {
                img.set_rgb(x, y, rgb);
            }
        }
    }
}

fn random_polygon(rng: &mut impl Rng, w: usize, h: usize) -> Vec<(f32, f32)> {
    let cx = rng.gen_range(0.0..w as f32);
    let cy = rng.gen_range(0.0..h as f32);
    let r = rng.gen_range(0.03..0.12) * w.min(h) as f32;
    let n = rng.gen_range(3..=6);
    let mut angles: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..std::f32::consts::TAU)).collect();
    angles.sort_by(f32::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let rr = r * rng.gen_range(0.6..1.0);
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect()
}

fn fill_disc(img: &mut Image, cx: f32, cy: f32, r: f32, rgb: [f32; 3]) {
    let (w, h) = (img.width() as f32, img.height() as f32);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = (cx + r).ceil().min(w - 1.0).max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = (cy + r).ceil().min(h - 1.0).max(0.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img.set_rgb(x, y, rgb);
            }
        }
    }
}

/// Textured background with shapes but no flat band.
fn textured(rng: &mut impl Rng, width: usize, height: usize) -> Image {
    let mut img = Image::new(width, height);
    let period = rng.gen_range(12.0..40.0);
    value_noise(rng, &mut img, period, 4);
    let shapes = rng.gen_range(20..40) * (width * height).div_ceil(128 * 128).max(1);
    for _ in 0..shapes {
        let colour = random_colour(rng);
        if rng.gen_bool(0.7) {
            let poly = random_polygon(rng, width, height);
            fill_convex(&mut img, &poly, colour);
        } else {
            let r = rng.gen_range(0.015..0.06) * width.min(height) as f32;
            fill_disc(
                &mut img,
                rng.gen_range(0.0..width as f32),
                rng.gen_range(0.0..height as f32),
                r,
                colour,
            );
        }
    }
    img
}

/// Training texture: coloured noise, random polygons and discs, and one flat
/// band of constant colour.
pub fn generate_texture(seed: u64, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = textured(&mut rng, width, height);
    {
        let colour = random_colour(&mut rng);
        let vertical = rng.gen_bool(0.5);
        let extent = if vertical { width } else { height };
        let thickness = ((rng.gen_range(0.06..0.12) * extent as f64) as usize).max(1);
        let start = rng.gen_range(0..=extent - thickness);
        if vertical {
            fill_rect(&mut img, start, 0, thickness, height, colour);
        } else {
            fill_rect(&mut img, 0, start, width, thickness, colour);
        }
    }
    img
}

fn fill_rect(img: &mut Image, x0: usize, y0: usize, w: usize, h: usize, rgb: [f32; 3]) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.set_rgb(x, y, rgb);
        }
    }
}

/// Textured image whose leftmost columns (a fraction `band` of the area) hold
/// one flat colour. Returns the image and the band mask (row-major).
pub fn flat_band_image(seed: u64, width: usize, height: usize, band: f64) -> (Image, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = textured(&mut rng, width, height);
    let cols = (band * width as f64).round() as usize;
    let colour = random_colour(&mut rng);
    fill_rect(&mut img, 0, 0, cols, height, colour);
    let mask = (0..width * height).map(|i| i % width < cols).collect();
    (img, mask)
}

/// Black and white checkerboard with `square`-pixel cells.
pub fn checkerboard(width: usize, height: usize, square: usize) -> Image {
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let v = if (x / square + y / square) % 2 == 0 { 1.0 } else { 0.0 };
            img.set_rgb(x, y, [v; 3]);
        }
    }
    img
}
