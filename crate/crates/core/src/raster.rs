//! Planar RGB images with values in [0, 1].

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Planar `[3, H, W]` storage.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..3 {
            img.plane_mut(c).fill(rgb[c]);
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "planar buffer size");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let (w, h) = (self.width, self.height);
        self.data[c * w * h + y * w + x] = v;
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    /// Bilinear sample of all channels at a continuous position; `None` when the
    /// point is outside `[0, W-1] x [0, H-1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let (w, h) = (self.width, self.height);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = self.plane(c);
            let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
            let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        assert!(x0 + width <= self.width && y0 + height <= self.height, "crop outside image");
        let mut out = Image::new(width, height);
        for c in 0..3 {
            for y in 0..height {
                let src = &self.plane(c)[(y0 + y) * self.width + x0..(y0 + y) * self.width + x0 + width];
                out.plane_mut(c)[y * width..(y + 1) * width].copy_from_slice(src);
            }
        }
        out
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        assert!(width > 0 && height > 0, "resize to an empty image");
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::new(width, height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let v = self.sample(fx, fy).expect("clamped inside");
                out.set_rgb(x, y, v);
            }
        }
        out
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (w, h) = (self.width, self.height);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let q = |c: usize| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_interpolates_and_rejects_outside() {
        let mut img = Image::new(2, 1);
        img.set_rgb(1, 0, [1.0, 0.5, 0.0]);
        assert_eq!(img.sample(0.5, 0.0), Some([0.5, 0.25, 0.0]));
        assert_eq!(img.sample(1.5, 0.0), None);
        assert_eq!(img.sample(-0.1, 0.0), None);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(7, 5, [0.25, 0.5, 0.75]);
        let r = img.resize(3, 4);
        assert!(r.plane(1).iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn crop_copies_region() {
        let mut img = Image::new(4, 4);
        img.set_rgb(2, 3, [1.0, 1.0, 1.0]);
        let c = img.crop(1, 2, 2, 2);
        assert_eq!(c.get(0, 1, 1), 1.0);
    }
}
