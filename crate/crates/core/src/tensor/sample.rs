//! Bilinear resampling of a volume at fixed continuous coordinates.

use super::{Scalar, Tensor};

/// Bilinear taps: four `(index, weight)` pairs into an `h x w` plane.
fn taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

impl<T: Scalar> Tensor<T> {
    /// Samples every channel of a `[C, H, W]` volume at `coords` (one `(x, y)`
    /// per output pixel, row-major over `out_h x out_w`). `None` entries produce
    /// zeros and receive no gradient. Coordinates are treated as constants.
    pub fn bilinear_sample(&self, coords: &[Option<(f64, f64)>], out_h: usize, out_w: usize) -> Tensor<T> {
        let [c, h, w] = self.dims3("bilinear_sample");
        assert_eq!(coords.len(), out_h * out_w, "bilinear_sample: coordinate count");
        assert!(h > 0 && w > 0, "bilinear_sample: empty source");
        let hw = h * w;
        let ohw = out_h * out_w;
        let stencil: Vec<Option<[(usize, T); 4]>> = coords
            .iter()
            .map(|c| c.map(|(x, y)| taps(x, y, h, w).map(|(i, wt)| (i, T::of(wt)))))
            .collect();
        let src = self.data();
        let mut out = vec![T::zero(); c * ohw];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            for (o, st) in out[ch * ohw..(ch + 1) * ohw].iter_mut().zip(&stencil) {
                if let Some(st) = st {
                    *o = st.iter().fold(T::zero(), |acc, &(i, wt)| acc + wt * plane[i]);
                }
            }
        }
        Tensor::from_op(
            "bilinear_sample",
            vec![c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    let dst = &mut gx[ch * hw..(ch + 1) * hw];
                    for (&go, st) in g[ch * ohw..(ch + 1) * ohw].iter().zip(&stencil) {
                        if let Some(st) = st {
                            for &(i, wt) in st {
                                dst[i] += wt * go;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinates_copy_values() {
        let src = Tensor::<f64>::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let coords = vec![Some((2.0, 1.0)), Some((0.0, 0.0)), None];
        let out = src.bilinear_sample(&coords, 1, 3);
        assert_eq!(out.data(), &[6.0, 1.0, 0.0]);
    }

    #[test]
    fn midpoint_interpolates() {
        let src = Tensor::<f64>::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let out = src.bilinear_sample(&[Some((0.5, 0.5))], 1, 1);
        assert_eq!(out.data(), &[1.5]);
    }
}
