//! Stride-1 patch pooling with windows clipped to the image domain.

use super::{Scalar, Tensor};

/// Clipped window `[lo, hi)` of half-width `r` around `i` on an axis of length `n`.
#[inline]
fn window(i: usize, r: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r + 1).min(n))
}

impl<T: Scalar> Tensor<T> {
    fn planes(&self, op: &str, size: usize) -> (usize, usize, usize) {
        let (c, h, w) = match self.shape() {
            &[h, w] => (1, h, w),
            &[c, h, w] => (c, h, w),
            s => panic!("{op}: expected [H, W] or [C, H, W], got {s:?}"),
        };
        assert!(size % 2 == 1, "{op}: window {size} must be odd");
        (c, h, w)
    }

    /// Per-pixel maximum over the clipped `size x size` window. The backward
    /// pass routes each gradient to the first maximal element in row-major order.
    pub fn max_pool2d(&self, size: usize) -> Tensor<T> {
        let (c, h, w) = self.planes("max_pool2d", size);
        let r = size / 2;
        let hw = h * w;
        let x = self.data();
        let mut out = Vec::with_capacity(c * hw);
        let mut argmax = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let plane = &x[ch * hw..(ch + 1) * hw];
            for i in 0..h {
                let (y0, y1) = window(i, r, h);
                for j in 0..w {
                    let (x0, x1) = window(j, r, w);
                    let mut best = y0 * w + x0;
                    for y in y0..y1 {
                        for (dx, &v) in plane[y * w + x0..y * w + x1].iter().enumerate() {
                            if v > plane[best] {
                                best = y * w + x0 + dx;
                            }
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(ch * hw + best);
                }
            }
        }
        let n = self.numel();
        Tensor::from_op(
            "max_pool2d",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n];
                for (&a, &g) in argmax.iter().zip(g) {
                    gx[a] += g;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Per-pixel mean over the clipped `size x size` window; the divisor is the
    /// number of in-image pixels.
    pub fn mean_pool2d(&self, size: usize) -> Tensor<T> {
        let (c, h, w) = self.planes("mean_pool2d", size);
        let r = size / 2;
        let hw = h * w;
        let x = self.data();
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let plane = &x[ch * hw..(ch + 1) * hw];
            for i in 0..h {
                let (y0, y1) = window(i, r, h);
                for j in 0..w {
                    let (x0, x1) = window(j, r, w);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for &v in &plane[y * w + x0..y * w + x1] {
                            s += v;
                        }
                    }
                    out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let n = self.numel();
        Tensor::from_op(
            "mean_pool2d",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n];
                for ch in 0..c {
                    let gp = &g[ch * hw..(ch + 1) * hw];
                    let dst = &mut gx[ch * hw..(ch + 1) * hw];
                    for i in 0..h {
                        let (y0, y1) = window(i, r, h);
                        for j in 0..w {
                            let (x0, x1) = window(j, r, w);
                            let share = gp[i * w + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                dst[y * w + x0..y * w + x1].iter_mut().for_each(|d| *d += share);
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
    fn max_pool_spreads_a_delta() {
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let y = Tensor::<f64>::new(&[5, 5], img).max_pool2d(3);
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(y.data()[i * 5 + j], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn mean_pool_corner_uses_clipped_count() {
        let y = Tensor::<f64>::full(&[5, 5], 1.0).mean_pool2d(3);
        assert_eq!(y.data()[0], 1.0);
        let z = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).mean_pool2d(3);
        assert!(z.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let x = Tensor::<f64>::param(&[1, 3], vec![2.0, 2.0, 1.0]);
        x.max_pool2d(3).sum().backward();
        // windows: {0,1} -> 0, {0,1,2} -> 0, {1,2} -> 1
        assert_eq!(x.grad().unwrap(), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn oversized_window_covers_the_whole_image() {
        let x = Tensor::<f64>::new(&[2, 2], vec![1.0, 4.0, 2.0, 3.0]);
        assert_eq!(x.max_pool2d(9).data(), &[4.0; 4]);
        assert_eq!(x.mean_pool2d(9).data(), &[2.5; 4]);
    }
}
