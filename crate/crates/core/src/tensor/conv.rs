//! Dilated 2-d cross-correlation via im2col + GEMM.

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.padding == 0
    }

    /// Range of output columns `ox` whose input column `ox + off - padding` is inside the image.
    fn valid_x(&self, off: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(off);
        let hi = (self.w + self.padding).saturating_sub(off).min(self.ow);
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, off: usize) -> Option<usize> {
        let iy = (oy + off).checked_sub(self.padding)?;
        (iy < self.h).then_some(iy)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.cols();
    let mut cols = vec![T::zero(); g.rows() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                let (x0, x1) = g.valid_x(kx * g.dilation);
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky * g.dilation) else {
                        continue;
                    };
                    let ix0 = x0 + kx * g.dilation - g.padding;
                    row[oy * g.ow + x0..oy * g.ow + x1]
                        .copy_from_slice(&plane[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let p = g.cols();
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * p..(r + 1) * p];
                let (x0, x1) = g.valid_x(kx * g.dilation);
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky * g.dilation) else {
                        continue;
                    };
                    let ix0 = x0 + kx * g.dilation - g.padding;
                    plane[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[oy * g.ow + x0..oy * g.ow + x1])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
    x
}

impl<T: Scalar> Tensor<T> {
    /// Dilated cross-correlation of a `[Cin, H, W]` input with a
    /// `[Cout, Cin, k, k]` kernel plus per-channel bias.
    ///
    /// Output is `[Cout, H', W']` with `H' = H + 2 padding - dilation (k - 1)`;
    /// `padding = dilation (k - 1) / 2` keeps the spatial size.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>, dilation: usize, padding: usize) -> Tensor<T> {
        let [cin, h, w] = self.dims3("conv2d");
        let (cout, k) = match weight.shape() {
            &[co, ci, kh, kw] => {
                assert_eq!(ci, cin, "conv2d: input has {cin} channels, kernel expects {ci}");
                assert_eq!(kh, kw, "conv2d: kernel must be square");
                (co, kh)
            }
            s => panic!("conv2d: kernel must be [Cout, Cin, k, k], got {s:?}"),
        };
        assert!(k % 2 == 1, "conv2d: kernel size {k} must be odd");
        assert!(dilation >= 1, "conv2d: dilation must be positive");
        assert_eq!(bias.shape(), &[cout], "conv2d: bias must be [{cout}]");
        let span = dilation * (k - 1);
        assert!(h + 2 * padding > span && w + 2 * padding > span, "conv2d: input {h}x{w} too small");
        let g = Geometry {
            cin,
            h,
            w,
            k,
            dilation,
            padding,
            oh: h + 2 * padding - span,
            ow: w + 2 * padding - span,
        };
        let (kk, p) = (g.rows(), g.cols());

        let mut out = Vec::with_capacity(cout * p);
        for &b in bias.data() {
            out.extend(std::iter::repeat(b).take(p));
        }
        let owned_cols;
        let cols: &[T] = if g.is_pointwise() {
            self.data()
        } else {
            owned_cols = im2col(self.data(), &g);
            &owned_cols
        };
        T::gemm(cout, kk, p, T::one(), weight.data(), kk as isize, 1, cols, p as isize, 1, T::one(), &mut out, p as isize, 1);

        let (x, wt) = (self.clone(), weight.clone());
        let need_b = bias.requires_grad();
        Tensor::from_op(
            "conv2d",
            vec![cout, g.oh, g.ow],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |gout, _| {
                let need_x = x.requires_grad();
                let need_w = wt.requires_grad();
                let owned;
                let cols: &[T] = if !need_w {
                    &[]
                } else if g.is_pointwise() {
                    x.data()
                } else {
                    owned = im2col(x.data(), &g);
                    &owned
                };
                let gw = need_w.then(|| {
                    let mut gw = vec![T::zero(); cout * kk];
                    // gout [cout, p] * cols^T [p, kk]
                    T::gemm(cout, p, kk, T::one(), gout, p as isize, 1, cols, 1, p as isize, T::zero(), &mut gw, kk as isize, 1);
                    gw
                });
                let gx = need_x.then(|| {
                    let mut gcols = vec![T::zero(); kk * p];
                    // W^T [kk, cout] * gout [cout, p]
                    T::gemm(kk, cout, p, T::one(), wt.data(), 1, kk as isize, gout, p as isize, 1, T::zero(), &mut gcols, p as isize, 1);
                    if g.is_pointwise() {
                        gcols
                    } else {
                        col2im(&gcols, &g)
                    }
                });
                let gb = need_b.then(|| gout.chunks_exact(p.max(1)).take(cout).map(|c| c.iter().copied().sum()).collect());
                vec![gx, gw, gb]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_sum_geometry() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = x.conv2d(&w, &b, 1, 1);
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
    }

    #[test]
    fn delta_reads_flipped_kernel_index() {
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = Tensor::<f64>::new(&[1, 5, 5], img);
        let w = Tensor::<f64>::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let b = Tensor::<f64>::zeros(&[1]);
        let y = x.conv2d(&w, &b, 2, 2);
        assert_eq!(y.data()[12], 5.0); // weight[1][1]
        assert_eq!(y.data()[0], 9.0); // weight[2][2]
    }

    #[test]
    fn valid_padding_shrinks_output() {
        let x = Tensor::<f64>::full(&[2, 6, 5], 1.0);
        let w = Tensor::<f64>::full(&[3, 2, 3, 3], 1.0);
        let b = Tensor::<f64>::full(&[3], 0.5);
        let y = x.conv2d(&w, &b, 1, 0);
        assert_eq!(y.shape(), &[3, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 18.5));
    }

    #[test]
    #[should_panic(expected = "input has 2 channels")]
    fn channel_mismatch_is_a_contract_violation() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let _ = x.conv2d(&w, &Tensor::zeros(&[1]), 1, 1);
    }
}
