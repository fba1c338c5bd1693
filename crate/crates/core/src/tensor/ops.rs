//! Elementwise maps, reductions and indexing ops.

use super::{Scalar, Tensor};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    );
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise map whose derivative is expressed through input and output values.
    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        if other.numel() == 1 && self.numel() != 1 {
            return self.add_tensor_scalar(other);
        }
        if self.numel() == 1 && other.numel() != 1 {
            return other.add_tensor_scalar(self);
        }
        same_shape("add", self, other);
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    fn add_tensor_scalar(&self, s: &Tensor<T>) -> Tensor<T> {
        let v = s.item();
        let data = self.data().iter().map(|&a| a + v).collect();
        Tensor::from_op(
            "add_scalar_tensor",
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(vec![g.iter().copied().sum()])]),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        if other.numel() == 1 && self.numel() != 1 {
            return self.mul_tensor_scalar(other);
        }
        if self.numel() == 1 && other.numel() != 1 {
            return other.mul_tensor_scalar(self);
        }
        same_shape("mul", self, other);
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = (a.requires_grad()).then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect());
                let gb = (b.requires_grad()).then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        )
    }

    fn mul_tensor_scalar(&self, s: &Tensor<T>) -> Tensor<T> {
        let v = s.item();
        let data = self.data().iter().map(|&a| a * v).collect();
        let x = self.clone();
        Tensor::from_op(
            "mul_scalar_tensor",
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |g, _| {
                let gs = g.iter().zip(x.data()).map(|(&g, &x)| g * x).sum();
                vec![Some(g.iter().map(|&g| g * v).collect()), Some(vec![gs])]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&g| g * c).collect())]),
        )
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64) -> Tensor<T> {
        self.neg().add_scalar(c)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Logistic squash onto (0, 1).
    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Rational squash `0.5 + 0.5 x / (1 + |x|)`, also onto (0, 1).
    pub fn softsign01(&self) -> Tensor<T> {
        let half = T::of(0.5);
        self.unary(
            "softsign01",
            move |x| half + half * x / (T::one() + x.abs()),
            |x, _| {
                let d = T::one() + x.abs();
                T::of(0.5) / (d * d)
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        assert!(n > 0, "mean of an empty tensor");
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Mean over the leading axis: `[A, rest..] -> [rest..]`.
    pub fn mean_axis0(&self) -> Tensor<T> {
        let shape = self.shape();
        assert!(!shape.is_empty(), "mean_axis0 on a scalar");
        let a = shape[0];
        assert!(a > 0, "mean over an empty axis");
        let rest: usize = shape[1..].iter().product();
        let inv = T::of(1.0 / a as f64);
        let mut out = vec![T::zero(); rest];
        for chunk in self.data().chunks_exact(rest.max(1)).take(a) {
            out.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        Tensor::from_op(
            "mean_axis0",
            shape[1..].to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(a * rest);
                for _ in 0..a {
                    gx.extend(g.iter().map(|&g| g * inv));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Channel `n` of a `[C, H, W]` volume as an `[H, W]` plane.
    pub fn channel(&self, n: usize) -> Tensor<T> {
        let [c, h, w] = self.dims3("channel");
        assert!(n < c, "channel {n} out of range for {c} channels");
        let plane = h * w;
        let data = self.data()[n * plane..(n + 1) * plane].to_vec();
        Tensor::from_op(
            "channel",
            vec![h, w],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); c * plane];
                gx[n * plane..(n + 1) * plane].copy_from_slice(g);
                vec![Some(gx)]
            }),
        )
    }

    /// `[C, H, W] * [H, W]`, the plane broadcast over channels.
    pub fn mul_plane(&self, plane: &Tensor<T>) -> Tensor<T> {
        let [c, h, w] = self.dims3("mul_plane");
        assert_eq!(
            plane.shape(),
            &[h, w],
            "mul_plane: plane shape {:?} vs volume {:?}",
            plane.shape(),
            self.shape()
        );
        let hw = h * w;
        let mut data = Vec::with_capacity(c * hw);
        for chunk in self.data().chunks_exact(hw) {
            data.extend(chunk.iter().zip(plane.data()).map(|(&x, &p)| x * p));
        }
        let (x, p) = (self.clone(), plane.clone());
        Tensor::from_op(
            "mul_plane",
            self.shape().to_vec(),
            data,
            vec![self.clone(), plane.clone()],
            Box::new(move |g, _| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = Vec::with_capacity(c * hw);
                    for gc in g.chunks_exact(hw) {
                        gx.extend(gc.iter().zip(p.data()).map(|(&g, &p)| g * p));
                    }
                    gx
                });
                let gp = p.requires_grad().then(|| {
                    let mut gp = vec![T::zero(); hw];
                    for (gc, xc) in g.chunks_exact(hw).zip(x.data().chunks_exact(hw)) {
                        gp.iter_mut().zip(gc.iter().zip(xc)).for_each(|(o, (&g, &x))| *o += g * x);
                    }
                    gp
                });
                vec![gx, gp]
            }),
        )
    }

    /// Per-pixel L2 normalization along channels of a `[C, H, W]` volume:
    /// `x / sqrt(sum_c x_c^2 + eps)`.
    pub fn l2_normalize_channels(&self, eps: f64) -> Tensor<T> {
        let [c, h, w] = self.dims3("l2_normalize_channels");
        let hw = h * w;
        let eps = T::of(eps);
        let x = self.data();
        let mut sumsq = vec![T::zero(); hw];
        for xc in x.chunks_exact(hw) {
            sumsq.iter_mut().zip(xc).for_each(|(s, &v)| *s += v * v);
        }
        let inv_norm: Vec<T> = sumsq.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut data = Vec::with_capacity(c * hw);
        for xc in x.chunks_exact(hw) {
            data.extend(xc.iter().zip(&inv_norm).map(|(&v, &n)| v * n));
        }
        Tensor::from_op(
            "l2_normalize_channels",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                // dx = (g - y * <g, y>) / n
                let mut dot = vec![T::zero(); hw];
                for (gc, yc) in g.chunks_exact(hw).zip(y.chunks_exact(hw)) {
                    dot.iter_mut().zip(gc.iter().zip(yc)).for_each(|(d, (&g, &y))| *d += g * y);
                }
                let mut gx = Vec::with_capacity(c * hw);
                for (gc, yc) in g.chunks_exact(hw).zip(y.chunks_exact(hw)) {
                    for p in 0..hw {
                        gx.push((gc[p] - yc[p] * dot[p]) * inv_norm[p]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Per-channel normalization of a `[C, H, W]` volume to zero mean and unit
    /// variance over the spatial domain.
    pub fn instance_norm(&self, eps: f64) -> Tensor<T> {
        let [_, h, w] = self.dims3("instance_norm");
        let hw = h * w;
        let n = T::of(hw as f64);
        let eps = T::of(eps);
        let mut data = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::new();
        for xc in self.data().chunks_exact(hw) {
            let mean = xc.iter().copied().sum::<T>() / n;
            let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(xc.iter().map(|&v| (v - mean) * is));
        }
        Tensor::from_op(
            "instance_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = Vec::with_capacity(g.len());
                for ((gc, yc), &is) in g.chunks_exact(hw).zip(y.chunks_exact(hw)).zip(&inv_std) {
                    let gm = gc.iter().copied().sum::<T>() / n;
                    let gy = gc.iter().zip(yc).map(|(&g, &y)| g * y).sum::<T>() / n;
                    gx.extend(gc.iter().zip(yc).map(|(&g, &y)| (g - gm - y * gy) * is));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Gathers the channel columns of a `[C, H, W]` volume at `(x, y)` pixels
    /// into a `[K, C]` matrix.
    pub fn gather_pixels(&self, pixels: &[(usize, usize)]) -> Tensor<T> {
        let [c, h, w] = self.dims3("gather_pixels");
        let hw = h * w;
        let idx: Vec<usize> = pixels
            .iter()
            .map(|&(x, y)| {
                assert!(x < w && y < h, "gather_pixels: ({x}, {y}) outside {w}x{h}");
                y * w + x
            })
            .collect();
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &p in &idx {
            data.extend((0..c).map(|ch| src[ch * hw + p]));
        }
        let k = idx.len();
        Tensor::from_op(
            "gather_pixels",
            vec![k, c],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); c * hw];
                for (row, &p) in g.chunks_exact(c).zip(&idx) {
                    for (ch, &v) in row.iter().enumerate() {
                        gx[ch * hw + p] += v;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Selects rows of a `[R, C]` matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor<T> {
        let [r, c] = self.dims2("gather_rows");
        let rows = rows.to_vec();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            assert!(i < r, "gather_rows: row {i} out of {r}");
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Tensor::from_op(
            "gather_rows",
            vec![rows.len(), c],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); r * c];
                for (gr, &i) in g.chunks_exact(c).zip(&rows) {
                    gx[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(o, &v)| *o += v);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row-wise inner products of two `[K, C]` matrices, giving `[K]`.
    pub fn row_dot(&self, other: &Tensor<T>) -> Tensor<T> {
        same_shape("row_dot", self, other);
        let [k, c] = self.dims2("row_dot");
        let data = self
            .data()
            .chunks_exact(c.max(1))
            .zip(other.data().chunks_exact(c.max(1)))
            .take(k)
            .map(|(a, b)| a.iter().zip(b).map(|(&a, &b)| a * b).sum())
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "row_dot",
            vec![k],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let scale = |m: &Tensor<T>| -> Vec<T> {
                    m.data()
                        .chunks_exact(c)
                        .zip(g)
                        .flat_map(|(row, &g)| row.iter().map(move |&v| v * g))
                        .collect()
                };
                let ga = a.requires_grad().then(|| scale(&b));
                let gb = b.requires_grad().then(|| scale(&a));
                vec![ga, gb]
            }),
        )
    }

    pub(crate) fn dims3(&self, op: &str) -> [usize; 3] {
        match self.shape() {
            &[c, h, w] => [c, h, w],
            s => panic!("{op}: expected a [C, H, W] tensor, got {s:?}"),
        }
    }

    pub(crate) fn dims2(&self, op: &str) -> [usize; 2] {
        match self.shape() {
            &[a, b] => [a, b],
            s => panic!("{op}: expected a 2-d tensor, got {s:?}"),
        }
    }
}
