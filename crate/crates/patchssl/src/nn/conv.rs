use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, WN_EPS};

/// Unfold an NHWC batch into GEMM rows.
///
/// Row `(b, oh, ow)` holds the receptive field flattened as
/// `[kh, kw, in_ch]`; out-of-bounds taps (zero padding) stay zero.
pub fn im2col<F: Scalar>(
    x: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, usize, usize) {
    let (b, h, w, c) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<F>::zeros((b * oh * ow, kh * kw * c));
    let xs = x.as_slice().expect("im2col: input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = kh * kw * c;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ki in 0..kh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ki * kw + kj) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Fold GEMM rows back onto an NHWC batch, accumulating overlaps.
/// Adjoint of [`im2col`]; used for the convolution input gradient.
pub fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, h, w, c) = shape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array4::<F>::zeros((b, h, w, c));
    let ds = dcols.as_slice().expect("col2im: standard layout");
    let xs = dx.as_slice_mut().unwrap();
    let row_len = kh * kw * c;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ki in 0..kh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ki * kw + kj) * c;
                        for k in 0..c {
                            xs[dst + k] += ds[src + k];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Effective row-normalized weights `w[o] = g[o] * v[o] / ||v[o]||`.
pub(crate) fn wn_rows_effective<F: Scalar>(v: &Array2<F>, g: &Array1<F>) -> Array2<F> {
    let mut w = v.clone();
    for (o, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b);
        let norm = (norm + F::from_f64(WN_EPS)).sqrt();
        let scale = g[o] / norm;
        row.mapv_inplace(|x| x * scale);
    }
    w
}

/// Pull a gradient on the effective weights back onto `(v, g)`.
/// Linear in `dw`, so per-batch contributions may be accumulated directly.
pub(crate) fn wn_rows_backward<F: Scalar>(
    v: &Array2<F>,
    g: &Array1<F>,
    dw: &Array2<F>,
    dv: &mut Array2<F>,
    dg: &mut Array1<F>,
) {
    for o in 0..v.nrows() {
        let vr = v.row(o);
        let dr = dw.row(o);
        let norm_sq = vr.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b);
        let norm = (norm_sq + F::from_f64(WN_EPS)).sqrt();
        let dot = vr
            .iter()
            .zip(dr.iter())
            .map(|(&a, &b)| a * b)
            .fold(F::zero(), |a, b| a + b);
        dg[o] += dot / norm;
        let scale = g[o] / norm;
        let proj = dot / (norm * norm);
        let mut dvr = dv.row_mut(o);
        for k in 0..vr.len() {
            dvr[k] += scale * (dr[k] - proj * vr[k]);
        }
    }
}

fn gaussian<F: Scalar>(shape: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let dist = Normal::new(0.0, sigma).expect("sigma must be positive");
    (0..shape)
        .map(|_| F::from_f64(dist.sample(rng)))
        .collect()
}

/// Weight-normalized 2-D convolution (NHWC).
///
/// Stores the direction tensor `v` flattened to `[out, kh*kw*in]`, a scale
/// `g` and bias `b` per output channel. The effective kernel is
/// `g * v / ||v||` row-wise.
#[derive(Debug, Clone)]
pub struct WnConv2d<F: Scalar> {
    pub v: Array2<F>,
    pub g: Array1<F>,
    pub b: Array1<F>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F: Scalar> {
    cols: Array2<F>,
    in_shape: (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
}

impl<F: Scalar> WnConv2d<F> {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kki = kernel * kernel * in_ch;
        let v = Array2::from_shape_vec((out_ch, kki), gaussian(out_ch * kki, sigma, rng)).unwrap();
        WnConv2d {
            v,
            g: Array1::ones(out_ch),
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        WnConv2d {
            v: Array2::zeros(self.v.dim()),
            g: Array1::zeros(self.g.dim()),
            b: Array1::zeros(self.b.dim()),
            ..*self
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, _, _, c) = x.dim();
        debug_assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let w = wn_rows_effective(&self.v, &self.g);
        let (cols, oh, ow) = im2col(x, self.kernel, self.kernel, self.stride, self.pad);
        let mut out2 = cols.dot(&w.t());
        for mut row in out2.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        let out = out2
            .into_shape_with_order((b, oh, ow, self.out_ch))
            .unwrap();
        let cache = ConvCache {
            cols,
            in_shape: x.dim(),
            oh,
            ow,
        };
        (out, cache)
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when
    /// given (skip it on paths that only need the input gradient).
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        dout: &Array4<F>,
        grads: Option<&mut Self>,
    ) -> Array4<F> {
        let (b, _, _, _) = cache.in_shape;
        let rows = b * cache.oh * cache.ow;
        let dout2 = dout
            .view()
            .into_shape_with_order((rows, self.out_ch))
            .unwrap();
        if let Some(gr) = grads {
            let dw = dout2.t().dot(&cache.cols);
            wn_rows_backward(&self.v, &self.g, &dw, &mut gr.v, &mut gr.g);
            gr.b += &dout2.sum_axis(Axis(0));
        }
        let w = wn_rows_effective(&self.v, &self.g);
        let dcols = dout2.dot(&w);
        col2im(
            &dcols,
            cache.in_shape,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, stride 1, no pad: cols are just the pixels.
        let x = Array::from_shape_fn((1, 3, 3, 2), |(_, h, w, c)| (h * 6 + w * 2 + c) as f64);
        let (cols, oh, ow) = im2col(&x, 1, 1, 1, 0);
        assert_eq!((oh, ow), (3, 3));
        assert_eq!(
            cols.as_slice().unwrap(),
            x.as_slice().unwrap(),
            "1x1 im2col must be a reshape"
        );
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut r = rng();
        let x = Array::from_shape_fn((2, 5, 4, 3), |_| r.random::<f64>() - 0.5);
        let (cols, oh, ow) = im2col(&x, 3, 3, 2, 1);
        let y = Array::from_shape_fn((2 * oh * ow, 27), |_| r.random::<f64>() - 0.5);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, x.dim(), 3, 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn conv_grad_matches_finite_differences() {
        let mut r = rng();
        let mut layer = WnConv2d::<f64>::init(2, 3, 3, 2, 1, 0.2, &mut r);
        let x = Array::from_shape_fn((2, 6, 6, 2), |_| r.random::<f64>() - 0.5);
        // Loss = sum of outputs weighted by fixed random coefficients.
        let (out, _) = layer.forward(&x);
        let coef = Array::from_shape_fn(out.dim(), |_| r.random::<f64>() - 0.5);

        let loss = |l: &WnConv2d<f64>, x: &Array4<f64>| -> f64 {
            let (o, _) = l.forward(x);
            (&o * &coef).sum()
        };

        let (out, cache) = layer.forward(&x);
        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &coef, Some(&mut grads));
        assert_eq!(out.dim(), coef.dim());

        let eps = 1e-6;
        // input gradient
        let mut xp = x.clone();
        for idx in [(0, 0, 0, 0), (1, 3, 2, 1), (0, 5, 5, 0)] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = loss(&layer, &xp);
            xp[idx] = orig - eps;
            let dn = loss(&layer, &xp);
            xp[idx] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-7, "dx mismatch at {idx:?}");
        }
        // v, g, b gradients at a few coordinates
        for (i, j) in [(0, 0), (2, 5), (1, 17)] {
            let orig = layer.v[(i, j)];
            layer.v[(i, j)] = orig + eps;
            let up = loss(&layer, &x);
            layer.v[(i, j)] = orig - eps;
            let dn = loss(&layer, &x);
            layer.v[(i, j)] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!(
                (num - grads.v[(i, j)]).abs() < 1e-6,
                "dv mismatch at ({i},{j}): num={num} got={}",
                grads.v[(i, j)]
            );
        }
        for i in 0..3 {
            let orig = layer.g[i];
            layer.g[i] = orig + eps;
            let up = loss(&layer, &x);
            layer.g[i] = orig - eps;
            let dn = loss(&layer, &x);
            layer.g[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - grads.g[i]).abs() < 1e-6, "dg mismatch at {i}");
            let origb = layer.b[i];
            layer.b[i] = origb + eps;
            let up = loss(&layer, &x);
            layer.b[i] = origb - eps;
            let dn = loss(&layer, &x);
            layer.b[i] = origb;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - grads.b[i]).abs() < 1e-6, "db mismatch at {i}");
        }
    }
}
