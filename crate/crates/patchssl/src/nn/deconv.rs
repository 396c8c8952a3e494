use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, WN_EPS};

/// Output size of a stride-`s` transposed convolution.
fn deconv_out(h: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (h - 1) * stride + kernel + out_pad - 2 * pad
}

/// Padding/output-padding pair that makes a stride-2 transposed conv an
/// exact 2x upsampler for the given kernel size.
pub(crate) fn doubling_geometry(kernel: usize) -> (usize, usize) {
    if kernel % 2 == 0 {
        ((kernel - 2) / 2, 0)
    } else {
        ((kernel - 1) / 2, 1)
    }
}

fn gaussian<F: Scalar>(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let dist = Normal::new(0.0, sigma).expect("sigma must be positive");
    (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
}

/// Scatter-add GEMM rows into the upsampled output grid.
fn scatter_cols<F: Scalar>(
    cols: &Array2<F>,
    in_dims: (usize, usize, usize),
    out: &mut Array4<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) {
    let (b, h, w) = in_dims;
    let (_, oh, ow, oc) = out.dim();
    let cs = cols.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let row_len = kernel * kernel * oc;
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..w {
                let row = ((bi * h + iy) * w + ix) * row_len;
                for ki in 0..kernel {
                    let oy = (iy * stride + ki) as isize - pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ox = (ix * stride + kj) as isize - pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let dst = ((bi * oh + oy as usize) * ow + ox as usize) * oc;
                        let src = row + (ki * kernel + kj) * oc;
                        for k in 0..oc {
                            os[dst + k] += cs[src + k];
                        }
                    }
                }
            }
        }
    }
}

/// Gather output-side gradients back onto GEMM rows (adjoint of
/// [`scatter_cols`]).
fn gather_cols<F: Scalar>(
    dout: &Array4<F>,
    in_dims: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (b, h, w) = in_dims;
    let (_, oh, ow, oc) = dout.dim();
    let row_len = kernel * kernel * oc;
    let mut dcols = Array2::<F>::zeros((b * h * w, row_len));
    let ds = dout.as_slice().unwrap();
    let cs = dcols.as_slice_mut().unwrap();
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..w {
                let row = ((bi * h + iy) * w + ix) * row_len;
                for ki in 0..kernel {
                    let oy = (iy * stride + ki) as isize - pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ox = (ix * stride + kj) as isize - pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let src = ((bi * oh + oy as usize) * ow + ox as usize) * oc;
                        let dst = row + (ki * kernel + kj) * oc;
                        cs[dst..dst + oc].copy_from_slice(&ds[src..src + oc]);
                    }
                }
            }
        }
    }
    dcols
}

/// Plain transposed 2-D convolution (NHWC). Weight stored as
/// `[in, kh*kw*out]` so forward is one GEMM plus a scatter.
#[derive(Debug, Clone)]
pub struct Deconv2d<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

pub struct DeconvCache<F: Scalar> {
    x2: Array2<F>,
    in_dims: (usize, usize, usize),
}

impl<F: Scalar> Deconv2d<F> {
    /// Stride-2 upsampling layer (exact 2x geometry derived from `kernel`).
    pub fn init_doubling(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (pad, out_pad) = doubling_geometry(kernel);
        let kko = kernel * kernel * out_ch;
        Deconv2d {
            w: Array2::from_shape_vec((in_ch, kko), gaussian(in_ch * kko, sigma, rng)).unwrap(),
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride: 2,
            pad,
            out_pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Deconv2d {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.dim()),
            ..*self
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        deconv_out(h, self.kernel, self.stride, self.pad, self.out_pad)
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, DeconvCache<F>) {
        let (b, h, w, c) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let x2 = x
            .view()
            .into_shape_with_order((b * h * w, c))
            .unwrap()
            .to_owned();
        let cols = x2.dot(&self.w);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = Array4::<F>::zeros((b, oh, ow, self.out_ch));
        scatter_cols(&cols, (b, h, w), &mut out, self.kernel, self.stride, self.pad);
        for mut px in out
            .view_mut()
            .into_shape_with_order((b * oh * ow, self.out_ch))
            .unwrap()
            .axis_iter_mut(Axis(0))
        {
            px += &self.b;
        }
        (out, DeconvCache { x2, in_dims: (b, h, w) })
    }

    pub fn backward(
        &self,
        cache: &DeconvCache<F>,
        dout: &Array4<F>,
        grads: Option<&mut Self>,
    ) -> Array4<F> {
        let (b, h, w) = cache.in_dims;
        let dcols = gather_cols(dout, cache.in_dims, self.kernel, self.stride, self.pad);
        if let Some(gr) = grads {
            gr.w += &cache.x2.t().dot(&dcols);
            let (ob, oh, ow, oc) = dout.dim();
            let d2 = dout.view().into_shape_with_order((ob * oh * ow, oc)).unwrap();
            gr.b += &d2.sum_axis(Axis(0));
        }
        let dx2 = dcols.dot(&self.w.t());
        dx2.into_shape_with_order((b, h, w, self.in_ch)).unwrap()
    }
}

/// Weight-normalized transposed convolution: the direction tensor is
/// normalized per *output* channel over `(in, kh, kw)`.
#[derive(Debug, Clone)]
pub struct WnDeconv2d<F: Scalar> {
    pub v: Array2<F>,
    pub g: Array1<F>,
    pub b: Array1<F>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

pub struct WnDeconvCache<F: Scalar> {
    x2: Array2<F>,
    in_dims: (usize, usize, usize),
}

impl<F: Scalar> WnDeconv2d<F> {
    pub fn init_doubling(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (pad, out_pad) = doubling_geometry(kernel);
        let kko = kernel * kernel * out_ch;
        WnDeconv2d {
            v: Array2::from_shape_vec((in_ch, kko), gaussian(in_ch * kko, sigma, rng)).unwrap(),
            g: Array1::ones(out_ch),
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride: 2,
            pad,
            out_pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        WnDeconv2d {
            v: Array2::zeros(self.v.dim()),
            g: Array1::zeros(self.g.dim()),
            b: Array1::zeros(self.b.dim()),
            ..*self
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        deconv_out(h, self.kernel, self.stride, self.pad, self.out_pad)
    }

    /// Per-output-channel norms of `v` (columns `k*out_ch + o` over all rows).
    fn channel_norms(&self) -> Array1<F> {
        let kk = self.kernel * self.kernel;
        let mut sums = Array1::<F>::zeros(self.out_ch);
        for row in self.v.axis_iter(Axis(0)) {
            for k in 0..kk {
                for o in 0..self.out_ch {
                    let x = row[k * self.out_ch + o];
                    sums[o] += x * x;
                }
            }
        }
        sums.mapv(|s| (s + F::from_f64(WN_EPS)).sqrt())
    }

    fn effective_weights(&self) -> Array2<F> {
        let norms = self.channel_norms();
        let kk = self.kernel * self.kernel;
        let mut w = self.v.clone();
        for mut row in w.axis_iter_mut(Axis(0)) {
            for k in 0..kk {
                for o in 0..self.out_ch {
                    row[k * self.out_ch + o] *= self.g[o] / norms[o];
                }
            }
        }
        w
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, WnDeconvCache<F>) {
        let (b, h, w, c) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let x2 = x
            .view()
            .into_shape_with_order((b * h * w, c))
            .unwrap()
            .to_owned();
        let weights = self.effective_weights();
        let cols = x2.dot(&weights);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = Array4::<F>::zeros((b, oh, ow, self.out_ch));
        scatter_cols(&cols, (b, h, w), &mut out, self.kernel, self.stride, self.pad);
        for mut px in out
            .view_mut()
            .into_shape_with_order((b * oh * ow, self.out_ch))
            .unwrap()
            .axis_iter_mut(Axis(0))
        {
            px += &self.b;
        }
        (out, WnDeconvCache { x2, in_dims: (b, h, w) })
    }

    pub fn backward(
        &self,
        cache: &WnDeconvCache<F>,
        dout: &Array4<F>,
        grads: Option<&mut Self>,
    ) -> Array4<F> {
        let (b, h, w) = cache.in_dims;
        let dcols = gather_cols(dout, cache.in_dims, self.kernel, self.stride, self.pad);
        let weights = self.effective_weights();
        if let Some(gr) = grads {
            let dw = cache.x2.t().dot(&dcols);
            // Pull dW back onto (v, g) per output channel.
            let kk = self.kernel * self.kernel;
            let norms = self.channel_norms();
            for o in 0..self.out_ch {
                let mut dot = F::zero();
                for i in 0..self.in_ch {
                    for k in 0..kk {
                        dot += self.v[(i, k * self.out_ch + o)] * dw[(i, k * self.out_ch + o)];
                    }
                }
                gr.g[o] += dot / norms[o];
                let scale = self.g[o] / norms[o];
                let proj = dot / (norms[o] * norms[o]);
                for i in 0..self.in_ch {
                    for k in 0..kk {
                        let c = k * self.out_ch + o;
                        gr.v[(i, c)] += scale * (dw[(i, c)] - proj * self.v[(i, c)]);
                    }
                }
            }
            let (ob, oh, ow, oc) = dout.dim();
            let d2 = dout.view().into_shape_with_order((ob * oh * ow, oc)).unwrap();
            gr.b += &d2.sum_axis(Axis(0));
        }
        let dx2 = dcols.dot(&weights.t());
        dx2.into_shape_with_order((b, h, w, self.in_ch)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn doubling_geometry_doubles() {
        for k in [3, 4, 5] {
            let (pad, out_pad) = doubling_geometry(k);
            for h in [2, 4, 7] {
                assert_eq!(deconv_out(h, k, 2, pad, out_pad), 2 * h, "kernel {k}");
            }
        }
    }

    #[test]
    fn deconv_grads_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Deconv2d::<f64>::init_doubling(3, 2, 4, 0.3, &mut r);
        let x = Array::from_shape_fn((2, 3, 3, 3), |_| r.random::<f64>() - 0.5);
        let (out, cache) = layer.forward(&x);
        assert_eq!(out.dim(), (2, 6, 6, 2));
        let coef = Array::from_shape_fn(out.dim(), |_| r.random::<f64>() - 0.5);
        let loss =
            |l: &Deconv2d<f64>, x: &Array4<f64>| -> f64 { (&l.forward(x).0 * &coef).sum() };

        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &coef, Some(&mut grads));
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 2, 1, 2), (0, 1, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&layer, &xp);
            xp[idx] -= 2.0 * eps;
            let dn = loss(&layer, &xp);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-7, "dx mismatch at {idx:?}");
        }
        for (i, j) in [(0, 0), (2, 13), (1, 31)] {
            let orig = layer.w[(i, j)];
            layer.w[(i, j)] = orig + eps;
            let up = loss(&layer, &x);
            layer.w[(i, j)] = orig - eps;
            let dn = loss(&layer, &x);
            layer.w[(i, j)] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - grads.w[(i, j)]).abs() < 1e-6, "dw mismatch at ({i},{j})");
        }
    }

    #[test]
    fn wn_deconv_grads_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut layer = WnDeconv2d::<f64>::init_doubling(2, 3, 3, 0.25, &mut r);
        let x = Array::from_shape_fn((1, 2, 2, 2), |_| r.random::<f64>() - 0.5);
        let (out, cache) = layer.forward(&x);
        assert_eq!(out.dim(), (1, 4, 4, 3));
        let coef = Array::from_shape_fn(out.dim(), |_| r.random::<f64>() - 0.5);
        let loss =
            |l: &WnDeconv2d<f64>, x: &Array4<f64>| -> f64 { (&l.forward(x).0 * &coef).sum() };

        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &coef, Some(&mut grads));
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&layer, &xp);
            xp[idx] -= 2.0 * eps;
            let dn = loss(&layer, &xp);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-7, "dx mismatch at {idx:?}");
        }
        for (i, j) in [(0, 0), (1, 7), (0, 20)] {
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
        for o in 0..3 {
            let orig = layer.g[o];
            layer.g[o] = orig + eps;
            let up = loss(&layer, &x);
            layer.g[o] = orig - eps;
            let dn = loss(&layer, &x);
            layer.g[o] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - grads.g[o]).abs() < 1e-6, "dg mismatch at {o}");
        }
    }
}
