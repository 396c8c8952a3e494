use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, tanh_backward, tanh_forward, BatchNorm, BnCache, BnStats,
    Deconv2d, DeconvCache, Dense, DenseCache, Mode, Parameterized, Scalar, WnDeconv2d,
    WnDeconvCache,
};

use super::arch::GenArch;

/// Latent-to-image generator: dense projection, batch-normalized ReLU
/// stride-2 transposed convs, weight-normalized tanh output.
///
/// `forward` never mutates: train-mode batch statistics come back as
/// [`BnStats`] for the trainer to fold in via [`Generator::commit_bn_stats`].
#[derive(Debug, Clone)]
pub struct Generator<F: Scalar> {
    pub arch: GenArch,
    pub proj: Dense<F>,
    pub proj_bn: BatchNorm<F>,
    pub deconvs: Vec<Deconv2d<F>>,
    pub bns: Vec<BatchNorm<F>>,
    pub final_deconv: WnDeconv2d<F>,
}

pub struct GenCache<F: Scalar> {
    proj: DenseCache<F>,
    proj_bn: BnCache<F>,
    proj_mask: Array2<F>,
    deconvs: Vec<(DeconvCache<F>, BnCache<F>, Array2<F>, (usize, usize, usize, usize))>,
    final_deconv: WnDeconvCache<F>,
    tanh: Array4<F>,
    proj_shape: (usize, usize, usize, usize),
}

impl<F: Scalar> Generator<F> {
    pub fn init(arch: &GenArch, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let proj = Dense::init(arch.latent, arch.s0 * arch.s0 * arch.ch0, sigma, rng);
        let proj_bn = BatchNorm::new(arch.ch0);
        let mut deconvs = Vec::new();
        let mut bns = Vec::new();
        let mut in_ch = arch.ch0;
        for &out in &arch.hidden {
            deconvs.push(Deconv2d::init_doubling(in_ch, out, arch.kernel, sigma, rng));
            bns.push(BatchNorm::new(out));
            in_ch = out;
        }
        let final_deconv = WnDeconv2d::init_doubling(in_ch, arch.out_ch, arch.kernel, sigma, rng);
        Generator { arch: arch.clone(), proj, proj_bn, deconvs, bns, final_deconv }
    }

    pub fn zeros_like(&self) -> Self {
        Generator {
            arch: self.arch.clone(),
            proj: self.proj.zeros_like(),
            proj_bn: self.proj_bn.zeros_like(),
            deconvs: self.deconvs.iter().map(|d| d.zeros_like()).collect(),
            bns: self.bns.iter().map(|b| b.zeros_like()).collect(),
            final_deconv: self.final_deconv.zeros_like(),
        }
    }

    /// Map latents `z` (uniform on `[-1,1]^latent`) to images in `(-1, 1)`.
    pub fn forward(
        &self,
        z: &Array2<F>,
        mode: Mode,
    ) -> Result<(Array4<F>, GenCache<F>, Vec<BnStats<F>>)> {
        let (b, zdim) = z.dim();
        if zdim != self.arch.latent {
            return Err(Error::Shape(format!(
                "generator expects latent dim {}, got {zdim}",
                self.arch.latent
            )));
        }
        let s0 = self.arch.s0;
        let mut stats = Vec::new();

        let (h0, proj_cache) = self.proj.forward(z);
        let h0 = h0.into_shape_with_order((b, s0, s0, self.arch.ch0)).unwrap();
        let proj_shape = h0.dim();
        let h0_2 = h0.view().into_shape_with_order((b * s0 * s0, self.arch.ch0)).unwrap();
        let (y, proj_bn_cache, st) = self.proj_bn.forward(h0_2, mode);
        if let Some(st) = st {
            stats.push(st);
        }
        let (y, proj_mask) = leaky_relu(&y, 0.0);
        let mut act = y.into_shape_with_order(proj_shape).unwrap();

        let mut deconv_caches = Vec::new();
        for (layer, bn) in self.deconvs.iter().zip(&self.bns) {
            let (y, dc) = layer.forward(&act);
            let shape = y.dim();
            let (bb, h, w, c) = shape;
            let y2 = y.into_shape_with_order((bb * h * w, c)).unwrap();
            let (y2, bn_cache, st) = bn.forward(y2.view(), mode);
            if let Some(st) = st {
                stats.push(st);
            }
            let (y2, mask) = leaky_relu(&y2, 0.0);
            act = y2.into_shape_with_order(shape).unwrap();
            deconv_caches.push((dc, bn_cache, mask, shape));
        }

        let (y, final_cache) = self.final_deconv.forward(&act);
        let (imgs, tanh_cache) = tanh_forward(&y);
        Ok((
            imgs,
            GenCache {
                proj: proj_cache,
                proj_bn: proj_bn_cache,
                proj_mask,
                deconvs: deconv_caches,
                final_deconv: final_cache,
                tanh: tanh_cache,
                proj_shape,
            },
            stats,
        ))
    }

    /// Fold train-mode batch statistics into the running buffers, in the
    /// order produced by [`Generator::forward`].
    pub fn commit_bn_stats(&mut self, stats: &[BnStats<F>]) {
        debug_assert_eq!(stats.len(), 1 + self.bns.len());
        self.proj_bn.commit(&stats[0]);
        for (bn, st) in self.bns.iter_mut().zip(&stats[1..]) {
            bn.commit(st);
        }
    }

    /// Backward from a gradient on the output images; returns the latent
    /// gradient.
    pub fn backward(
        &self,
        cache: &GenCache<F>,
        dimgs: &Array4<F>,
        mut grads: Option<&mut Self>,
    ) -> Array2<F> {
        let d = tanh_backward(&cache.tanh, dimgs);
        let mut dact = self.final_deconv.backward(
            &cache.final_deconv,
            &d,
            grads.as_deref_mut().map(|g| &mut g.final_deconv),
        );
        for (i, (layer, bn)) in self.deconvs.iter().zip(&self.bns).enumerate().rev() {
            let (dc, bn_cache, mask, shape) = &cache.deconvs[i];
            let (b, h, w, c) = *shape;
            let d2 = dact.into_shape_with_order((b * h * w, c)).unwrap();
            let d2 = leaky_relu_backward(mask, &d2);
            let d2 = bn.backward(bn_cache, &d2, grads.as_deref_mut().map(|g| &mut g.bns[i]));
            let d4 = d2.into_shape_with_order(*shape).unwrap();
            dact = layer.backward(dc, &d4, grads.as_deref_mut().map(|g| &mut g.deconvs[i]));
        }
        let (b, s0, _, c0) = cache.proj_shape;
        let d2 = dact.into_shape_with_order((b * s0 * s0, c0)).unwrap();
        let d2 = leaky_relu_backward(&cache.proj_mask, &d2);
        let d2 = self.proj_bn.backward(
            &cache.proj_bn,
            &d2,
            grads.as_deref_mut().map(|g| &mut g.proj_bn),
        );
        let d2 = d2.into_shape_with_order((b, s0 * s0 * c0)).unwrap();
        self.proj
            .backward(&cache.proj, &d2, grads.as_deref_mut().map(|g| &mut g.proj))
    }
}

impl<F: Scalar> Parameterized<F> for Generator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        let (o, i) = self.proj.w.dim();
        f("proj.w", &[o, i], self.proj.w.as_slice().unwrap());
        f("proj.b", &[o], self.proj.b.as_slice().unwrap());
        f("proj_bn.gamma", &[self.proj_bn.gamma.len()], self.proj_bn.gamma.as_slice().unwrap());
        f("proj_bn.beta", &[self.proj_bn.beta.len()], self.proj_bn.beta.as_slice().unwrap());
        for (ix, d) in self.deconvs.iter().enumerate() {
            f(&format!("deconv{ix}.w"), &[d.in_ch, d.kernel, d.kernel, d.out_ch], d.w.as_slice().unwrap());
            f(&format!("deconv{ix}.b"), &[d.out_ch], d.b.as_slice().unwrap());
            let bn = &self.bns[ix];
            f(&format!("bn{ix}.gamma"), &[bn.gamma.len()], bn.gamma.as_slice().unwrap());
            f(&format!("bn{ix}.beta"), &[bn.beta.len()], bn.beta.as_slice().unwrap());
        }
        let d = &self.final_deconv;
        f("final.v", &[d.in_ch, d.kernel, d.kernel, d.out_ch], d.v.as_slice().unwrap());
        f("final.g", &[d.out_ch], d.g.as_slice().unwrap());
        f("final.b", &[d.out_ch], d.b.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let (o, i) = self.proj.w.dim();
        f("proj.w", &[o, i], self.proj.w.as_slice_mut().unwrap());
        f("proj.b", &[o], self.proj.b.as_slice_mut().unwrap());
        let n = self.proj_bn.gamma.len();
        f("proj_bn.gamma", &[n], self.proj_bn.gamma.as_slice_mut().unwrap());
        f("proj_bn.beta", &[n], self.proj_bn.beta.as_slice_mut().unwrap());
        for (ix, d) in self.deconvs.iter_mut().enumerate() {
            let shape = [d.in_ch, d.kernel, d.kernel, d.out_ch];
            f(&format!("deconv{ix}.w"), &shape, d.w.as_slice_mut().unwrap());
            f(&format!("deconv{ix}.b"), &[shape[3]], d.b.as_slice_mut().unwrap());
            let bn = &mut self.bns[ix];
            let n = bn.gamma.len();
            f(&format!("bn{ix}.gamma"), &[n], bn.gamma.as_slice_mut().unwrap());
            f(&format!("bn{ix}.beta"), &[n], bn.beta.as_slice_mut().unwrap());
        }
        let d = &mut self.final_deconv;
        let shape = [d.in_ch, d.kernel, d.kernel, d.out_ch];
        f("final.v", &shape, d.v.as_slice_mut().unwrap());
        f("final.g", &[shape[3]], d.g.as_slice_mut().unwrap());
        f("final.b", &[shape[3]], d.b.as_slice_mut().unwrap());
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        let n = self.proj_bn.running_mean.len();
        f("proj_bn.running_mean", &[n], self.proj_bn.running_mean.as_slice().unwrap());
        f("proj_bn.running_var", &[n], self.proj_bn.running_var.as_slice().unwrap());
        for (ix, bn) in self.bns.iter().enumerate() {
            let n = bn.running_mean.len();
            f(&format!("bn{ix}.running_mean"), &[n], bn.running_mean.as_slice().unwrap());
            f(&format!("bn{ix}.running_var"), &[n], bn.running_var.as_slice().unwrap());
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        let n = self.proj_bn.running_mean.len();
        f("proj_bn.running_mean", &[n], self.proj_bn.running_mean.as_slice_mut().unwrap());
        f("proj_bn.running_var", &[n], self.proj_bn.running_var.as_slice_mut().unwrap());
        for (ix, bn) in self.bns.iter_mut().enumerate() {
            let n = bn.running_mean.len();
            f(&format!("bn{ix}.running_mean"), &[n], bn.running_mean.as_slice_mut().unwrap());
            f(&format!("bn{ix}.running_var"), &[n], bn.running_var.as_slice_mut().unwrap());
        }
    }
}
