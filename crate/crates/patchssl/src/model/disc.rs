use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward, leaky_relu,
    leaky_relu_backward, ConvCache, Mode, Parameterized, Scalar, WnConv2d, WnDense, WnDenseCache,
};

use super::arch::{DiscArch, DiscLayerSpec};

/// The K-class discriminator (also the ConvNet baseline).
///
/// Holds every learnable array: weight-norm direction, scale, and bias per
/// conv/NiN/dense layer. `zeros_like` produces a same-shaped container used
/// to accumulate gradients.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Scalar> {
    pub arch: DiscArch,
    pub convs: Vec<WnConv2d<F>>,
    pub nin: Vec<WnConv2d<F>>,
    pub head: WnDense<F>,
}

/// Logits over the K real classes plus the feature-matching tap `h(x)`.
pub struct DiscOutput<F: Scalar> {
    pub logits: Array2<F>,
    pub features: Array2<F>,
}

enum StepCache<F: Scalar> {
    Dropout(Array4<F>),
    Conv { conv: ConvCache<F>, mask: Array4<F> },
}

pub struct DiscCache<F: Scalar> {
    steps: Vec<StepCache<F>>,
    nin_steps: Vec<(ConvCache<F>, Array4<F>)>,
    prepool_shape: (usize, usize, usize, usize),
    head: WnDenseCache<F>,
}

impl<F: Scalar> Discriminator<F> {
    /// Gaussian weight init (`sigma`), unit weight-norm scales, zero biases.
    pub fn init(arch: &DiscArch, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::new();
        let mut in_ch = arch.in_ch;
        for block in &arch.blocks {
            if let DiscLayerSpec::Conv { out, kernel, stride, pad } = block {
                convs.push(WnConv2d::init(in_ch, *out, *kernel, *stride, *pad, sigma, rng));
                in_ch = *out;
            }
        }
        let mut nin = Vec::new();
        for &out in &arch.nin {
            nin.push(WnConv2d::init(in_ch, out, 1, 1, 0, sigma, rng));
            in_ch = out;
        }
        let head = WnDense::init(in_ch, arch.classes, sigma, rng);
        Ok(Discriminator { arch: arch.clone(), convs, nin, head })
    }

    pub fn zeros_like(&self) -> Self {
        Discriminator {
            arch: self.arch.clone(),
            convs: self.convs.iter().map(|c| c.zeros_like()).collect(),
            nin: self.nin.iter().map(|c| c.zeros_like()).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Forward pass over an NHWC batch in `[-1, 1]`.
    ///
    /// Train mode applies dropout (an RNG is required if any rate is
    /// nonzero); eval mode is a deterministic function of `(params, x)`.
    pub fn forward(
        &self,
        x: &Array4<F>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(DiscOutput<F>, DiscCache<F>)> {
        let (_, h, w, c) = x.dim();
        if h != self.arch.input || w != self.arch.input || c != self.arch.in_ch {
            return Err(Error::Shape(format!(
                "discriminator expects [B, {0}, {0}, {1}], got [B, {h}, {w}, {c}]",
                self.arch.input, self.arch.in_ch
            )));
        }
        let slope = self.arch.lrelu_slope;
        let mut steps = Vec::new();
        let mut act = x.clone();
        let mut conv_ix = 0;
        for block in &self.arch.blocks {
            match block {
                DiscLayerSpec::Dropout { rate } => {
                    if mode == Mode::Train && *rate > 0.0 {
                        let rng = rng
                            .as_deref_mut()
                            .expect("train-mode forward with dropout needs an RNG");
                        let (y, mask) = dropout_forward(&act, *rate, rng);
                        act = y;
                        steps.push(StepCache::Dropout(mask));
                    }
                }
                DiscLayerSpec::Conv { .. } => {
                    let layer = &self.convs[conv_ix];
                    conv_ix += 1;
                    let (y, conv) = layer.forward(&act);
                    let (y, mask) = leaky_relu(&y, slope);
                    act = y;
                    steps.push(StepCache::Conv { conv, mask });
                }
            }
        }
        let mut nin_steps = Vec::new();
        for layer in &self.nin {
            let (y, conv) = layer.forward(&act);
            let (y, mask) = leaky_relu(&y, slope);
            act = y;
            nin_steps.push((conv, mask));
        }
        let prepool_shape = act.dim();
        let pooled = global_avg_pool(&act);
        let (logits, head) = self.head.forward(&pooled);
        let features = if self.arch.feature_after_pool {
            pooled
        } else {
            let (b, ph, pw, pc) = prepool_shape;
            act.into_shape_with_order((b, ph * pw * pc)).unwrap()
        };
        Ok((
            DiscOutput { logits, features },
            DiscCache { steps, nin_steps, prepool_shape, head },
        ))
    }

    /// Backward pass from gradients on the logits and/or the feature tap.
    /// Returns the gradient with respect to the input batch; parameter
    /// gradients accumulate into `grads` when given.
    pub fn backward(
        &self,
        cache: &DiscCache<F>,
        dlogits: Option<&Array2<F>>,
        dfeatures: Option<&Array2<F>>,
        mut grads: Option<&mut Self>,
    ) -> Array4<F> {
        let (b, ph, pw, pc) = cache.prepool_shape;
        let mut dpooled = Array2::<F>::zeros((b, pc));
        if let Some(dl) = dlogits {
            let dhead = self
                .head
                .backward(&cache.head, dl, grads.as_deref_mut().map(|g| &mut g.head));
            dpooled += &dhead;
        }
        let mut dact;
        match dfeatures {
            Some(df) if !self.arch.feature_after_pool => {
                dact = global_avg_pool_backward(&dpooled, cache.prepool_shape);
                let df4 = df.view().into_shape_with_order((b, ph, pw, pc)).unwrap();
                dact += &df4;
            }
            Some(df) => {
                dpooled += df;
                dact = global_avg_pool_backward(&dpooled, cache.prepool_shape);
            }
            None => {
                dact = global_avg_pool_backward(&dpooled, cache.prepool_shape);
            }
        }
        for (i, layer) in self.nin.iter().enumerate().rev() {
            let (conv, mask) = &cache.nin_steps[i];
            let d = leaky_relu_backward(mask, &dact);
            dact = layer.backward(conv, &d, grads.as_deref_mut().map(|g| &mut g.nin[i]));
        }
        let mut conv_ix = self.convs.len();
        for step in cache.steps.iter().rev() {
            match step {
                StepCache::Dropout(mask) => {
                    dact = dropout_backward(mask, &dact);
                }
                StepCache::Conv { conv, mask } => {
                    conv_ix -= 1;
                    let d = leaky_relu_backward(mask, &dact);
                    dact = self.convs[conv_ix].backward(
                        conv,
                        &d,
                        grads.as_deref_mut().map(|g| &mut g.convs[conv_ix]),
                    );
                }
            }
        }
        dact
    }
}

impl<F: Scalar> Parameterized<F> for Discriminator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&format!("conv{i}.v"), &[c.out_ch, c.kernel, c.kernel, c.in_ch], c.v.as_slice().unwrap());
            f(&format!("conv{i}.g"), &[c.out_ch], c.g.as_slice().unwrap());
            f(&format!("conv{i}.b"), &[c.out_ch], c.b.as_slice().unwrap());
        }
        for (i, c) in self.nin.iter().enumerate() {
            f(&format!("nin{i}.v"), &[c.out_ch, c.kernel, c.kernel, c.in_ch], c.v.as_slice().unwrap());
            f(&format!("nin{i}.g"), &[c.out_ch], c.g.as_slice().unwrap());
            f(&format!("nin{i}.b"), &[c.out_ch], c.b.as_slice().unwrap());
        }
        let (o, i) = self.head.v.dim();
        f("head.v", &[o, i], self.head.v.as_slice().unwrap());
        f("head.g", &[o], self.head.g.as_slice().unwrap());
        f("head.b", &[o], self.head.b.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            let shape = [c.out_ch, c.kernel, c.kernel, c.in_ch];
            f(&format!("conv{i}.v"), &shape, c.v.as_slice_mut().unwrap());
            f(&format!("conv{i}.g"), &[shape[0]], c.g.as_slice_mut().unwrap());
            f(&format!("conv{i}.b"), &[shape[0]], c.b.as_slice_mut().unwrap());
        }
        for (i, c) in self.nin.iter_mut().enumerate() {
            let shape = [c.out_ch, c.kernel, c.kernel, c.in_ch];
            f(&format!("nin{i}.v"), &shape, c.v.as_slice_mut().unwrap());
            f(&format!("nin{i}.g"), &[shape[0]], c.g.as_slice_mut().unwrap());
            f(&format!("nin{i}.b"), &[shape[0]], c.b.as_slice_mut().unwrap());
        }
        let (o, i) = self.head.v.dim();
        f("head.v", &[o, i], self.head.v.as_slice_mut().unwrap());
        f("head.g", &[o], self.head.g.as_slice_mut().unwrap());
        f("head.b", &[o], self.head.b.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_disc(seed: u64) -> Discriminator<f64> {
        let arch = DiscArch::tiny(16, 2, (6, 8), 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Discriminator::init(&arch, 0.05, &mut rng).unwrap()
    }

    #[test]
    fn output_shapes_match_arch() {
        let d = tiny_disc(0);
        let x = Array4::<f64>::zeros((5, 16, 16, 3));
        let (out, _) = d.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(out.logits.dim(), (5, 2));
        assert_eq!(out.features.dim(), (5, 8));
    }

    #[test]
    fn paper_arch_has_expected_feature_dim() {
        let arch = DiscArch::paper(32, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::<f32>::init(&arch, 0.05, &mut rng).unwrap();
        let x = Array4::<f32>::zeros((2, 32, 32, 3));
        let (out, _) = d.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(out.logits.dim(), (2, 2));
        assert_eq!(out.features.dim(), (2, 192));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let d = tiny_disc(7);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((3, 16, 16, 3), |_| r.random::<f64>() * 2.0 - 1.0);
        let (a, _) = d.forward(&x, Mode::Eval, None).unwrap();
        let (b, _) = d.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn train_forward_replays_under_fixed_dropout_seed() {
        let d = tiny_disc(7);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((3, 16, 16, 3), |_| r.random::<f64>() * 2.0 - 1.0);
        let mut rng1 = ChaCha8Rng::seed_from_u64(11);
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let (a, _) = d.forward(&x, Mode::Train, Some(&mut rng1)).unwrap();
        let (b, _) = d.forward(&x, Mode::Train, Some(&mut rng2)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let d = tiny_disc(0);
        let x = Array4::<f64>::zeros((1, 8, 8, 3));
        assert!(matches!(d.forward(&x, Mode::Eval, None), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_deterministic_and_bias_free() {
        let a = tiny_disc(5);
        let b = tiny_disc(5);
        assert_eq!(a.convs[0].v, b.convs[0].v);
        assert_eq!(a.head.v, b.head.v);
        assert!(a.convs.iter().all(|c| c.b.iter().all(|&x| x == 0.0)));
        assert!(a.convs.iter().all(|c| c.g.iter().all(|&x| x == 1.0)));
    }
}
