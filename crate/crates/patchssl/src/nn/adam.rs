use std::collections::BTreeMap;

use super::{Parameterized, Scalar};

/// ADAM optimizer over a [`Parameterized`] model.
///
/// First/second-moment buffers are keyed by parameter name and created
/// lazily on the first step.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<P: Parameterized<F>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = one - b1.powi(self.t as i32);
        let bc2 = one - b2.powi(self.t as i32);
        let eps = F::from_f64(self.eps);
        let lr = F::from_f64(lr);

        let gsnap = grads.collect_params();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_params_mut(&mut |name, _, theta| {
            let (gname, _, g) = &gsnap[i];
            assert_eq!(name, gname, "gradient visit order diverged from params");
            i += 1;
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![F::zero(); theta.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![F::zero(); theta.len()]);
            for j in 0..theta.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }

    /// Moment buffers as named tensors (`<prefix><name>.m` / `.v`), for
    /// checkpointing.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<F>)> {
        let mut out = Vec::new();
        for (name, m) in &self.m {
            out.push((format!("{prefix}{name}.m"), vec![m.len()], m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("{prefix}{name}.v"), vec![v.len()], v.clone()));
        }
        out
    }

    /// Restore moment buffers written by [`Adam::state_tensors`].
    pub fn restore_state(&mut self, name: &str, data: Vec<F>) {
        if let Some(key) = name.strip_suffix(".m") {
            self.m.insert(key.to_string(), data);
        } else if let Some(key) = name.strip_suffix(".v") {
            self.v.insert(key.to_string(), data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Theta(Vec<f64>);

    impl Parameterized<f64> for Theta {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            f("theta", &[self.0.len()], &self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            let n = self.0.len();
            f("theta", &[n], &mut self.0);
        }
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // With beta1=0.5: m = 0.5*g, v = 0.001*g^2; bias correction gives
        // m_hat = g, v_hat = g^2, so the step is lr * g/(|g| + eps) ~= lr*sign(g).
        let mut p = Theta(vec![1.0]);
        let g = Theta(vec![0.3]);
        let mut opt = Adam::new(0.5, 0.999, 1e-8);
        opt.step(&mut p, &g, 3e-4);
        let m: f64 = 0.5 * 0.3;
        let v: f64 = 0.001 * 0.09;
        let m_hat = m / 0.5;
        let v_hat = v / 0.001;
        let expect = 1.0 - 3e-4 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.0[0] - expect).abs() < 1e-15, "got {} want {expect}", p.0[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // 1-D quadratic with the configured (alpha, beta1) and defaults.
        let mut p = Theta(vec![0.1]);
        let mut opt = Adam::new(0.5, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = Theta(vec![p.0[0]]); // d/dx of x^2/2
            opt.step(&mut p, &g, 3e-4);
        }
        assert!(p.0[0].abs() < 1e-3, "after 2000 steps: {}", p.0[0]);
    }
}
