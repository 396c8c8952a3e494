/// Named access to every learnable array of a model, in a fixed order.
///
/// The optimizer, EMA shadow, and checkpoint container all address
/// parameters through this trait, keyed by the visit order (which must be
/// identical between `visit_params` and `visit_params_mut`).
pub trait Parameterized<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[F]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F]));

    /// Non-trainable state that still belongs in checkpoints (batch-norm
    /// running statistics). The optimizer never sees these.
    fn visit_state(&self, _f: &mut dyn FnMut(&str, &[usize], &[F])) {}
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&str, &[usize], &mut [F])) {}

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, data| n += data.len());
        n
    }

    /// Collect `(name, shape, data)` snapshots.
    fn collect_params(&self) -> Vec<(String, Vec<usize>, Vec<F>)>
    where
        F: Clone,
    {
        let mut out = Vec::new();
        self.visit_params(&mut |name, shape, data| {
            out.push((name.to_string(), shape.to_vec(), data.to_vec()));
        });
        out
    }
}
