//! Minimal neural-network plumbing: seeded streams, conv/linear/norm layers
//! with hand-written backward passes, and parameter bookkeeping shared by the
//! diffusion, generator, and extractor networks.

pub mod conv;
pub mod layers;
pub mod rng;

pub use layers::Param;

/// Anything that exposes its learnable tensors by stable name and order.
pub trait NetParams {
    fn named_params(&self) -> Vec<(String, &Param)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn sgd_step(&mut self, lr: f32) {
        for (_, p) in self.named_params_mut() {
            p.sgd_step(lr);
        }
    }

    /// SGD with classical momentum; `velocity` must be zero-initialized
    /// buffers of the same shapes, one per parameter, in iteration order.
    fn sgd_momentum_step(&mut self, velocity: &mut [ndarray::ArrayD<f32>], lr: f32, momentum: f32) {
        let mut params = self.named_params_mut();
        assert_eq!(params.len(), velocity.len());
        for ((_, p), v) in params.iter_mut().zip(velocity.iter_mut()) {
            v.zip_mut_with(&p.grad, |vv, &g| *vv = momentum * *vv + g);
            p.value.zip_mut_with(v, |pv, &vv| *pv -= lr * vv);
        }
    }

    /// Zeroed velocity buffers for `sgd_momentum_step`.
    fn velocity_like(&self) -> Vec<ndarray::ArrayD<f32>> {
        self.named_params().iter().map(|(_, p)| ndarray::ArrayD::zeros(p.value.raw_dim())).collect()
    }

    /// Adam update; `moments` holds one (m, v) pair per parameter and `step`
    /// counts completed updates (pass the 1-based step for bias correction).
    fn adam_step(&mut self, moments: &mut [(ndarray::ArrayD<f32>, ndarray::ArrayD<f32>)], step: usize, lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        let bc1 = 1.0 - B1.powi(step as i32);
        let bc2 = 1.0 - B2.powi(step as i32);
        let mut params = self.named_params_mut();
        assert_eq!(params.len(), moments.len());
        for ((_, p), (m, v)) in params.iter_mut().zip(moments.iter_mut()) {
            m.zip_mut_with(&p.grad, |mv, &g| *mv = B1 * *mv + (1.0 - B1) * g);
            v.zip_mut_with(&p.grad, |vv, &g| *vv = B2 * *vv + (1.0 - B2) * g * g);
            ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + EPS);
            });
        }
    }

    /// Zeroed Adam moment buffers.
    fn moments_like(&self) -> Vec<(ndarray::ArrayD<f32>, ndarray::ArrayD<f32>)> {
        self.named_params()
            .iter()
            .map(|(_, p)| {
                (
                    ndarray::ArrayD::zeros(p.value.raw_dim()),
                    ndarray::ArrayD::zeros(p.value.raw_dim()),
                )
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Move every parameter a fraction `rate` of the way toward `other`.
    fn lerp_toward(&mut self, other: &Self, rate: f32)
    where
        Self: Sized,
    {
        let theirs = other.named_params();
        let mut ours = self.named_params_mut();
        assert_eq!(ours.len(), theirs.len(), "parameter lists differ");
        for ((an, a), (bn, b)) in ours.iter_mut().zip(theirs.iter()) {
            assert_eq!(an, bn, "parameter order mismatch");
            a.lerp_toward(b, rate);
        }
    }

    /// Bitwise equality of all parameter values.
    fn params_equal(&self, other: &Self) -> bool
    where
        Self: Sized,
    {
        let a = self.named_params();
        let b = other.named_params();
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((an, ap), (bn, bp))| {
                an == bn
                    && ap.value.iter().zip(bp.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest |gradient| entry, for divergence diagnostics.
    fn grad_max_abs(&self) -> f32 {
        self.named_params()
            .iter()
            .flat_map(|(_, p)| p.grad.iter())
            .fold(0.0f32, |m, &g| m.max(g.abs()))
    }
}
