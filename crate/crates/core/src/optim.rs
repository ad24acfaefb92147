//! Optimization: AdamW with decoupled weight decay, global-norm gradient
//! clipping, and the learning-rate schedule shared by the trainers.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

/// One parameter's view for an optimizer step.
pub struct OptimEntry<'a, S> {
    pub name: &'a str,
    pub param: &'a mut [S],
    pub grad: &'a [S],
}

/// AdamW with bias correction and decoupled weight decay:
///
/// ```text
/// m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
/// p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
/// ```
///
/// Moment buffers are keyed by position, so every call to [`AdamW::step`]
/// must pass the same parameter list in the same order.
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update with the given learning rate. Errors on a NaN or
    /// infinite gradient, naming the parameter.
    pub fn step(&mut self, lr: f64, entries: &mut [OptimEntry<'_, S>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = entries.iter().map(|e| vec![S::ZERO; e.param.len()]).collect();
            self.v = entries.iter().map(|e| vec![S::ZERO; e.param.len()]).collect();
        }
        if self.m.len() != entries.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer state tracks {} parameters, step got {}",
                self.m.len(),
                entries.len()
            )));
        }
        self.t += 1;
        let b1 = s::<S>(self.beta1);
        let b2 = s::<S>(self.beta2);
        let one_m_b1 = s::<S>(1.0 - self.beta1);
        let one_m_b2 = s::<S>(1.0 - self.beta2);
        // Bias corrections folded into a single scalar per step.
        let corr1 = 1.0 - self.beta1.powi(self.t as i32);
        let corr2 = 1.0 - self.beta2.powi(self.t as i32);
        let eps = s::<S>(self.eps);
        let lr_s = s::<S>(lr);
        let inv_corr1 = s::<S>(1.0 / corr1);
        let inv_sqrt_corr2 = s::<S>(1.0 / corr2.sqrt());
        let decay = s::<S>(lr * self.weight_decay);

        for (i, e) in entries.iter_mut().enumerate() {
            if e.grad.len() != e.param.len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("param `{}` has {} elements, grad has {}", e.name, e.param.len(), e.grad.len()),
                ));
            }
            if e.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad { param: e.name.to_string() });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..e.param.len() {
                let g = e.grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let mhat = m[j] * inv_corr1;
                let vhat_sqrt = (v[j]).sqrt() * inv_sqrt_corr2;
                e.param[j] -= lr_s * (mhat / (vhat_sqrt + eps));
                e.param[j] -= decay * e.param[j];
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. The norm is accumulated at f64 regardless of
/// the tensor precision.
pub fn clip_grad_global_norm<S: Scalar>(grads: &mut [&mut [S]], max_norm: f64) -> f64 {
    let mut sumsq = 0.0f64;
    for g in grads.iter() {
        for &x in g.iter() {
            let x = x.to_f64();
            sumsq += x * x;
        }
    }
    let norm = sumsq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = s::<S>(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Linear warmup to 1.0 over `warmup` steps, then linear decay to 0 at
/// `total`. `step` is 1-based; with `warmup = 0` the whole schedule is the
/// decay ramp.
pub fn warmup_linear(step: u64, total: u64, warmup: u64) -> f64 {
    if warmup > 0 && step <= warmup {
        return step as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    let rest = (total - step) as f64 / (total - warmup) as f64;
    rest.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_unit_param_to_point_nine() {
        // p=1, g=1, lr=0.1, wd=0: mhat=1, vhat=1, so p -> 1 - 0.1/(1+1e-8).
        let mut opt = AdamW::<f64>::new(0.0);
        let mut p = vec![1.0];
        let g = vec![1.0];
        opt.step(0.1, &mut [OptimEntry { name: "p", param: &mut p, grad: &g }]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8, "got {}", p[0]);
    }

    #[test]
    fn matches_scalar_reference_over_many_steps() {
        // Independent scalar recurrence, written directly from the update
        // equations, checked against the vectorized implementation.
        let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.999, 1e-8, 0.0);
        let grads = [0.5, -1.0, 0.25, 2.0, -0.125, 0.75];
        let mut p_ref = 0.3f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p_ref -= lr * mhat / (vhat.sqrt() + eps);
            p_ref -= lr * wd * p_ref;
        }

        let mut opt = AdamW::<f64>::new(wd);
        let mut p = vec![0.3];
        for &g in &grads {
            opt.step(lr, &mut [OptimEntry { name: "p", param: &mut p, grad: &[g] }]).unwrap();
        }
        assert!((p[0] - p_ref).abs() < 1e-12, "{} vs {}", p[0], p_ref);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_decay() {
        // Fresh state, g=0: the Adam term vanishes (0 / (0 + eps)), leaving
        // p <- p (1 - lr wd).
        let mut opt = AdamW::<f64>::new(0.1);
        let mut p = vec![2.0];
        opt.step(0.5, &mut [OptimEntry { name: "p", param: &mut p, grad: &[0.0] }]).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_an_error_naming_the_param() {
        let mut opt = AdamW::<f64>::new(0.0);
        let mut p = vec![1.0];
        let err = opt
            .step(0.1, &mut [OptimEntry { name: "layer3.w_q", param: &mut p, grad: &[f64::NAN] }])
            .unwrap_err();
        assert!(err.to_string().contains("layer3.w_q"));
    }

    #[test]
    fn clip_three_four_five() {
        // Norm of [3,4] is 5; clipping to 1 rescales to [0.6, 0.8].
        let mut a = vec![3.0f64];
        let mut b = vec![4.0f64];
        let norm = clip_grad_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-12);
        assert!((b[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut a = vec![0.3f64, -0.4];
        let norm = clip_grad_global_norm(&mut [&mut a], 1.0);
        assert_eq!(norm, 0.5);
        assert_eq!(a, vec![0.3, -0.4]);
    }

    #[test]
    fn schedule_warms_up_then_decays_linearly() {
        assert_eq!(warmup_linear(1, 100, 10), 0.1);
        assert_eq!(warmup_linear(10, 100, 10), 1.0);
        assert!((warmup_linear(55, 100, 10) - 0.5).abs() < 1e-12);
        assert_eq!(warmup_linear(100, 100, 10), 0.0);
        // Degenerate: no warmup.
        assert_eq!(warmup_linear(1, 10, 0), 0.9);
    }
}
