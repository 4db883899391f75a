//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment state plus a step counter.
///
/// The same parameter list (same order, same tensors) must be passed to
/// every [`AdamW::step`] call.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update with bias correction.
    ///
    /// Every parameter must carry a populated gradient (callers seed zero
    /// gradients for parameters a given loss legitimately never touches).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!(
                    "missing gradient on trainable parameter {i} (shape {:?})",
                    p.shape()
                ))
            })?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j];
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[j]);
                }
            });
        }
        Ok(())
    }
}

/// Cosine decay: `lr0 * 0.5 * (1 + cos(pi * step / total))`, floored at 0.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    debug_assert!(step <= total_steps, "step {step} past total {total_steps}");
    if total_steps == 0 {
        return lr0;
    }
    let frac = step as f64 / total_steps as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_grads_zero_decay_is_fixed_point() {
        let p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let before = p.to_vec();
        p.ensure_grad();
        let mut opt = AdamW::new(&[p.clone()], AdamWConfig::default());
        opt.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), before);
    }

    #[test]
    fn first_step_magnitude_matches_closed_form() {
        // Single scalar, g = 1, lr = 0.1: bias-corrected update is
        // lr * g / (|g| + eps).
        let p = Tensor::from_vec(&[1], vec![0.0], true).unwrap();
        p.accumulate_grad(&[1.0]);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&[p.clone()], cfg);
        opt.step(&[p.clone()]).unwrap();
        let expected = 0.1 * 1.0 / (1.0 + cfg.eps);
        assert!((p.to_vec()[0] + expected).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let p = Tensor::from_vec(&[1], vec![0.0], true).unwrap();
        let mut opt = AdamW::new(&[p.clone()], AdamWConfig::default());
        assert!(matches!(
            opt.step(&[p]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn quadratic_bowl_converges_monotonically_after_warmup() {
        // Minimize sum((p - c)^2) for a random target c.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let target = Tensor::randn(&[4], 1.0, &mut rng);
        let p = Tensor::randn(&[4], 1.0, &mut rng).requires_grad_(true);
        let cfg = AdamWConfig {
            lr: 0.01,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&[p.clone()], cfg);
        let mut losses = Vec::new();
        for _ in 0..50 {
            p.zero_grad();
            let loss = p.sub(&target).unwrap().mse(&Tensor::zeros(&[4])).unwrap();
            losses.push(loss.item());
            backward(&loss).unwrap();
            opt.step(&[p.clone()]).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose after warmup: {w:?}");
        }
        assert!(losses[49] < losses[5] * 0.5, "{} vs {}", losses[49], losses[5]);
    }

    #[test]
    fn cosine_endpoints_are_exact() {
        assert_eq!(cosine_lr(0, 200, 1e-4), 1e-4);
        assert_eq!(cosine_lr(200, 200, 1e-4), 0.0);
        assert!((cosine_lr(100, 200, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let p = Tensor::from_vec(&[1], vec![2.0], true).unwrap();
        p.ensure_grad();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&[p.clone()], cfg);
        opt.step(&[p.clone()]).unwrap();
        assert!((p.to_vec()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
