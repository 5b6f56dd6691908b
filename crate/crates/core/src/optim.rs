//! AdamW with linear warmup followed by linear decay to zero.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Fraction of the total steps spent warming up.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup() -> f64 {
    0.1
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.01,
            warmup_frac: default_warmup(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, total_steps: usize) -> Self {
        Self { cfg, total_steps: total_steps.max(1), step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.cfg.warmup_frac * self.total_steps as f64).round() as usize;
        let s = step as f64;
        if step < warmup {
            self.cfg.lr * (s + 1.0) / warmup as f64
        } else {
            let remaining = (self.total_steps - warmup.min(self.total_steps)).max(1) as f64;
            self.cfg.lr * (1.0 - (s - warmup as f64) / remaining).max(0.0)
        }
    }

    /// One update. `params`, `grads` and `decay` are aligned tensor by tensor;
    /// `decay[i]` enables decoupled weight decay for tensor `i`.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[&[T]], decay: &[bool]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::of(1.0 - b1.powi(self.step as i32));
        let bc2 = T::of(1.0 - b2.powi(self.step as i32));
        let (b1, b2, eps, lr_t) = (T::of(b1), T::of(b2), T::of(self.cfg.eps), T::of(lr));
        let wd = T::of(self.cfg.weight_decay * lr);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decays = decay.get(i).copied().unwrap_or(false);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                if decays {
                    p[j] -= wd * p[j];
                }
                p[j] -= lr_t * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let opt = AdamW::<f64>::new(OptimConfig { lr: 1.0, warmup_frac: 0.1, ..Default::default() }, 100);
        assert!((opt.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((opt.lr_at(9) - 1.0).abs() < 1e-12);
        assert!(opt.lr_at(50) < opt.lr_at(10));
        assert!(opt.lr_at(99) > 0.0 && opt.lr_at(99) < 0.02);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0_f64, -2.0];
        let mut opt = AdamW::new(OptimConfig { lr: 0.1, weight_decay: 0.0, warmup_frac: 0.0, ..Default::default() }, 500);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![&mut x], &[&g], &[false]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
