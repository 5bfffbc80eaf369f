//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for each parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Decay is applied to the weights directly, before the
    /// adaptive step, as `p <- p - lr * wd * p`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient count mismatch"
        );
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -= lr * weight_decay * p.data[j];
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let k = max_norm / n;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    n
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        let warmup_steps =
            ((warmup_fraction * total_steps as f64).round() as u64).clamp(1, total_steps.max(1));
        Self {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1e-4, 0.1, 1000);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(100) - 1e-4).abs() < 1e-18);
        assert!((s.lr(50) - 5e-5).abs() < 1e-18);
        assert!(s.lr(1000).abs() < 1e-18);
        assert!(s.lr(999) < 1e-9);
    }

    #[test]
    fn clipping_scales_by_ratio() {
        let mut g = vec![vec![0.0, 4.0], vec![0.0]];
        let raw = clip_global_norm(&mut g, 1.0);
        assert_eq!(raw, 4.0);
        assert_eq!(g[0], vec![0.0, 1.0]);
        let mut small = vec![vec![0.3, 0.4]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.3, 0.4]);
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to eps).
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &[2],
        );
        opt.step(&mut [&mut p], &[vec![0.5, -3.0]], 0.1);
        assert!((p.data[0] - 0.9).abs() < 1e-7);
        assert!((p.data[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::vector(vec![2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        opt.step(&mut [&mut p], &[vec![0.0]], 0.5);
        // Zero gradient: only the decay term acts.
        assert!((p.data[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }
}
