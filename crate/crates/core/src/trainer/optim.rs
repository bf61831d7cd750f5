//! Adaptive-moment optimizer, clipping, EMA and learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `0.1 * peak` at `total` (or flat at `peak`).
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize, schedule: Schedule) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let floor = 0.1 * peak;
            let span = total.saturating_sub(warmup).max(1) as f64;
            let frac = ((step - warmup) as f64 / span).min(1.0);
            floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Rescales to `max_norm` when the global L2 norm exceeds it; returns the
/// pre-clip norm.
pub fn clip_grads(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = crate::objectives::global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// `shadow = ratio * shadow + (1 - ratio) * params`.
pub fn ema_update(shadow: &mut Array2<f64>, params: &Array2<f64>, ratio: f64) {
    assert_eq!(shadow.dim(), params.dim(), "EMA shadow shape mismatch");
    ndarray::Zip::from(shadow).and(params).for_each(|s, &p| *s = ratio * *s + (1.0 - ratio) * p);
}

/// Ratio actually applied at update `k` (1-based) when EMA warmup is on.
pub fn ema_ratio_at(ratio: f64, k: usize, warmup: bool) -> f64 {
    if warmup {
        ratio.min((1.0 + k as f64) / (10.0 + k as f64))
    } else {
        ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamParams,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(hp: AdamParams, shapes: &[Array2<f64>]) -> Self {
        let zeros = || shapes.iter().map(|a| Array2::zeros(a.dim())).collect::<Vec<_>>();
        AdamW { hp, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update; tensors flagged in `skip` are left untouched.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64, skip: &[bool]) {
        self.t += 1;
        let AdamParams { beta1, beta2, eps, weight_decay } = self.hp;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            if skip[i] {
                continue;
            }
            ndarray::Zip::from(&mut params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * (mh / (vh.sqrt() + eps) + weight_decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-4, 100, 1000, Schedule::Cosine), 0.0);
        assert!((lr_at(100, 1e-4, 100, 1000, Schedule::Cosine) - 1e-4).abs() < 1e-18);
        assert!((lr_at(1000, 1e-4, 100, 1000, Schedule::Cosine) - 1e-5).abs() < 1e-18);
        assert!((lr_at(50, 1e-4, 100, 1000, Schedule::Constant) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(900, 1e-4, 100, 1000, Schedule::Constant), 1e-4);
        let mid = lr_at(550, 1e-4, 100, 1000, Schedule::Cosine);
        assert!((mid - 5.5e-5).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![array![[1.2, 0.0]], array![[0.0, 1.6]]];
        assert!((clip_grads(&mut g, 1.0) - 2.0).abs() < 1e-15);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
        let mut small = vec![array![[0.3, 0.4]]];
        clip_grads(&mut small, 1.0);
        assert_eq!(small[0], array![[0.3, 0.4]]);
        let mut rng = crate::seed::rng(5);
        for _ in 0..20 {
            let s: f64 = rng.random_range(0.1..3.0);
            let mut g: Vec<Array2<f64>> =
                (0..3).map(|_| Array2::from_shape_fn((4, 5), |_| rng.random_range(-s..s))).collect();
            let pre = clip_grads(&mut g, 1.0);
            let post = crate::objectives::global_norm(&g);
            assert!((post - pre.min(1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_examples() {
        let mut s = array![[0.0]];
        ema_update(&mut s, &array![[1.0]], 0.9999);
        assert!((s[[0, 0]] - 0.0001).abs() < 1e-15);
        let mut same = array![[0.25, -3.0]];
        ema_update(&mut same, &array![[0.25, -3.0]], 0.9999);
        assert_eq!(same, array![[0.25, -3.0]]);
        let mut s = array![[0.0]];
        for _ in 0..100 {
            ema_update(&mut s, &array![[2.0]], 0.9999);
        }
        assert!((s[[0, 0]] - 2.0 * (1.0 - 0.9999f64.powi(100))).abs() < 1e-12);
        assert!((ema_ratio_at(0.9999, 1, true) - 2.0 / 11.0).abs() < 1e-15);
        assert_eq!(ema_ratio_at(0.9999, 1, false), 0.9999);
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        // f(x) = (x - 3)^2 at x = 1: gradient -4.
        let hp = AdamParams { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 };
        let mut p = vec![array![[1.0]]];
        let mut opt = AdamW::new(hp, &p);
        let g = vec![array![[2.0 * (1.0 - 3.0)]]];
        opt.step(&mut p, &g, 1e-2, &[false]);
        let expected = 1.0 + 1e-2 * 4.0 / (4.0 + 1e-8);
        assert!((p[0][[0, 0]] - expected).abs() < 1e-12);
        let mut frozen = vec![array![[1.0]]];
        let mut opt = AdamW::new(hp, &frozen);
        opt.step(&mut frozen, &g, 1e-2, &[true]);
        assert_eq!(frozen[0][[0, 0]], 1.0);
    }
}
