use ndarray::{Array2, Zip};

use super::params::ParamSet;
use crate::error::{ensure, Result};

/// Adam with decoupled weight decay on parameters flagged for decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Array2::zeros(p.dim()))
                .collect()
        };
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        ensure!(
            grads.len() == params.len(),
            Shape,
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        );
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decays = params.decays().to_vec();
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            ensure!(
                grads[i].dim() == p.dim(),
                Shape,
                "gradient {i}: {:?} vs {:?}",
                grads[i].dim(),
                p.dim()
            );
            let decay = if decays[i] { wd } else { 0.0 };
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
        Ok(())
    }
}

/// Plain gradient descent.
pub fn sgd_step(params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) -> Result<()> {
    ensure!(
        grads.len() == params.len(),
        Shape,
        "{} gradients for {} parameters",
        grads.len(),
        params.len()
    );
    for (p, g) in params.values_mut().iter_mut().zip(grads) {
        p.scaled_add(-lr, g);
    }
    Ok(())
}

/// Linear warmup to `peak`, then cosine decay to `floor` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        assert!((cosine_lr(0, 100, 10, 1.0, 0.0) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(9, 100, 10, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((cosine_lr(10, 100, 10, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((cosine_lr(55, 100, 10, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 10, 1.0, 0.1) - 0.1 < 1e-15);
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut ps = ParamSet::new();
        ps.insert("w", array![[1.0, -1.0]], false);
        let mut opt = AdamW::new(&ps, 0.9, 0.95, 0.05);
        opt.step(&mut ps, &[array![[0.3, -7.0]]], 0.01).unwrap();
        let w = ps.get("w").unwrap();
        assert!((w[[0, 0]] - 0.99).abs() < 1e-9 && (w[[0, 1]] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn decay_only_on_flagged() {
        let mut ps = ParamSet::new();
        ps.insert("a", array![[2.0]], true);
        ps.insert("b", array![[2.0]], false);
        let mut opt = AdamW::new(&ps, 0.9, 0.95, 0.5);
        opt.step(&mut ps, &[array![[0.0]], array![[0.0]]], 0.1)
            .unwrap();
        assert!((ps.get("a").unwrap()[[0, 0]] - 1.9).abs() < 1e-12);
        assert_eq!(ps.get("b").unwrap()[[0, 0]], 2.0);
        assert!(opt.step(&mut ps, &[array![[0.0]]], 0.1).is_err());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", array![[3.0, -2.0]], false);
        let mut opt = AdamW::new(&ps, 0.9, 0.95, 0.0);
        for _ in 0..500 {
            let g = ps.get("x").unwrap() * 2.0;
            opt.step(&mut ps, &[g], 0.05).unwrap();
        }
        assert!(ps.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }
}
