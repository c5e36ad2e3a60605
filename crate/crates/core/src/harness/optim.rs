//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to 0 at
/// `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(ps: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ps.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with gradients indexed like the store's parameters. Frozen
    /// parameters and missing gradients are skipped; `scale` multiplies every
    /// gradient (for averaging over a batch).
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, scale: f64) -> Result<()> {
        if grads.len() != ps.len() || self.m.len() != ps.len() {
            return Err(Error::Config("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in ps.params_mut().iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.value.len() {
                let gk = g[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                let decay = if p.decay { self.weight_decay * p.value[k] as f64 } else { 0.0 };
                let next = p.value[k] as f64 - lr * (update + decay);
                if !next.is_finite() {
                    return Err(Error::Numerics(format!("update of {} diverged", p.name)));
                }
                p.value[k] = next as f32;
            }
        }
        Ok(())
    }
}

/// Running per-parameter gradient sums over a batch.
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub sums: Vec<Option<Vec<f64>>>,
    pub count: usize,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        Self { sums: vec![None; n], count: 0 }
    }

    pub fn add(&mut self, grads: Vec<Option<Vec<f32>>>) {
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b as f64),
                None => *slot = Some(g.iter().map(|&v| v as f64).collect()),
            }
        }
        self.count += 1;
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = None);
        self.count = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn schedule_shape() {
        let s = Schedule { peak: 1e-3, warmup: 10, total: 100 };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in 9..=120 {
            let v = s.lr(t);
            assert!(v <= prev + 1e-18 && (0.0..=1e-3).contains(&v));
            prev = v;
        }
        assert!(s.lr(100).abs() < 1e-18);
    }

    #[test]
    fn adamw_minimizes_a_quadratic_and_skips_frozen() {
        let mut ps = ParamStore::new(0);
        let a = ps.add("a", &[2], Init::Values(vec![3.0, -2.0]));
        let b = ps.add("b", &[1], Init::Const(5.0));
        ps.params_mut()[b.index()].frozen = true;
        let mut opt = AdamW::new(&ps, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = ps.value(a).iter().map(|&v| 2.0 * v as f64).collect();
            opt.step(&mut ps, &[Some(g), Some(vec![1.0])], 1e-2, 1.0).unwrap();
        }
        assert!(ps.value(a).iter().all(|v| v.abs() < 1e-2));
        assert_eq!(ps.value(b), &[5.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut ps = ParamStore::new(0);
        let w = ps.add("w", &[1, 1], Init::Const(1.0));
        let mut opt = AdamW::new(&ps, 0.5);
        opt.step(&mut ps, &[Some(vec![0.0])], 0.1, 1.0).unwrap();
        assert!((ps.value(w)[0] - 0.95).abs() < 1e-7);
    }
}
