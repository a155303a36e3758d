use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};

use super::params::ParamSet;
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Linear,
}

/// AdamW hyperparameters plus a warmup-then-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Linear,
            warmup_ratio: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.warmup_ratio);
        if ok {
            Ok(())
        } else {
            Err(GagError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate used at 0-based optimizer step `step` of `total`.
    /// Warmup ramps linearly from zero; the decay phase ends at zero.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_ratio * total as f64).ceil() as usize;
        if step < warmup {
            return self.lr * step as f64 / warmup.max(1) as f64;
        }
        let span = total.saturating_sub(warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        match self.schedule {
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
            Schedule::Linear => self.lr * (1.0 - progress).max(0.0),
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<F = f32> {
    cfg: AdamWConfig,
    total_steps: usize,
    step: usize,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            total_steps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.step, self.total_steps)
    }

    /// Applies one update. Refuses to touch a frozen set.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        if params.is_frozen() {
            return Err(GagError::Frozen("optimizer step on a frozen parameter set".into()));
        }
        for g in grads.values() {
            if !g.is_finite() {
                return Err(GagError::Numeric("non-finite gradient".into()));
            }
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (lr_f, b1f, b2f, eps) = (F::c(lr), F::c(b1), F::c(b2), F::c(self.cfg.eps));
        let decay = F::c(1.0 - lr * self.cfg.weight_decay);
        let (inv_bc1, inv_bc2) = (F::c(1.0 / bc1), F::c(1.0 / bc2));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(GagError::Dimension(format!("gradient for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![F::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1f * *mi + (F::one() - b1f) * gi;
                *vi = b2f * *vi + (F::one() - b2f) * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *w = *w * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(schedule: Schedule, warmup_ratio: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 1.0,
            schedule,
            warmup_ratio,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_with_warmup() {
        let c = cfg(Schedule::Cosine, 0.1);
        assert_eq!(c.lr_at(0, 100), 0.0);
        assert!((c.lr_at(5, 100) - 0.5).abs() < 1e-12);
        assert!((c.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(55, 100) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(100, 100).abs() < 1e-12);
    }

    #[test]
    fn linear_schedule_with_warmup() {
        let c = cfg(Schedule::Linear, 0.03);
        // ceil(0.03 * 100) = 3 warmup steps
        assert!((c.lr_at(1, 100) - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.lr_at(3, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(3 + 97 / 2, 100) - (1.0 - 48.0 / 97.0)).abs() < 1e-12);
    }

    #[test]
    fn step_count_is_monotone_and_frozen_sets_error() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::vector(vec![1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![0.5]));
        let mut opt = AdamW::new(AdamWConfig::default(), 10).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(opt.steps_taken(), 2);
        let before = p.clone();
        p.freeze();
        assert!(matches!(opt.step(&mut p, &g), Err(GagError::Frozen(_))));
        assert_eq!(opt.steps_taken(), 2);
        assert_eq!(p.get("w").unwrap(), before.get("w").unwrap());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::vector(vec![1.0, 1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![3.0, -0.2]));
        let c = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(c, 10).unwrap();
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }
}
