use serde::{Deserialize, Serialize};

use crate::float::Float;
use crate::model::layers::Module;

/// Adaptive-moment optimizer over every learnable slot of a [`Module`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Float> Adam<T> {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using the gradients
    /// currently accumulated in `module`.
    pub fn update<M: Module<T>>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let step_size = T::c(lr * bias2.sqrt() / bias1);
        let (b1, b2, eps) = (T::c(self.beta1), T::c(self.beta2), T::c(self.eps * bias2.sqrt()));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit("", &mut |slot| {
            let Some(grad) = slot.grad else { return };
            if ms.len() <= idx {
                ms.push(vec![T::zero(); grad.len()]);
                vs.push(vec![T::zero(); grad.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for (((p, &g), mi), vi) in slot.value.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *p -= step_size * *mi / (vi.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Float, M: Module<T>>(module: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    module.visit("", &mut |slot| {
        if let Some(g) = slot.grad {
            sq += g.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        module.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        });
    }
    norm
}

/// Multiplies the learning rate by `factor` whenever the monitored metric
/// (higher is better) has not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience: patience.max(1),
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records an epoch's metric; returns whether the rate was reduced.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.lr *= self.factor;
            self.reductions += 1;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::ParamSlot;

    struct Quadratic {
        x: Vec<f64>,
        g: Vec<f64>,
    }

    impl Module<f64> for Quadratic {
        fn visit(&mut self, _prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, f64>)) {
            f(ParamSlot {
                name: "x".into(),
                shape: vec![self.x.len()],
                value: &mut self.x,
                grad: Some(&mut self.g),
            });
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut q = Quadratic {
            x: vec![1.0, -2.0],
            g: vec![0.5, -3.0],
        };
        let mut adam = Adam::default();
        adam.update(&mut q, 0.1);
        // bias-corrected first step is lr * sign(g)
        assert!((q.x[0] - 0.9).abs() < 1e-6);
        assert!((q.x[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut q = Quadratic {
            x: vec![3.0, -4.0],
            g: vec![0.0; 2],
        };
        let mut adam = Adam::default();
        for _ in 0..2000 {
            q.g = q.x.iter().map(|v| 2.0 * v).collect();
            adam.update(&mut q, 0.05);
        }
        assert!(q.x.iter().all(|v| v.abs() < 1e-2), "{:?}", q.x);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut q = Quadratic {
            x: vec![0.0; 2],
            g: vec![3.0, 4.0],
        };
        assert_eq!(clip_grad_norm(&mut q, 1.0), 5.0);
        assert!((q.g[0] - 0.6).abs() < 1e-12 && (q.g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn improving_metric_never_reduces() {
        let mut s = PlateauScheduler::new(4e-4, 0.5, 10);
        for e in 0..50 {
            assert!(!s.observe(e as f64 * 0.01));
        }
        assert_eq!(s.lr, 4e-4);
    }

    #[test]
    fn frozen_metric_reduces_twice() {
        let mut s = PlateauScheduler::new(4e-4, 0.5, 10);
        s.observe(0.3);
        for _ in 0..20 {
            s.observe(0.3);
        }
        assert_eq!(s.reductions, 2);
        assert!((s.lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn lr_is_non_increasing() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2);
        let mut prev = s.lr;
        for m in [0.1, 0.3, 0.2, 0.2, 0.5, 0.1, 0.1, 0.1, 0.6] {
            s.observe(m);
            assert!(s.lr <= prev);
            prev = s.lr;
        }
    }
}
