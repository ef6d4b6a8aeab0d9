use std::f64::consts::PI;

use crate::params::{Grads, ParamStore};
use crate::tensor::{mismatch, NnError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.1;
pub const MAX_GRAD_NORM: f64 = 2.0;

/// Moment accumulators for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay: WEIGHT_DECAY,
        }
    }
}

impl AdamW {
    /// One update: decoupled decay `θ -= lr·λ·θ`, then the bias-corrected
    /// Adam step.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &Grads,
        state: &mut OptimizerState,
        lr: f64,
    ) -> Result<(), NnError> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(mismatch(
                "adamw",
                &[store.len()],
                &[grads.len(), state.m.len()],
            ));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(mismatch("adamw", &[p.len()], &[g.len()]));
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * self.weight_decay * p[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup followed by cosine decay to a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup: u64,
    pub peak: f64,
    pub floor: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(total_steps: u64) -> Self {
        LrSchedule {
            warmup: 2000,
            peak: 3e-4,
            floor: 1.5e-5,
            total_steps,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        lr_schedule(step, self)
    }
}

pub fn lr_schedule(step: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup {
        return s.peak * step as f64 / s.warmup as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup);
    let done = step - s.warmup;
    if span == 0 || done >= span {
        return s.floor;
    }
    if done == 0 {
        return s.peak;
    }
    let progress = done as f64 / span as f64;
    s.floor + (s.peak - s.floor) * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut grads = Grads::zeros_like(&store);
        grads.iter_mut().next().unwrap()[0] = 1.0;
        let mut state = OptimizerState::new(&store);
        AdamW::default()
            .step(&mut store, &grads, &mut state, 1e-3)
            .unwrap();
        let x = store.iter().next().unwrap().1.data()[0];
        assert!((x + 1e-3).abs() < 1e-9, "{x}");
    }

    #[test]
    fn zero_gradient_without_decay_is_inert() {
        let mut store = scalar_store(0.7);
        let grads = Grads::zeros_like(&store);
        let mut state = OptimizerState::new(&store);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..5 {
            opt.step(&mut store, &grads, &mut state, 1e-2).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().1.data()[0], 0.7);
    }

    #[test]
    fn clipping_scales_down_only() {
        let store = {
            let mut s = ParamStore::new();
            s.add("a", Tensor::zeros(vec![2]));
            s
        };
        let mut g = Grads::zeros_like(&store);
        g.iter_mut().next().unwrap().copy_from_slice(&[0.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 2.0), 4.0);
        assert_eq!(g.iter().next().unwrap(), &[0.0, 2.0]);
        g.iter_mut().next().unwrap().copy_from_slice(&[0.6, 0.8]);
        clip_grad_norm(&mut g, 2.0);
        assert_eq!(g.iter().next().unwrap(), &[0.6, 0.8]);
        let mut z = Grads::zeros_like(&store);
        assert_eq!(clip_grad_norm(&mut z, 2.0), 0.0);
        assert_eq!(z.iter().next().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn schedule_landmarks() {
        let s = LrSchedule::new(10_000);
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(1000), 1.5e-4);
        assert_eq!(s.at(2000), 3e-4);
        assert_eq!(s.at(10_000), 1.5e-5);
        let mut prev = s.at(2000);
        for step in (2100..=10_000).step_by(100) {
            let lr = s.at(step);
            assert!(lr <= prev && lr >= 1.5e-5);
            prev = lr;
        }
    }
}
