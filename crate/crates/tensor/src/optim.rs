//! AdamW with decoupled weight decay and a warmup / linear-decay schedule.

use crate::error::{Result, TensorError};
use crate::params::{GradBuffer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, base_lr: 1e-4, total_steps: 1, warmup_ratio: 0.33 }
    }
}

/// Learning rate at `step`: linear ramp from 0 to `base_lr` over the first
/// `warmup_ratio * total_steps` steps, then linear decay to 0 at `total_steps`.
/// Steps past the end get 0.
pub fn lr_at_step(step: usize, base_lr: f64, total_steps: usize, warmup_ratio: f64) -> f64 {
    if step > total_steps || total_steps == 0 {
        return 0.0;
    }
    let (step, total) = (step as f64, total_steps as f64);
    let warmup = warmup_ratio.clamp(0.0, 1.0) * total;
    if step < warmup {
        base_lr * step / warmup
    } else if total > warmup {
        base_lr * (total - step) / (total - warmup)
    } else {
        base_lr
    }
}

/// Moments and step counter for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore<f32>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Scheduled learning rate for the next step.
    pub fn next_lr(&self) -> f64 {
        let c = &self.config;
        lr_at_step(self.t as usize + 1, c.base_lr, c.total_steps, c.warmup_ratio)
    }

    /// One step at the scheduled learning rate; returns the rate used.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &GradBuffer<f32>) -> Result<f64> {
        let lr = self.next_lr();
        adamw_step(params, grads, self, lr)?;
        Ok(lr)
    }
}

/// One AdamW update with bias correction. Aborts without touching any
/// parameter when a gradient is non-finite.
pub fn adamw_step(params: &mut ParamStore<f32>, grads: &GradBuffer<f32>, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::Shape("optimizer state does not match parameter store".into()));
    }
    if !grads.is_finite() {
        return Err(TensorError::Numeric("non-finite gradient; step aborted".into()));
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
    let decay = (1.0 - lr * c.weight_decay) as f32;
    let step = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = c.eps as f32;
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = &grads.slots()[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != g.len() {
            return Err(TensorError::Shape(format!("moment size mismatch for {}", params.name(id))));
        }
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] = p[j] * decay - step * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[1], vec![value]).unwrap());
        s
    }

    fn grads_of(store: &ParamStore<f32>, g: f32) -> GradBuffer<f32> {
        let mut buf = GradBuffer::for_store(store);
        let mut graph = crate::Graph::new();
        let w = graph.param(store, crate::ParamId(0));
        let s = graph.scale(w, g as f64).unwrap();
        let loss = graph.sum(s).unwrap();
        let grads = graph.backward(loss).unwrap();
        buf.accumulate(&graph, &grads);
        buf
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = single(1.0);
        let g = grads_of(&p, 1.0);
        let cfg = AdamWConfig { base_lr: 1e-3, ..Default::default() };
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
        // 1 - lr*wd*1 - lr * m_hat / sqrt(v_hat) = 1 - 1e-5 - 1e-3
        assert!((p.get(crate::ParamId(0)).item() - 0.99899).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = single(0.7);
        let g = GradBuffer::for_store(&p);
        let mut st = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p.get(crate::ParamId(0)).item(), 0.7);
    }

    #[test]
    fn decay_shrinks_by_lr_times_wd() {
        let mut p = single(2.0);
        let g = GradBuffer::for_store(&p);
        let mut st = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        adamw_step(&mut p, &g, &mut st, 1e-2).unwrap();
        let expected = 2.0 - 1e-2 * 0.1 * 2.0;
        assert!((p.get(crate::ParamId(0)).item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut p = single(1.0);
        let mut g = GradBuffer::for_store(&p);
        g.scale(f64::NAN);
        // 0 * NaN stays NaN
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let before = p.clone();
        assert!(matches!(adamw_step(&mut p, &g, &mut st, 1e-3), Err(TensorError::Numeric(_))));
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut p = single(0.3);
            let g = grads_of(&p, -0.8);
            let mut st = OptimizerState::new(&p, AdamWConfig { total_steps: 10, ..Default::default() });
            for _ in 0..5 {
                st.step(&mut p, &g).unwrap();
            }
            p.get(crate::ParamId(0)).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_examples() {
        let lr = |s| lr_at_step(s, 1e-4, 1000, 0.33);
        assert!((lr(330) - 1e-4).abs() < 1e-12);
        assert!((lr(165) - 5e-5).abs() < 1e-12);
        assert!((lr(665) - 5e-5).abs() < 1e-12);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(1000), 0.0);
        assert_eq!(lr(1001), 0.0);
    }

    #[test]
    fn schedule_is_continuous_with_single_peak() {
        let lrs: Vec<f64> = (0..=1000).map(|s| lr_at_step(s, 1e-4, 1000, 0.33)).collect();
        let max_step = lrs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(max_step, 330);
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= 1e-4 / 300.0));
        assert!(lrs[..=330].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[330..].windows(2).all(|w| w[1] <= w[0]));
    }
}
