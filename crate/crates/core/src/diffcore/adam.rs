//! Adam with bias correction, plus the warmup/cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::diffcore::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators shaped like the parameters they
/// track, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update in place. Rejects non-finite gradients before any
/// mutation so a bad step never half-applies.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Config(format!("negative learning rate {lr}")));
    }
    if !params.same_shapes(grads) {
        return Err(Error::Shape("adam: gradient shapes differ from parameters".into()));
    }
    if !grads.is_finite() {
        let name = grads
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.to_string())
            .unwrap_or_default();
        return Err(Error::numeric(name, "non-finite gradient"));
    }

    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).unwrap();
        let m = state.m.get_mut(name).unwrap();
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
        }
        let v = state.v.get_mut(name).unwrap();
        for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        }
        let m = state.m.get(name).unwrap();
        let v = state.v.get(name).unwrap();
        for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Piecewise schedule: linear 0 -> lr_max over `[0, warmup]`, then
/// cosine decay lr_max -> lr_min over `[warmup, total]`.
pub fn lr_schedule(iter: u64, warmup_iters: u64, total_iters: u64, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(warmup_iters < total_iters);
    debug_assert!(iter <= total_iters);
    if iter <= warmup_iters {
        if warmup_iters == 0 {
            return lr_max;
        }
        lr_max * iter as f64 / warmup_iters as f64
    } else {
        let progress = (iter - warmup_iters) as f64 / (total_iters - warmup_iters) as f64;
        lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    fn single_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = single_param(1.5);
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(params.get("p").unwrap().item(), 1.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_lr_updates_moments_but_not_params() {
        let mut params = single_param(1.5);
        let mut grads = params.zeros_like();
        grads.get_mut("p").unwrap().data_mut()[0] = 2.0;
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grads, &mut state, 0.0).unwrap();
        assert_eq!(params.get("p").unwrap().item(), 1.5);
        assert!(state.m.get("p").unwrap().item() > 0.0);
        assert!(state.v.get("p").unwrap().item() > 0.0);
    }

    #[test]
    fn three_steps_match_hand_stepped_recurrence() {
        let mut params = single_param(0.0);
        let mut grads = params.zeros_like();
        grads.get_mut("p").unwrap().data_mut()[0] = 1.0;
        let mut state = AdamState::new(&params, AdamConfig::default());
        let lr = 0.1;
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut state, lr).unwrap();
        }

        // hand-stepped oracle
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((params.get("p").unwrap().item() - p).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_applies_nothing() {
        let mut params = single_param(1.0);
        let mut grads = params.zeros_like();
        grads.get_mut("p").unwrap().data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = adam_step(&mut params, &grads, &mut state, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(params.get("p").unwrap().item(), 1.0);
        assert_eq!(state.step, 0);
        assert_eq!(state.m.get("p").unwrap().item(), 0.0);
    }

    #[test]
    fn schedule_hits_paper_endpoints() {
        let (w, t, max, min) = (5000, 200_000, 5e-4, 2.5e-5);
        assert_eq!(lr_schedule(0, w, t, max, min), 0.0);
        assert_eq!(lr_schedule(w, w, t, max, min), max);
        assert!((lr_schedule(t, w, t, max, min) - min).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_non_increasing_after_warmup() {
        let (w, t, max, min) = (100u64, 1000u64, 5e-4, 2.5e-5);
        let at_w = lr_schedule(w, w, t, max, min);
        let just_after = lr_schedule(w + 1, w, t, max, min);
        assert!((at_w - max).abs() < 1e-15);
        assert!(just_after <= at_w);
        let mut prev = at_w;
        for i in (w + 1)..=t {
            let lr = lr_schedule(i, w, t, max, min);
            assert!(lr <= prev + 1e-15, "not monotone at {i}");
            prev = lr;
        }
    }
}
