//! AdamW, the warmup-cosine learning-rate schedule, and EMA updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;

/// Linear warmup from 0 to `lr_max` over the first
/// `ceil(warmup_frac · total_steps)` steps, then cosine decay to `lr_min`
/// at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_frac: f64, lr_max: f64, lr_min: f64) -> f64 {
    let warmup = (warmup_frac * total_steps as f64).ceil() as u64;
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    lr_min + (lr_max - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for every parameter tensor, in
/// [`Params::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Params>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. Decay `θ ← θ − lr·wd·θ` is applied separately from the
/// bias-corrected Adam step. Non-finite gradients abort before anything is
/// modified.
pub fn adamw_step<P: Params>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors but optimizer tracks {}",
            grad_tensors.len(),
            state.m.len()
        )));
    }
    for g in &grad_tensors {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(g.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((theta, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_tensors)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if theta.len() != g.data.len() || m.len() != theta.len() {
            return Err(Error::Shape(format!("parameter `{}` changed size", g.name)));
        }
        for i in 0..theta.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta[i] = theta[i] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `target ← m·target + (1 − m)·online` for every tensor.
pub fn ema_update<P: Params>(target: &mut P, online: &P, momentum: f64) {
    let src = online.tensors();
    for (dst, s) in target.tensors_mut().into_iter().zip(src) {
        dst.iter_mut()
            .zip(s.data)
            .for_each(|(t, o)| *t = momentum * *t + (1.0 - momentum) * o);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    fn scalar(v: f64) -> Dense {
        let mut d = Dense::zeros(1, 1);
        d.weight[[0, 0]] = v;
        d
    }

    #[test]
    fn schedule_endpoints() {
        let (lo, hi) = (1e-5, 1e-3);
        assert_eq!(lr_at(0, 100, 0.1, hi, lo), 0.0);
        assert_eq!(lr_at(10, 100, 0.1, hi, lo), hi);
        assert!((lr_at(100, 100, 0.1, hi, lo) - lo).abs() < 1e-18);
        assert!((lr_at(55, 100, 0.1, hi, lo) - (hi + lo) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_non_increasing_after_warmup() {
        let lrs: Vec<f64> = (10..=100).map(|s| lr_at(s, 100, 0.1, 1.0, 0.01)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = scalar(0.7);
        let g = Dense::zeros(1, 1);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.weight[[0, 0]], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut g = Dense::zeros(1, 1);
        g.weight[[0, 0]] = 1.0;
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert!((p.weight[[0, 0]] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut p = scalar(1.0);
        let g = Dense::zeros(1, 1);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert!((p.weight[[0, 0]] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut g = Dense::zeros(1, 1);
        g.bias[0] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &g, &mut st, 0.1, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        assert_eq!(p.weight[[0, 0]], 1.0);
    }

    #[test]
    fn ema_cases() {
        let online = scalar(1.0);
        let mut t = scalar(0.0);
        ema_update(&mut t, &online, 0.0);
        assert_eq!(t.weight[[0, 0]], 1.0);

        let mut t = scalar(0.25);
        ema_update(&mut t, &online, 1.0 - 1e-12);
        assert!((t.weight[[0, 0]] - 0.25).abs() < 1e-10);

        let mut t = scalar(0.0);
        for _ in 0..100 {
            ema_update(&mut t, &online, 0.99);
        }
        let expected = 1.0 - 0.99f64.powi(100);
        assert!((t.weight[[0, 0]] - expected).abs() < 1e-12);
        assert!((expected - 0.6340).abs() < 1e-4);
    }
}
