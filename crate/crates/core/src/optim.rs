//! AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::model::{Parameters, TensorKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eta: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub start_frac: f64,
    pub floor_frac: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !(open(self.warmup_frac) && open(self.start_frac) && open(self.floor_frac)) {
            return Err(Error::Parameter(
                "warmup_frac, start_frac and floor_frac must lie in (0, 1)".into(),
            ));
        }
        if self.total_steps == 0 || self.eta.is_nan() || self.eta <= 0.0 {
            return Err(Error::Parameter("total_steps and eta must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_frac * self.total_steps as f64
    }
}

/// Linear from `start_frac * eta` to `eta` over the warmup, then cosine down
/// to `floor_frac * eta` at `total_steps`.
pub fn lr_at(step: u64, sched: &Schedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::Range(format!("step {step} outside [0, {}]", sched.total_steps)));
    }
    let s = step as f64;
    let warm = sched.warmup_steps();
    let eta = sched.eta;
    if s <= warm {
        let start = sched.start_frac * eta;
        return Ok(start + (eta - start) * (s / warm));
    }
    let progress = (s - warm) / (sched.total_steps as f64 - warm);
    let floor = sched.floor_frac * eta;
    Ok(floor + (eta - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 2.0,
        }
    }
}

/// First and second moments per parameter tensor, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F> {
    pub m: Parameters<F>,
    pub v: Parameters<F>,
    pub t: u64,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update of a flat tensor at update count `t` (1-based).
/// Decay, when enabled, is `lr * weight_decay * p`, applied with the step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Scalar>(
    p: &mut [F],
    g: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    hp: &AdamW,
    decay: bool,
) {
    let (b1, b2) = (F::of(hp.beta1), F::of(hp.beta2));
    let bc1 = F::of(1.0 - hp.beta1.powi(t as i32));
    let bc2 = F::of(1.0 - hp.beta2.powi(t as i32));
    let lr = F::of(lr);
    let eps = F::of(hp.eps);
    let wd = if decay { F::of(hp.weight_decay) } else { F::zero() };
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (F::one() - b1) * g[i];
        v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
    }
}

/// AdamW over every tensor; norm gains are not decayed.
pub fn adamw_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &Parameters<F>,
    state: &mut OptimState<F>,
    lr: f64,
    hp: &AdamW,
) {
    state.t += 1;
    let t = state.t;
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, kind, p), (_, _, g)), (_, _, m)), (_, _, v)) in
        params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
    {
        adamw_update(
            &mut p.data,
            &g.data,
            &mut m.data,
            &mut v.data,
            t,
            lr,
            hp,
            kind == TensorKind::Weight,
        );
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut Parameters<F>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.data.iter())
        .map(|x| x.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for (_, _, t) in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_schedule() -> Schedule {
        Schedule {
            eta: 1.5e-4,
            total_steps: 200_000,
            warmup_frac: 0.05,
            start_frac: 0.01,
            floor_frac: 0.1,
        }
    }

    #[test]
    fn schedule_anchors() {
        let s = reference_schedule();
        assert!((lr_at(0, &s).unwrap() - 1.5e-6).abs() <= 1e-12 * 1.5e-6);
        assert!((lr_at(10_000, &s).unwrap() - 1.5e-4).abs() <= 1e-12);
        assert!((lr_at(200_000, &s).unwrap() - 1.5e-5).abs() <= 1e-12 * 1.5e-5);
        assert!(matches!(lr_at(200_001, &s), Err(Error::Range(_))));
    }

    #[test]
    fn schedule_is_continuous_and_shaped() {
        let s = reference_schedule();
        let left = lr_at(10_000, &s).unwrap();
        let right = lr_at(10_001, &s).unwrap();
        assert!((left - right).abs() < 1e-6 * s.eta);
        let mut prev = 0.0;
        for step in (0..=10_000).step_by(500) {
            let lr = lr_at(step, &s).unwrap();
            assert!(lr > prev);
            prev = lr;
        }
        for step in (10_000..=200_000).step_by(5000) {
            let lr = lr_at(step, &s).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn scalar_adamw_step() {
        let hp = AdamW::default();
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &hp, true);
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 2.0);
        assert!((p[0] - want).abs() < 1e-15);
        assert!((p[0] - 0.700000001).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let (mut p, mut m, mut v) = ([0.3f64, -2.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &hp, true);
        assert_eq!(p, [0.3, -2.0]);
        // gains are exempt from decay even with lambda = 2
        let hp = AdamW::default();
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, 0.1, &hp, false);
        assert_eq!(p, [0.3, -2.0]);
    }
}
