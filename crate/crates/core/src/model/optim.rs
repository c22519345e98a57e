use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

/// First and second moments (f32) plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// L2 norm over every gradient element, accumulated in f64 in canonical order.
pub fn global_norm(grads: &Params) -> f64 {
    let mut sq = 0.0f64;
    for t in grads.tensors() {
        for &v in t.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    sq.sqrt()
}

/// Rescales `grads` so the global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_by_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = (max_norm / n) as f32;
        for t in grads.tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    n
}

/// One Adam update with L2 weight decay folded into the (already clipped)
/// gradient and bias-corrected moments.
pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    hp: &AdamHyper,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    let bc1 = (1.0 - hp.beta1.powi(t)) as f32;
    let bc2 = (1.0 - hp.beta2.powi(t)) as f32;
    let (lr, eps, wd) = (lr as f32, hp.eps as f32, hp.weight_decay as f32);
    let pt = params.tensors_mut();
    let gt = grads.tensors();
    let mt = state.m.tensors_mut();
    let vt = state.v.tensors_mut();
    if pt.len() != gt.len() {
        return Err(Error::contract(
            "adam_step: gradient layout differs from parameters",
        ));
    }
    for (((p, g), m), v) in pt.into_iter().zip(gt).zip(mt).zip(vt) {
        if p.shape() != g.shape() {
            return Err(Error::contract(
                "adam_step: gradient shape differs from parameter",
            ));
        }
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = gi + wd * *pi;
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            *pi -= lr * mh / (vh.sqrt() + eps);
        }
    }
    if params
        .tensors()
        .iter()
        .any(|t| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numerical("adam_step"));
    }
    Ok(())
}

/// Linear warmup then cosine decay to `min_lr_frac * peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total: u64,
    pub warmup: u64,
    pub min_lr_frac: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total: u64, warmup_frac: f64, min_lr_frac: f64) -> Self {
        let warmup = ((warmup_frac * total as f64).round() as u64).max(1);
        LrSchedule {
            peak,
            total,
            warmup,
            min_lr_frac,
        }
    }

    /// Learning rate for 0-based update `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.peak * self.min_lr_frac;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny() -> Params {
        Params::init(&ModelConfig::tiny(), 1).unwrap()
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        let hp = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adam_step(&mut p, &g, &mut st, &hp, 1e-3).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamHyper::default(), 1e-3).unwrap();
        for t in p.tensors() {
            for &v in t.data() {
                assert!((v as f64 + 1e-3).abs() < 1e-7, "{v}");
            }
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = tiny().zeros_like();
        g.embed.data_mut()[0] = 6.0;
        g.head.data_mut()[0] = 8.0;
        let before = clip_by_global_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = tiny().zeros_like();
        small.embed.data_mut()[0] = 0.5;
        let kept = small.clone();
        clip_by_global_norm(&mut small, 1.0);
        assert!(small.bit_eq(&kept));
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1e-3, 200, 0.02, 0.1);
        assert_eq!(s.warmup, 4);
        assert!((s.lr(0) - 2.5e-4).abs() < 1e-12);
        assert!((s.lr(3) - 1e-3).abs() < 1e-12);
        assert!((s.lr(4) - 1e-3).abs() < 1e-12);
        assert!((s.lr(200) - 1e-4).abs() < 1e-12);
        assert!(s.lr(100) < s.lr(50));
        assert_eq!(LrSchedule::new(1e-3, 10, 0.02, 0.0).warmup, 1);
    }

    #[test]
    fn shape_mismatch_is_contract() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.head = Tensor::zeros(vec![1, 1], crate::tensor::DType::F32);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, &AdamHyper::default(), 1e-3).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
