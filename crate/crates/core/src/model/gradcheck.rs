use serde::Serialize;

use super::{backward, forward, microbatch_tokens, Exec, ModelConfig, NoHooks, Params};
use crate::collectives::Schedule;
use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Serialize)]
pub struct TensorError {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub loss: f64,
    pub tensors: Vec<TensorError>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorError> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares backward against central differences for every parameter
/// element, using one microbatch.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, h: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    if cfg.dtype != DType::F32 {
        return Err(Error::contract("gradcheck runs in f32"));
    }
    let params = Params::init(cfg, seed)?;
    let batch = microbatch_tokens(cfg, seed, 0, 0);
    let loss_at = |p: &Params| -> Result<f64> {
        let mut exec = Exec::new(Schedule::Sequential);
        Ok(forward(cfg, p, &batch, &mut exec, &mut NoHooks)?.loss)
    };

    let mut exec = Exec::new(Schedule::Sequential);
    let cache = forward(cfg, &params, &batch, &mut exec, &mut NoHooks)?;
    let grads = backward(cfg, &params, &cache, &mut exec, &mut NoHooks)?;

    let mut probe = params.clone();
    let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let n = params.tensors()[ti].len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = params.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = (orig as f64 + h) as f32;
            let up = loss_at(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = (orig as f64 - h) as f32;
            let down = loss_at(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic = grads.tensors()[ti].data();
        let (mut sa, mut sn, mut sd) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &nm) in analytic.iter().zip(&numeric) {
            let a = a as f64;
            sa += a * a;
            sn += nm * nm;
            sd += (a - nm) * (a - nm);
        }
        let (sa, sn, sd) = (sa.sqrt(), sn.sqrt(), sd.sqrt());
        let denom = sa.max(sn);
        let rel_err = if denom == 0.0 { 0.0 } else { sd / denom };
        tensors.push(TensorError {
            name,
            analytic_norm: sa,
            numeric_norm: sn,
            rel_err,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        h,
        loss: cache.loss,
        tensors,
        max_rel_err,
    })
}
