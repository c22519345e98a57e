//! Tensor-parallel decoder-only transformer with sequence parallelism.
//!
//! Each layer: all-gather -> GQA attention -> row-parallel output projection
//! -> `fwd_attn` hook -> reduce-scatter -> residual + layer-norm ->
//! all-gather -> SwiGLU FFN -> `fwd_ffn` hook -> reduce-scatter -> residual
//! and layer-norm. Backward mirrors this with `bwd_ffn` and `bwd_attn` hooks on
//! the input gradients before their reduce-scatter.

mod data;
mod exec;
mod gradcheck;
mod optim;
mod params;
mod snapshot;

pub use data::{microbatch_tokens, TokenBatch};
pub use exec::{backward, forward, Cache, Exec, LinearCheck};
pub use gradcheck::{gradcheck, GradcheckReport, TensorError};
pub use optim::{adam_step, clip_by_global_norm, global_norm, AdamHyper, AdamState, LrSchedule};
pub use params::{LayerParams, Params};
pub use snapshot::{read_snapshot, write_snapshot, SnapshotEntry};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::SiteKind;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub tp_degree: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    /// FFN intermediate width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Laptop-scale default.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            kv_heads: 2,
            seq_len: 128,
            vocab: 256,
            tp_degree: 4,
            micro_batch: 1,
            grad_accum: 4,
            ffn_mult: 4,
            dtype: DType::Bf16Emu,
        }
    }

    /// Gradient-check configuration.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 4,
            kv_heads: 2,
            seq_len: 8,
            vocab: 16,
            tp_degree: 1,
            micro_batch: 1,
            grad_accum: 1,
            ffn_mult: 4,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("tp_degree", self.tp_degree),
            ("micro_batch", self.micro_batch),
            ("grad_accum", self.grad_accum),
            ("ffn_mult", self.ffn_mult),
        ];
        for (k, v) in pos {
            if v == 0 {
                return Err(Error::config(format!("model.{k}"), "must be positive"));
            }
        }
        let div = |key: &str, a: usize, b: usize, what: &str| {
            if !a.is_multiple_of(b) {
                Err(Error::config(
                    format!("model.{key}"),
                    format!("{a} is not divisible by {what} ({b})"),
                ))
            } else {
                Ok(())
            }
        };
        div("heads", self.heads, self.kv_heads, "kv_heads")?;
        div("heads", self.heads, self.tp_degree, "tp_degree")?;
        div("hidden", self.hidden, self.heads, "heads")?;
        div("seq_len", self.seq_len, self.tp_degree, "tp_degree")?;
        div("ffn_mult", self.ffn_hidden(), self.tp_degree, "tp_degree")?;
        if self.vocab > u32::MAX as usize {
            return Err(Error::config("model.vocab", "too large"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Query heads sharing one key/value head.
    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn heads_per_rank(&self) -> usize {
        self.heads / self.tp_degree
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    /// Activation rows per microstep (`MBS * L`).
    pub fn rows(&self) -> usize {
        self.micro_batch * self.seq_len
    }

    pub fn shard_rows(&self) -> usize {
        self.rows() / self.tp_degree
    }

    /// Elements compared per hook site per layer: `TP * MBS * L * H`.
    pub fn site_elements(&self) -> usize {
        self.tp_degree * self.rows() * self.hidden
    }
}

/// A hook point: site kind, decoder layer and TP rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookSite {
    pub kind: SiteKind,
    pub layer: usize,
    pub rank: usize,
}

/// Observer/rewriter invoked on the per-rank tensors at a hook point,
/// immediately before the reduce-scatter. `tensors[r]` belongs to rank `r`.
pub trait Hooks {
    fn on_site(&mut self, kind: SiteKind, layer: usize, tensors: &mut [Tensor]) -> Result<()>;
}

/// Hooks that do nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl Hooks for NoHooks {
    fn on_site(&mut self, _: SiteKind, _: usize, _: &mut [Tensor]) -> Result<()> {
        Ok(())
    }
}

/// Records clones of every tensor seen, in firing order.
#[derive(Debug, Default, Clone)]
pub struct RecordingHooks {
    pub fired: Vec<(SiteKind, usize, Vec<Tensor>)>,
}

impl Hooks for RecordingHooks {
    fn on_site(&mut self, kind: SiteKind, layer: usize, tensors: &mut [Tensor]) -> Result<()> {
        self.fired.push((kind, layer, tensors.to_vec()));
        Ok(())
    }
}
