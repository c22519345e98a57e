//! In-process tensor-parallel collectives over R logical ranks.
//!
//! Ranks live in one process. Reductions always accumulate in ascending rank
//! order, so results do not depend on how rank work was scheduled. This
//! module is fault-free: nothing here consults an SDC profile.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{round_bf16, DType, Tensor};

/// How per-rank work between collectives is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Round-robin on the calling thread.
    #[default]
    Sequential,
    /// Rayon workers; results are still collected in rank order.
    Parallel,
}

/// Runs `f(rank)` for every rank and returns results indexed by rank.
pub fn map_ranks<T, F>(schedule: Schedule, ranks: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    match schedule {
        Schedule::Sequential => (0..ranks).map(f).collect(),
        Schedule::Parallel => (0..ranks).into_par_iter().map(&f).collect(),
    }
}

fn check_uniform(op: &str, parts: &[Tensor]) -> Result<()> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract(format!("{op}: no ranks")))?;
    for (r, p) in parts.iter().enumerate() {
        if p.shape() != first.shape() || p.dtype() != first.dtype() {
            return Err(Error::contract(format!(
                "{op}: rank {r} holds {:?}/{:?}, rank 0 holds {:?}/{:?}",
                p.shape(),
                p.dtype(),
                first.shape(),
                first.dtype()
            )));
        }
    }
    Ok(())
}

/// Concatenates row shards in rank order; every rank receives a copy.
pub fn all_gather(shards: &[Tensor]) -> Result<Vec<Tensor>> {
    check_uniform("all_gather", shards)?;
    let full = Tensor::concat_rows(shards)?;
    Ok(vec![full; shards.len()])
}

/// Sums full tensors elementwise in rank order, then gives rank `r` row block `r`.
pub fn reduce_scatter(fulls: &[Tensor]) -> Result<Vec<Tensor>> {
    check_uniform("reduce_scatter", fulls)?;
    let ranks = fulls.len();
    let rows = fulls[0].rows();
    if !rows.is_multiple_of(ranks) {
        return Err(Error::contract(format!(
            "reduce_scatter: {rows} rows not divisible by {ranks} ranks"
        )));
    }
    let mut acc = fulls[0].data().to_vec();
    for f in &fulls[1..] {
        for (a, b) in acc.iter_mut().zip(f.data()) {
            *a += *b;
        }
    }
    let dtype = fulls[0].dtype();
    if dtype == DType::Bf16Emu {
        for v in &mut acc {
            *v = round_bf16(*v);
        }
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("reduce_scatter"));
    }
    let summed = Tensor::new(fulls[0].shape().to_vec(), acc, DType::F32)?;
    let block = rows / ranks;
    Ok((0..ranks)
        .map(|r| {
            summed
                .slice_rows(r * block, (r + 1) * block)
                .to_dtype(dtype)
        })
        .collect())
}

/// Copies `src` to each of `targets` ranks.
pub fn broadcast<T: Clone>(src: &T, targets: usize) -> Vec<T> {
    vec![src.clone(); targets]
}
