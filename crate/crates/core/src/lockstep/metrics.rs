use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::SiteKind;
use crate::model::{HookSite, ModelConfig};
use crate::tensor::Tensor;

/// Healthy and unhealthy views of one hook tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmoduleCapture {
    pub site: HookSite,
    pub microstep: u64,
    pub healthy: Tensor,
    pub unhealthy: Tensor,
}

/// What the severity average runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityMode {
    /// Non-zero entries of the relative-difference tensor (mismatching positions).
    #[default]
    Mismatching,
    /// Every position whose reference value is non-zero.
    NonzeroReference,
}

/// Per-layer mismatch breakdown for one site kind and microstep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMetric {
    pub layer: usize,
    pub mismatches: u64,
    pub freq: f64,
    /// Max over ranks of the per-rank severity average.
    pub sev: f64,
    pub zero_ref: u64,
}

/// Aggregate over layers: frequency averaged, severity maxed.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReport {
    pub kind: SiteKind,
    pub microstep: u64,
    pub freq: f64,
    pub sev: f64,
    pub zero_ref_count: u64,
    pub layers: Vec<LayerMetric>,
}

/// Count of elements whose stored bit patterns differ.
pub fn mismatch_count(healthy: &Tensor, unhealthy: &Tensor) -> u64 {
    healthy
        .data()
        .iter()
        .zip(unhealthy.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count() as u64
}

/// Severity average for one rank and the number of zero-reference mismatches.
pub fn rank_severity(healthy: &Tensor, unhealthy: &Tensor, mode: SeverityMode) -> (f64, u64) {
    let mut sum = 0.0f64;
    let mut count = 0u64;
    let mut zero_ref = 0u64;
    for (&f, &g) in healthy.data().iter().zip(unhealthy.data()) {
        let differs = f.to_bits() != g.to_bits();
        if f == 0.0 {
            zero_ref += differs as u64;
            continue;
        }
        let rel = (g as f64 - f as f64).abs() / (f as f64).abs();
        match mode {
            SeverityMode::Mismatching => {
                if rel != 0.0 {
                    sum += rel;
                    count += 1;
                }
            }
            SeverityMode::NonzeroReference => {
                sum += rel;
                count += 1;
            }
        }
    }
    let avg = if count == 0 { 0.0 } else { sum / count as f64 };
    (avg, zero_ref)
}

/// Metrics for one layer given every rank's healthy and unhealthy tensors.
pub fn layer_metric(
    layer: usize,
    healthy: &[Tensor],
    unhealthy: &[Tensor],
    cfg: &ModelConfig,
    mode: SeverityMode,
) -> Result<LayerMetric> {
    if healthy.len() != cfg.tp_degree || unhealthy.len() != cfg.tp_degree {
        return Err(Error::contract(format!(
            "layer {layer}: expected {} rank captures",
            cfg.tp_degree
        )));
    }
    let mut mismatches = 0;
    let mut sev = 0.0f64;
    let mut zero_ref = 0;
    for (h, u) in healthy.iter().zip(unhealthy) {
        if h.shape() != u.shape() || h.len() != cfg.rows() * cfg.hidden {
            return Err(Error::contract(format!(
                "layer {layer}: capture shape {:?}",
                h.shape()
            )));
        }
        mismatches += mismatch_count(h, u);
        let (s, z) = rank_severity(h, u, mode);
        sev = sev.max(s);
        zero_ref += z;
    }
    let freq = mismatches as f64 / cfg.site_elements() as f64;
    Ok(LayerMetric {
        layer,
        mismatches,
        freq,
        sev,
        zero_ref,
    })
}

/// Combines per-layer metrics (one per decoder layer, in order).
pub fn aggregate(kind: SiteKind, microstep: u64, layers: Vec<LayerMetric>) -> Result<SiteReport> {
    if layers.is_empty() {
        return Err(Error::contract("no layer metrics to aggregate"));
    }
    let freq = layers.iter().map(|l| l.freq).sum::<f64>() / layers.len() as f64;
    let sev = layers.iter().map(|l| l.sev).fold(0.0, f64::max);
    let zero_ref_count = layers.iter().map(|l| l.zero_ref).sum();
    if !freq.is_finite() || !sev.is_finite() {
        return Err(Error::Invariant(format!(
            "{kind} microstep {microstep}: non-finite metric"
        )));
    }
    if freq == 0.0 && sev != 0.0 {
        return Err(Error::Invariant(format!(
            "{kind} microstep {microstep}: sev > 0 with freq 0"
        )));
    }
    Ok(SiteReport {
        kind,
        microstep,
        freq,
        sev,
        zero_ref_count,
        layers,
    })
}

fn group<'a>(
    captures: &'a [SubmoduleCapture],
    cfg: &ModelConfig,
) -> Result<(SiteKind, u64, Vec<Vec<&'a SubmoduleCapture>>)> {
    let first = captures
        .first()
        .ok_or_else(|| Error::contract("no captures"))?;
    let (kind, micro) = (first.site.kind, first.microstep);
    let mut grid: Vec<Vec<Option<&SubmoduleCapture>>> = vec![vec![None; cfg.tp_degree]; cfg.layers];
    for c in captures {
        if c.site.kind != kind || c.microstep != micro {
            return Err(Error::contract(
                "captures span several site kinds or microsteps",
            ));
        }
        let slot = grid
            .get_mut(c.site.layer)
            .and_then(|l| l.get_mut(c.site.rank))
            .ok_or_else(|| Error::contract(format!("capture outside model: {:?}", c.site)))?;
        if slot.replace(c).is_some() {
            return Err(Error::contract(format!("duplicate capture {:?}", c.site)));
        }
    }
    let mut out = Vec::with_capacity(cfg.layers);
    for (layer, ranks) in grid.into_iter().enumerate() {
        let mut row = Vec::with_capacity(cfg.tp_degree);
        for (rank, c) in ranks.into_iter().enumerate() {
            row.push(c.ok_or_else(|| {
                Error::contract(format!("missing capture {kind} layer {layer} rank {rank}"))
            })?);
        }
        out.push(row);
    }
    Ok((kind, micro, out))
}

/// Full report for the captures of one site kind at one microstep.
/// Every (layer, rank) must be present exactly once.
pub fn site_report(
    captures: &[SubmoduleCapture],
    cfg: &ModelConfig,
    mode: SeverityMode,
) -> Result<SiteReport> {
    let (kind, micro, grid) = group(captures, cfg)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, ranks) in grid.iter().enumerate() {
        let h: Vec<Tensor> = ranks.iter().map(|c| c.healthy.clone()).collect();
        let u: Vec<Tensor> = ranks.iter().map(|c| c.unhealthy.clone()).collect();
        layers.push(layer_metric(l, &h, &u, cfg, mode)?);
    }
    aggregate(kind, micro, layers)
}

/// Mean over layers of the per-layer mismatch fraction.
pub fn mismatch_frequency(captures: &[SubmoduleCapture], cfg: &ModelConfig) -> Result<f64> {
    Ok(site_report(captures, cfg, SeverityMode::Mismatching)?.freq)
}

/// Max over layers of the per-layer (max over ranks) severity.
pub fn mismatch_severity(
    captures: &[SubmoduleCapture],
    cfg: &ModelConfig,
    mode: SeverityMode,
) -> Result<f64> {
    Ok(site_report(captures, cfg, mode)?.sev)
}

/// Running maximum of a ratio series; non-finite ratios are skipped.
pub fn wcnts(ratios: &[f64]) -> f64 {
    ratios
        .iter()
        .copied()
        .filter(|r| r.is_finite())
        .fold(0.0, f64::max)
}
