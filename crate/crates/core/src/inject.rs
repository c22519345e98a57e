//! SDC fault injector for the unhealthy node.
//!
//! Corruption is multiplicative and sign-preserving: a selected element `x`
//! becomes `x * factor` with `factor > 0`. Selection and factors are pure
//! functions of the profile seed and the tensor's coordinates, so any run is
//! replayable from its event log.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, stream_id, DType, Rng, Tensor};

/// Where a fault can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    FwdAttn,
    FwdFfn,
    BwdAttn,
    BwdFfn,
    /// Inside a linear-layer matmul, before the result is stored.
    MatmulInternal,
}

impl SiteKind {
    pub const HOOKS: [SiteKind; 4] = [
        SiteKind::FwdAttn,
        SiteKind::FwdFfn,
        SiteKind::BwdAttn,
        SiteKind::BwdFfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::FwdAttn => "fwd_attn",
            SiteKind::FwdFfn => "fwd_ffn",
            SiteKind::BwdAttn => "bwd_attn",
            SiteKind::BwdFfn => "bwd_ffn",
            SiteKind::MatmulInternal => "matmul_internal",
        }
    }

    pub fn is_hook(self) -> bool {
        self != SiteKind::MatmulInternal
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            SiteKind::FwdAttn,
            SiteKind::FwdFfn,
            SiteKind::BwdAttn,
            SiteKind::BwdFfn,
            SiteKind::MatmulInternal,
        ];
        all.into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown site `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SeverityDist {
    FixedFactor(f64),
    /// `[lo, hi]`, sampled log-uniformly.
    LogUniformFactor([f64; 2]),
    /// Flip one uniformly chosen bit in `lo_bit..=hi_bit` of the f32 pattern.
    BitFlip {
        lo_bit: u8,
        hi_bit: u8,
    },
}

impl Default for SeverityDist {
    fn default() -> Self {
        SeverityDist::FixedFactor(2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Temporal {
    /// `rate` at every step.
    #[default]
    Constant,
    /// `p_hi` for steps below `steps`, `p_lo` afterwards.
    InitialSpike { p_hi: f64, steps: u64, p_lo: f64 },
    /// Each step is a burst with probability `q`; bursts use `p_burst`, other steps 0.
    RareBurst { q: f64, p_burst: f64 },
    /// `rate` on exactly the listed steps, 0 elsewhere.
    Scheduled { steps: Vec<u64>, rate: f64 },
}

/// Statistical description of an unhealthy node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdcProfile {
    #[serde(default)]
    pub sites: Vec<SiteKind>,
    /// `None` means every rank.
    #[serde(default)]
    pub affected_ranks: Option<Vec<usize>>,
    /// Per-element probability per microstep for the constant pattern.
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub severity: SeverityDist,
    #[serde(default)]
    pub temporal: Temporal,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SdcProfile {
    fn default() -> Self {
        SdcProfile::healthy()
    }
}

fn check_prob(path: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::config(
            path,
            format!("probability {p} outside [0, 1]"),
        ));
    }
    Ok(())
}

impl SdcProfile {
    /// A profile that never injects.
    pub fn healthy() -> Self {
        SdcProfile {
            sites: Vec::new(),
            affected_ranks: None,
            rate: 0.0,
            severity: SeverityDist::default(),
            temporal: Temporal::Constant,
            seed: 0,
        }
    }

    pub fn constant(sites: &[SiteKind], rate: f64, severity: SeverityDist, seed: u64) -> Self {
        SdcProfile {
            sites: sites.to_vec(),
            affected_ranks: None,
            rate,
            severity,
            temporal: Temporal::Constant,
            seed,
        }
    }

    /// Checks value ranges; `prefix` is the config key path for messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_prob(&format!("{prefix}.rate"), self.rate)?;
        match &self.severity {
            SeverityDist::FixedFactor(a) => {
                if !(*a > 0.0 && a.is_finite()) {
                    return Err(Error::config(
                        format!("{prefix}.severity"),
                        "factor must be positive",
                    ));
                }
            }
            SeverityDist::LogUniformFactor([lo, hi]) => {
                if !(*lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(Error::config(
                        format!("{prefix}.severity"),
                        "log-uniform bounds must satisfy 0 < lo <= hi",
                    ));
                }
            }
            SeverityDist::BitFlip { lo_bit, hi_bit } => {
                if lo_bit > hi_bit || *hi_bit > 30 {
                    return Err(Error::config(
                        format!("{prefix}.severity"),
                        "bit range must satisfy lo_bit <= hi_bit <= 30",
                    ));
                }
            }
        }
        let t = format!("{prefix}.temporal");
        match &self.temporal {
            Temporal::Constant => {}
            Temporal::InitialSpike { p_hi, p_lo, .. } => {
                check_prob(&format!("{t}.p_hi"), *p_hi)?;
                check_prob(&format!("{t}.p_lo"), *p_lo)?;
            }
            Temporal::RareBurst { q, p_burst } => {
                check_prob(&format!("{t}.q"), *q)?;
                check_prob(&format!("{t}.p_burst"), *p_burst)?;
            }
            Temporal::Scheduled { rate, .. } => check_prob(&format!("{t}.rate"), *rate)?,
        }
        Ok(())
    }

    pub fn targets(&self, site: SiteKind, rank: usize) -> bool {
        self.sites.contains(&site)
            && self
                .affected_ranks
                .as_ref()
                .is_none_or(|r| r.contains(&rank))
    }

    /// True when every site is a hook site, i.e. lock-step overwrite contains it.
    pub fn hook_sites_only(&self) -> bool {
        self.sites.iter().all(|s| s.is_hook())
    }

    /// First step whose effective rate is non-zero, scanning `0..limit`.
    pub fn first_active_step(&self, limit: u64) -> Option<u64> {
        if self.sites.is_empty() {
            return None;
        }
        (0..limit).find(|&s| temporal_rate(self, s) > 0.0)
    }
}

/// Shipped profile presets. These are simulation inputs, not findings.
pub const PRESET_NAMES: [&str; 4] = ["healthy", "node10-like", "node11-like", "node14-like"];

pub fn preset(name: &str) -> Option<SdcProfile> {
    let fwd_attn = vec![SiteKind::FwdAttn];
    let p = match name {
        "healthy" => SdcProfile::healthy(),
        // high steady rate with an elevated start, large worst-case factor
        "node10-like" => SdcProfile {
            sites: fwd_attn,
            affected_ranks: None,
            rate: 4.78e-3,
            severity: SeverityDist::LogUniformFactor([1.5, 1121.0]),
            temporal: Temporal::InitialSpike {
                p_hi: 4.78e-2,
                steps: 5,
                p_lo: 4.78e-3,
            },
            seed: 10,
        },
        "node11-like" => SdcProfile {
            sites: fwd_attn,
            affected_ranks: None,
            rate: 2.89e-2,
            severity: SeverityDist::LogUniformFactor([1.5, 319.0]),
            temporal: Temporal::InitialSpike {
                p_hi: 1e-1,
                steps: 5,
                p_lo: 2.89e-2,
            },
            seed: 11,
        },
        // near-silent baseline with occasional spikes
        "node14-like" => SdcProfile {
            sites: fwd_attn,
            affected_ranks: None,
            rate: 0.0,
            severity: SeverityDist::LogUniformFactor([1.01, 2.12]),
            temporal: Temporal::RareBurst {
                q: 0.02,
                p_burst: 1e-3,
            },
            seed: 14,
        },
        _ => return None,
    };
    Some(p)
}

/// True when `step` is a burst step of a rare-burst pattern.
fn is_burst(seed: u64, q: f64, step: u64) -> bool {
    Rng::new(seed, stream_id("burst", &[step])).bernoulli(q)
}

/// Effective per-element rate at optimizer step `step`.
pub fn temporal_rate(profile: &SdcProfile, step: u64) -> f64 {
    match &profile.temporal {
        Temporal::Constant => profile.rate,
        Temporal::InitialSpike { p_hi, steps, p_lo } => {
            if step < *steps {
                *p_hi
            } else {
                *p_lo
            }
        }
        Temporal::RareBurst { q, p_burst } => {
            if is_burst(profile.seed, *q, step) {
                *p_burst
            } else {
                0.0
            }
        }
        Temporal::Scheduled { steps, rate } => {
            if steps.contains(&step) {
                *rate
            } else {
                0.0
            }
        }
    }
}

/// Position of a tensor in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Coords {
    pub step: u64,
    pub microstep: u64,
    pub layer: usize,
    pub rank: usize,
}

/// Ground-truth record of one corrupted element.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultEvent {
    pub step: u64,
    pub microstep: u64,
    pub site: SiteKind,
    /// Linear op label for matmul-internal faults.
    pub op: Option<&'static str>,
    pub layer: usize,
    pub rank: usize,
    pub index: usize,
    pub factor: f64,
}

impl FaultEvent {
    /// Site column of the event log (`matmul_internal/<op>` for matmul faults).
    pub fn site_label(&self) -> String {
        match self.op {
            Some(op) => format!("{}/{}", self.site, op),
            None => self.site.to_string(),
        }
    }
}

/// Applies a multiplicative factor the same way for injection and replay.
pub fn apply_factor(x: f32, factor: f64) -> f32 {
    (x as f64 * factor) as f32
}

fn op_code(op: Option<&str>) -> u64 {
    op.map_or(0, |o| stream_id(o, &[]))
}

/// Returns the corrupted value, or `None` when the draw leaves `x` unchanged.
fn draw_corruption(rng: &mut Rng, dist: &SeverityDist, x: f32) -> Option<(f32, f64)> {
    let (y, factor) = match dist {
        SeverityDist::FixedFactor(a) => (apply_factor(x, *a), *a),
        SeverityDist::LogUniformFactor([lo, hi]) => {
            let (l, h) = (libm::log(*lo), libm::log(*hi));
            let a = libm::exp(l + rng.next_f64() * (h - l));
            (apply_factor(x, a), a)
        }
        SeverityDist::BitFlip { lo_bit, hi_bit } => {
            let span = (*hi_bit - *lo_bit) as u64 + 1;
            let bit = *lo_bit as u64 + rng.below(span);
            if x == 0.0 {
                return None;
            }
            let y = f32::from_bits(x.to_bits() ^ (1u32 << bit));
            if !y.is_finite() || y == 0.0 {
                return None;
            }
            (y, y as f64 / x as f64)
        }
    };
    (y.to_bits() != x.to_bits()).then_some((y, factor))
}

fn corrupt_inner(
    tensor: &Tensor,
    profile: &SdcProfile,
    site: SiteKind,
    op: Option<&'static str>,
    at: Coords,
) -> (Tensor, Vec<FaultEvent>) {
    let mut out = tensor.clone();
    let mut events = Vec::new();
    if !profile.targets(site, at.rank) {
        return (out, events);
    }
    let rate = temporal_rate(profile, at.step);
    if rate <= 0.0 {
        return (out, events);
    }
    let mut rng = Rng::new(
        profile.seed,
        stream_id(
            "corrupt",
            &[
                site.code(),
                at.layer as u64,
                at.rank as u64,
                at.microstep,
                op_code(op),
            ],
        ),
    );
    for (index, v) in out.data_mut().iter_mut().enumerate() {
        if rng.next_f64() >= rate {
            continue;
        }
        if let Some((y, factor)) = draw_corruption(&mut rng, &profile.severity, *v) {
            *v = y;
            events.push(FaultEvent {
                step: at.step,
                microstep: at.microstep,
                site,
                op,
                layer: at.layer,
                rank: at.rank,
                index,
                factor,
            });
        }
    }
    (out, events)
}

/// Corrupts `tensor` as observed at a hook site of the unhealthy node.
///
/// Returns the input unchanged with no events when the profile does not
/// target `(site, rank)`.
pub fn corrupt(
    tensor: &Tensor,
    profile: &SdcProfile,
    site: SiteKind,
    at: Coords,
) -> (Tensor, Vec<FaultEvent>) {
    corrupt_inner(tensor, profile, site, None, at)
}

/// Matmul whose finished accumulators are perturbed before storage.
pub fn corrupt_matmul_accumulator(
    a: &Tensor,
    b: &Tensor,
    profile: &SdcProfile,
    op: &'static str,
    at: Coords,
) -> Result<(Tensor, Vec<FaultEvent>)> {
    let out_dtype = a.dtype().promote(b.dtype());
    let acc = matmul(&a.to_dtype(DType::F32), &b.to_dtype(DType::F32))?;
    let (c, events) = corrupt_inner(&acc, profile, SiteKind::MatmulInternal, Some(op), at);
    if c.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "matmul accumulator corruption ({op})"
        )));
    }
    Ok((c.to_dtype(out_dtype), events))
}

/// Re-applies logged events to an uncorrupted tensor.
pub fn replay(tensor: &Tensor, events: &[FaultEvent]) -> Result<Tensor> {
    let mut out = tensor.clone();
    for e in events {
        let v = out
            .data_mut()
            .get_mut(e.index)
            .ok_or_else(|| Error::contract(format!("event index {} out of bounds", e.index)))?;
        *v = apply_factor(*v, e.factor);
    }
    Ok(out)
}

/// 99% two-sided normal-approximation interval for a sum of Bernoulli
/// trials with the given `(trials, p)` groups.
pub fn binomial_ci99(groups: &[(u64, f64)]) -> (f64, f64) {
    const Z99: f64 = 2.575_829_303_548_901;
    let mut mean = 0.0;
    let mut var = 0.0;
    for &(n, p) in groups {
        mean += n as f64 * p;
        var += n as f64 * p * (1.0 - p);
    }
    let half = Z99 * var.sqrt();
    (mean - half, mean + half)
}
