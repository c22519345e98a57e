//! Checksummed matmul: flags `C` when `||Cw - A(Bw)||inf > tau ||A||inf ||B||inf`
//! with `w` all ones and `tau = k u`.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::{corrupt_matmul_accumulator, Coords, SdcProfile};
use crate::tensor::{matmul, norms, DType, Tensor};

/// Which value of `u` to use. `FrameworkEps` is the machine epsilon reported
/// by frameworks (`2^-23` for f32); `Classical` is half of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundoffConvention {
    #[default]
    FrameworkEps,
    Classical,
}

/// Datatypes the threshold knows about. `F16` is informational only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    Bf16,
    F16,
}

impl From<DType> for Precision {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => Precision::F32,
            DType::Bf16Emu => Precision::Bf16,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "bf16" | "bf16emu" => Ok(Precision::Bf16),
            "f16" => Ok(Precision::F16),
            other => Err(Error::contract(format!("unknown dtype {other:?}"))),
        }
    }
}

pub fn unit_roundoff(p: Precision, conv: RoundoffConvention) -> f64 {
    let eps = match p {
        Precision::F32 => 2f64.powi(-23),
        Precision::Bf16 => 2f64.powi(-7),
        Precision::F16 => 2f64.powi(-10),
    };
    match conv {
        RoundoffConvention::FrameworkEps => eps,
        RoundoffConvention::Classical => eps / 2.0,
    }
}

/// `n u <= 0.01`.
pub fn precision_gate(n: usize, u: f64) -> bool {
    n as f64 * u <= 0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbftCheck {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub u: f64,
    pub tau: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub flagged: bool,
    pub gate_ok: bool,
}

fn gate(a: &Tensor, b: &Tensor, conv: RoundoffConvention) -> Result<(f64, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::contract(format!(
            "checked matmul: incompatible shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.cols();
    let u = unit_roundoff(a.dtype().promote(b.dtype()).into(), conv);
    if !precision_gate(k, u) {
        return Err(Error::PrecisionUnsupported {
            n: k,
            u,
            nu: k as f64 * u,
        });
    }
    Ok((u, k))
}

/// Checks a product `c` that claims to be `a b`.
pub fn verify(a: &Tensor, b: &Tensor, c: &Tensor, conv: RoundoffConvention) -> Result<AbftCheck> {
    let (u, k) = gate(a, b, conv)?;
    let (m, n) = (a.rows(), b.cols());
    if c.shape() != [m, n] {
        return Err(Error::contract(format!(
            "checked matmul: product shape {:?}",
            c.shape()
        )));
    }
    let w = Tensor::full(vec![n, 1], 1.0, DType::F32);
    let cw = matmul(c, &w)?;
    let abw = matmul(a, &matmul(b, &w)?)?;
    let lhs = cw
        .data()
        .iter()
        .zip(abw.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max);
    let tau = k as f64 * u;
    let rhs = tau * norms(a).inf * norms(b).inf;
    Ok(AbftCheck {
        m,
        k,
        n,
        u,
        tau,
        lhs,
        rhs,
        flagged: lhs > rhs,
        gate_ok: true,
    })
}

/// Computes `a b` (through the accumulator injector when given) and checks it.
pub fn checked_matmul(
    a: &Tensor,
    b: &Tensor,
    injector: Option<(&SdcProfile, &'static str, Coords)>,
    conv: RoundoffConvention,
) -> Result<(Tensor, AbftCheck)> {
    gate(a, b, conv)?;
    let c = match injector {
        Some((p, op, at)) => corrupt_matmul_accumulator(a, b, p, op, at)?.0,
        None => matmul(a, b)?,
    };
    let check = verify(a, b, &c, conv)?;
    Ok((c, check))
}

/// One abft.csv row: checks aggregated over ranks for (step, layer, op).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagRow {
    pub step: u64,
    pub layer: usize,
    pub site: String,
    pub checks: u64,
    pub flags: u64,
    pub max_lhs: f64,
    pub max_rhs: f64,
}

/// Groups `(step, layer, op, check)` records into per-site flag counts,
/// ordered by step, layer, then op name.
pub fn flag_rate_report<'a>(
    checks: impl IntoIterator<Item = (u64, usize, &'a str, &'a AbftCheck)>,
) -> Vec<FlagRow> {
    let mut groups: BTreeMap<(u64, usize, &str), FlagRow> = BTreeMap::new();
    for (step, layer, op, c) in checks {
        let row = groups.entry((step, layer, op)).or_insert_with(|| FlagRow {
            step,
            layer,
            site: op.to_string(),
            checks: 0,
            flags: 0,
            max_lhs: 0.0,
            max_rhs: 0.0,
        });
        row.checks += 1;
        row.flags += c.flagged as u64;
        row.max_lhs = row.max_lhs.max(c.lhs);
        row.max_rhs = row.max_rhs.max(c.rhs);
    }
    groups.into_values().collect()
}

/// Worst-case shift of a row sum when a fraction `rate` of its terms is
/// scaled by `factor`: `rate * factor`, rounded to three significant figures
/// as it is usually quoted (4.78e-3 x 1120 -> 5.35).
pub fn norm_impact_estimate(rate: f64, factor: f64) -> f64 {
    let raw = rate * factor;
    format!("{raw:.2e}").parse().unwrap_or(raw)
}
