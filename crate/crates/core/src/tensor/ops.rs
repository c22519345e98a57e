use serde::{Deserialize, Serialize};

use super::{DType, Rng, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon.
pub const LN_EPS: f32 = 1e-5;

fn check_2d(op: &str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::contract(format!(
            "{op}: expected a 2-D tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_same(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `C = A B` with each `C[i][j]` accumulated over `k` in ascending order,
/// starting from zero, in f32. bf16 outputs are rounded once at the end.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_2d("matmul", a)?;
    check_2d("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::contract(format!(
            "matmul: inner dimensions differ ({m}x{k} * {k2}x{n})"
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let b_row = &bd[kk * n..(kk + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * *bj;
            }
        }
    }
    Tensor::from_kernel("matmul", vec![m, n], c, a.dtype().promote(b.dtype()))
}

fn zip_map(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    check_same(op, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_kernel(op, a.shape().to_vec(), data, a.dtype().promote(b.dtype()))
}

fn map(op: &str, a: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_kernel(op, a.shape().to_vec(), data, a.dtype())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("sub", a, b, |x, y| x - y)
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f32) -> Result<Tensor> {
    map("scale", a, |x| x * s)
}

/// In-place `acc += x` in f32 without rounding, for gradient accumulation buffers.
pub fn accumulate(acc: &mut Tensor, x: &Tensor) -> Result<()> {
    check_same("accumulate", acc, x)?;
    for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += *b;
    }
    if acc.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("accumulate"));
    }
    Ok(())
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

/// `x * sigmoid(x)`.
pub fn swish(a: &Tensor) -> Result<Tensor> {
    map("swish", a, |x| x * sigmoid(x))
}

/// Derivative of swish evaluated at `a`.
pub fn swish_grad(a: &Tensor) -> Result<Tensor> {
    map("swish_grad", a, |x| {
        let s = sigmoid(x);
        s * (1.0 + x * (1.0 - s))
    })
}

/// Row softmax with a causal mask: row `i` attends to columns `0..=i`;
/// masked entries are exactly zero.
pub fn softmax_causal(s: &Tensor) -> Result<Tensor> {
    check_2d("softmax_causal", s)?;
    let (r, c) = (s.rows(), s.cols());
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = s.row(i);
        let lim = (i + 1).min(c);
        let mut mx = f32::NEG_INFINITY;
        for &v in &row[..lim] {
            if v > mx {
                mx = v;
            }
        }
        let o = &mut out[i * c..i * c + lim];
        let mut sum = 0.0f32;
        for (oj, &v) in o.iter_mut().zip(&row[..lim]) {
            *oj = libm::expf(v - mx);
            sum += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= sum;
        }
    }
    Tensor::from_kernel("softmax_causal", vec![r, c], out, s.dtype())
}

/// Backward of row softmax: `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Result<Tensor> {
    check_same("softmax_backward", p, dp)?;
    let (r, c) = (p.rows(), p.cols());
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let (pr, dr) = (p.row(i), dp.row(i));
        let mut dot = 0.0f32;
        for (a, b) in pr.iter().zip(dr) {
            dot += a * b;
        }
        for j in 0..c {
            out[i * c + j] = pr[j] * (dr[j] - dot);
        }
    }
    Tensor::from_kernel(
        "softmax_backward",
        vec![r, c],
        out,
        p.dtype().promote(dp.dtype()),
    )
}

/// Saved per-row statistics for layer-norm backward.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Row layer-norm with gain and bias vectors of length `cols`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LnCache)> {
    check_2d("layer_norm", x)?;
    let (r, c) = (x.rows(), x.cols());
    if gain.len() != c || bias.len() != c {
        return Err(Error::contract(
            "layer_norm: gain/bias length must equal row width",
        ));
    }
    let (g, b) = (gain.data(), bias.data());
    let mut xhat = vec![0.0f32; r * c];
    let mut out = vec![0.0f32; r * c];
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mut sum = 0.0f32;
        for &v in row {
            sum += v;
        }
        let mean = sum / c as f32;
        let mut var = 0.0f32;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= c as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[i * c + j] = h;
            out[i * c + j] = h * g[j] + b[j];
        }
    }
    let dtype = x.dtype().promote(gain.dtype());
    let y = Tensor::from_kernel("layer_norm", vec![r, c], out, dtype)?;
    let xhat = Tensor::from_kernel("layer_norm", vec![r, c], xhat, DType::F32)?;
    Ok((y, LnCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`; gain/bias grads are summed over rows in order.
pub fn layer_norm_backward(
    dy: &Tensor,
    cache: &LnCache,
    gain: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_same("layer_norm_backward", dy, &cache.xhat)?;
    let (r, c) = (dy.rows(), dy.cols());
    let g = gain.data();
    let xh = cache.xhat.data();
    let mut dx = vec![0.0f32; r * c];
    let mut dg = vec![0.0f32; c];
    let mut db = vec![0.0f32; c];
    let mut dxhat = vec![0.0f32; c];
    for i in 0..r {
        let dyr = dy.row(i);
        let xr = &xh[i * c..(i + 1) * c];
        let mut sum_d = 0.0f32;
        let mut sum_dx = 0.0f32;
        for j in 0..c {
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xr[j];
        }
        let inv = cache.inv_std[i];
        let n = c as f32;
        for j in 0..c {
            dx[i * c + j] = inv / n * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
        }
    }
    let dtype = dy.dtype();
    Ok((
        Tensor::from_kernel("layer_norm_backward", vec![r, c], dx, dtype)?,
        Tensor::from_kernel("layer_norm_backward", vec![c], dg, DType::F32)?,
        Tensor::from_kernel("layer_norm_backward", vec![c], db, DType::F32)?,
    ))
}

/// Mean next-token cross-entropy over rows. Returns the loss and
/// `dlogits = (softmax - onehot) / rows`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    check_2d("cross_entropy", logits)?;
    let (r, c) = (logits.rows(), logits.cols());
    if labels.len() != r {
        return Err(Error::contract("cross_entropy: one label per row required"));
    }
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; r * c];
    let inv_r = 1.0 / r as f32;
    for i in 0..r {
        let row = logits.row(i);
        let y = labels[i] as usize;
        if y >= c {
            return Err(Error::contract(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let mut mx = f32::NEG_INFINITY;
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let g = &mut grad[i * c..(i + 1) * c];
        let mut sum = 0.0f32;
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = libm::expf(v - mx);
            sum += *gj;
        }
        let lse = mx + libm::logf(sum);
        total += (lse - row[y]) as f64;
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_r;
        }
        g[y] -= inv_r;
    }
    let loss = total / r as f64;
    if !loss.is_finite() {
        return Err(Error::numerical("cross_entropy"));
    }
    let dlogits = Tensor::from_kernel("cross_entropy", vec![r, c], grad, logits.dtype())?;
    Ok((loss, dlogits))
}

/// L2 and infinity norms with ascending-index f64 accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    /// Max absolute row sum for 2-D input; max absolute entry for 1-D.
    pub inf: f64,
}

pub fn norms(a: &Tensor) -> Norms {
    let mut sq = 0.0f64;
    for &v in a.data() {
        sq += (v as f64) * (v as f64);
    }
    let c = a.cols();
    let mut inf = 0.0f64;
    for i in 0..a.rows() {
        let mut s = 0.0f64;
        for &v in &a.data()[i * c..(i + 1) * c] {
            s += (v as f64).abs();
        }
        if s > inf {
            inf = s;
        }
    }
    Norms { l2: sq.sqrt(), inf }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    KaimingUniform,
    XavierUniform,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f32 {
        match self {
            InitScheme::KaimingUniform => (6.0 / fan_in as f64).sqrt() as f32,
            InitScheme::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt() as f32,
        }
    }
}

/// `[fan_in x fan_out]` weight drawn uniformly within the scheme's bound.
pub fn init_weight(
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    rng: &mut Rng,
) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::contract("init_weight: fans must be positive"));
    }
    let b = scheme.bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_f32(-b, b))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data, DType::F32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{round_bf16, stream_id, Rng};
    use proptest::prelude::*;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for kk in 0..k {
                    s += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        Tensor::new(vec![r, c], data, DType::F32).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!(matmul(&Tensor::eye(2), &b).unwrap().bit_eq(&b));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let expected = naive(&a, &b);
        assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &expected[..]);
    }

    #[test]
    fn matmul_zero() {
        let mut rng = Rng::new(3, 0);
        let b = random(&mut rng, 4, 2);
        let c = matmul(&Tensor::zeros(vec![3, 4], DType::F32), &b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(vec![2, 3], DType::F32);
        assert!(matches!(matmul(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_overflow_is_numerical_failure() {
        let a = Tensor::from_rows(&[&[3.0e38, 3.0e38]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert!(matmul(&a, &b).unwrap_err().is_numerical());
    }

    #[test]
    fn matmul_matches_naive_exhaustively() {
        for seed in 0..1000u64 {
            let mut rng = Rng::new(seed, stream_id("matmul-oracle", &[]));
            let m = 1 + rng.below(16) as usize;
            let k = 1 + rng.below(16) as usize;
            let n = 1 + rng.below(16) as usize;
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let c = matmul(&a, &b).unwrap();
            let want = naive(&a, &b);
            assert!(
                c.data()
                    .iter()
                    .zip(&want)
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn matmul_bf16_rounds_output_once() {
        let a = Tensor::from_rows(&[&[1.0, 1.0]]).to_dtype(DType::Bf16Emu);
        let b = Tensor::from_rows(&[&[1.0], &[2f32.powi(-8)]]).to_dtype(DType::Bf16Emu);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dtype(), DType::Bf16Emu);
        assert_eq!(c.data()[0], round_bf16(1.0 + 2f32.powi(-8)));
    }

    #[test]
    fn norms_cases() {
        let n = norms(&Tensor::from_rows(&[&[3.0, 4.0]]));
        assert_eq!(n.l2, 5.0);
        assert_eq!(n.inf, 7.0);
        let z = norms(&Tensor::zeros(vec![3, 3], DType::F32));
        assert_eq!((z.l2, z.inf), (0.0, 0.0));
        let m = norms(&Tensor::from_rows(&[&[1.0, -2.0], &[0.0, 3.0]]));
        assert_eq!(m.inf, 3.0);
        let v = norms(&Tensor::new(vec![3], vec![1.0, -5.0, 2.0], DType::F32).unwrap());
        assert_eq!(v.inf, 5.0);
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let draw = |scheme, fi, fo| {
            let mut rng = Rng::new(11, stream_id("init", &[]));
            init_weight(fi, fo, scheme, &mut rng).unwrap()
        };
        let a = draw(InitScheme::XavierUniform, 2, 4);
        assert!(a.bit_eq(&draw(InitScheme::XavierUniform, 2, 4)));
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        let k = draw(InitScheme::KaimingUniform, 6, 3);
        assert!(k.data().iter().all(|v| v.abs() <= 1.0));
        assert!(k.data().iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn elementwise_identity_zero_and_hand_cases() {
        let a = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]);
        let z = Tensor::zeros(vec![1, 3], DType::F32);
        assert!(add(&a, &z).unwrap().bit_eq(&a));
        assert_eq!(add(&a, &a).unwrap().data(), &[2.0, -4.0, 1.0]);
        assert!(scale(&a, 1.0).unwrap().bit_eq(&a));
        assert_eq!(scale(&a, -2.0).unwrap().data(), &[-2.0, 4.0, -1.0]);
        assert_eq!(mul(&a, &a).unwrap().data(), &[1.0, 4.0, 0.25]);
        assert_eq!(sub(&a, &a).unwrap().data(), &[0.0, 0.0, 0.0]);
        // swish(0) = 0; swish(x) -> x for large x
        let s = swish(&Tensor::from_rows(&[&[0.0, 20.0]])).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 20.0).abs() < 1e-5);
        let s1 = swish(&Tensor::from_rows(&[&[1.0]])).unwrap().data()[0] as f64;
        assert!((s1 - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-6);
        assert!(swish(&a).unwrap().bit_eq(&swish(&a).unwrap()));
    }

    #[test]
    fn swish_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let f = |v: f64| v / (1.0 + (-v).exp());
            let h = 1e-5;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            let g = swish_grad(&Tensor::from_rows(&[&[x as f32]]))
                .unwrap()
                .data()[0] as f64;
            assert!((g - fd).abs() < 1e-5, "x={x}: {g} vs {fd}");
        }
    }

    #[test]
    fn softmax_causal_cases() {
        // uniform row -> equal weights over the unmasked prefix
        let s = softmax_causal(&Tensor::zeros(vec![3, 3], DType::F32)).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(s.row(1), &[0.5, 0.5, 0.0]);
        let hand = softmax_causal(&Tensor::from_rows(&[&[0.0, 9.0], &[0.0, 2f32.ln()]])).unwrap();
        assert_eq!(hand.row(0), &[1.0, 0.0]);
        assert!((hand.row(1)[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((hand.row(1)[1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::full(vec![4], 1.0, DType::F32);
        let b = Tensor::zeros(vec![4], DType::F32);
        // constant row normalizes to exactly zero
        let (y, _) = layer_norm(&Tensor::full(vec![1, 4], 3.0, DType::F32), &g, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = layer_norm(&Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]), &g, &b).unwrap();
        // mean 2.5, var 1.25
        let inv = 1.0 / (1.25f64 + 1e-5).sqrt();
        for (j, &v) in y.data().iter().enumerate() {
            let want = (j as f64 + 1.0 - 2.5) * inv;
            assert!((v as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut rng = Rng::new(5, 1);
        let x = random(&mut rng, 2, 5);
        let g = random(&mut rng, 1, 5).reshape(vec![5]).unwrap();
        let b = random(&mut rng, 1, 5).reshape(vec![5]).unwrap();
        let w = random(&mut rng, 2, 5);
        // scalar objective: sum(w * ln(x))
        let obj = |x: &Tensor| -> f64 {
            let (y, _) = layer_norm(x, &g, &b).unwrap();
            y.data()
                .iter()
                .zip(w.data())
                .map(|(a, c)| (*a as f64) * (*c as f64))
                .sum()
        };
        let (_, cache) = layer_norm(&x, &g, &b).unwrap();
        let (dx, _, _) = layer_norm_backward(&w, &cache, &g).unwrap();
        let h = 1e-3f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h as f64);
            assert!(
                (fd - dx.data()[i] as f64).abs() < 2e-3,
                "i={i}: {fd} vs {}",
                dx.data()[i]
            );
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, d) = cross_entropy(&Tensor::zeros(vec![2, 4], DType::F32), &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
        let row_sum: f32 = d.row(0).iter().sum();
        assert!(row_sum.abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-20.0f32..20.0, 64)) {
            let s = Tensor::new(vec![8, 8], vals, DType::F32).unwrap();
            let p = softmax_causal(&s).unwrap();
            for i in 0..8 {
                let sum: f32 = p.row(i).iter().sum();
                let ulp = f32::EPSILON;
                prop_assert!((sum - 1.0).abs() <= 4.0 * ulp, "row {} sums to {}", i, sum);
            }
        }

        #[test]
        fn layer_norm_moments(vals in proptest::collection::vec(-50.0f32..50.0, 32)) {
            let x = Tensor::new(vec![2, 16], vals, DType::F32).unwrap();
            let g = Tensor::full(vec![16], 1.0, DType::F32);
            let b = Tensor::zeros(vec![16], DType::F32);
            let (y, _) = layer_norm(&x, &g, &b).unwrap();
            for i in 0..2 {
                let row: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
                let m = row.iter().sum::<f64>() / 16.0;
                let var_in = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 16.0;
                prop_assume!(var_in >= 4.0);
                let out: Vec<f64> = y.row(i).iter().map(|&v| v as f64).collect();
                let mu = out.iter().sum::<f64>() / 16.0;
                let var = out.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
                prop_assert!(mu.abs() <= 1e-6, "mean {}", mu);
                prop_assert!((var - 1.0).abs() <= 1e-5, "var {}", var);
            }
        }

        #[test]
        fn kernels_are_deterministic(vals in proptest::collection::vec(-3.0f32..3.0, 36)) {
            let a = Tensor::new(vec![6, 6], vals, DType::F32).unwrap();
            prop_assert!(matmul(&a, &a).unwrap().bit_eq(&matmul(&a, &a).unwrap()));
            prop_assert!(softmax_causal(&a).unwrap().bit_eq(&softmax_causal(&a).unwrap()));
            prop_assert!(swish(&a).unwrap().bit_eq(&swish(&a).unwrap()));
        }
    }
}
