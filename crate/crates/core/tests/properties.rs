use proptest::collection::vec;
use proptest::prelude::*;

use sdclab::abft::{verify, RoundoffConvention};
use sdclab::collectives::{all_gather, map_ranks, reduce_scatter, Schedule};
use sdclab::inject::{corrupt, replay, Coords, SdcProfile, SeverityDist, SiteKind, Temporal};
use sdclab::lockstep::*;
use sdclab::model::ModelConfig;
use sdclab::tensor::{matmul, round_bf16, DType, Tensor};

fn cfg() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        kv_heads: 1,
        seq_len: 8,
        tp_degree: 2,
        ..ModelConfig::desk()
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data, DType::F32).unwrap()
}

fn hook_profile(rate: f64, severity: SeverityDist, seed: u64) -> SdcProfile {
    SdcProfile {
        sites: vec![SiteKind::FwdAttn],
        affected_ranks: None,
        rate,
        severity,
        temporal: Temporal::Constant,
        seed,
    }
}

fn at(step: u64) -> Coords {
    Coords {
        step,
        microstep: step * 2,
        layer: 1,
        rank: 0,
    }
}

// Element-by-element restatement of the per-layer metrics.
fn brute_force(
    h: &[Tensor],
    u: &[Tensor],
    cfg: &ModelConfig,
    mode: SeverityMode,
) -> (u64, f64, f64, u64) {
    let mut mism = 0u64;
    let mut sev = 0.0f64;
    let mut zero = 0u64;
    for r in 0..h.len() {
        let (mut s, mut c) = (0.0f64, 0u64);
        for i in 0..h[r].len() {
            let f = h[r].data()[i];
            let g = u[r].data()[i];
            if f.to_bits() != g.to_bits() {
                mism += 1;
                if f == 0.0 {
                    zero += 1;
                }
            }
            if f != 0.0 {
                let rel = (g as f64 - f as f64).abs() / (f as f64).abs();
                if mode == SeverityMode::NonzeroReference || rel != 0.0 {
                    s += rel;
                    c += 1;
                }
            }
        }
        if c > 0 {
            sev = sev.max(s / c as f64);
        }
    }
    (mism, mism as f64 / cfg.site_elements() as f64, sev, zero)
}

fn capture_pair() -> impl Strategy<Value = (Vec<Tensor>, Vec<Tensor>)> {
    let c = cfg();
    let n = c.rows() * c.hidden;
    let shape = vec![c.rows(), c.hidden];
    let rank = vec(-3i32..4, n).prop_flat_map(move |h| {
        let len = h.len();
        (Just(h), vec((0u8..4, -2.0f32..2.0), len))
    });
    vec(rank, c.tp_degree).prop_map(move |ranks| {
        let mut hs = Vec::new();
        let mut us = Vec::new();
        for (h, noise) in ranks {
            let hv: Vec<f32> = h.iter().map(|&x| round_bf16(x as f32 * 0.37)).collect();
            let uv: Vec<f32> = hv
                .iter()
                .zip(&noise)
                .map(|(&x, &(pick, d))| if pick == 0 { x + d } else { x })
                .collect();
            hs.push(tensor(shape.clone(), hv));
            us.push(tensor(shape.clone(), uv));
        }
        (hs, us)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_brute_force((h, u) in capture_pair(), nonzero in any::<bool>()) {
        let c = cfg();
        let mode = if nonzero { SeverityMode::NonzeroReference } else { SeverityMode::Mismatching };
        let m = layer_metric(0, &h, &u, &c, mode).unwrap();
        let (mism, freq, sev, zero) = brute_force(&h, &u, &c, mode);
        prop_assert_eq!(m.mismatches, mism);
        prop_assert_eq!(m.freq, freq);
        prop_assert_eq!(m.sev, sev);
        prop_assert_eq!(m.zero_ref, zero);
    }

    #[test]
    fn no_mismatch_means_no_severity((h, _) in capture_pair()) {
        let c = cfg();
        for mode in [SeverityMode::Mismatching, SeverityMode::NonzeroReference] {
            let m = layer_metric(0, &h, &h, &c, mode).unwrap();
            prop_assert_eq!((m.freq, m.sev, m.zero_ref), (0.0, 0.0, 0));
        }
    }

    #[test]
    fn fixed_factor_severity_closed_form(
        vals in vec(prop_oneof![-1.0e3f32..-1.0e-3, 1.0e-3f32..1.0e3], 16..256),
        pick in vec(any::<bool>(), 256),
        alpha in prop_oneof![Just(1.5f64), Just(2.0), Just(0.75), Just(3.0)],
    ) {
        let h: Vec<f32> = vals.iter().map(|&v| round_bf16(v)).collect();
        prop_assume!(pick[..h.len()].iter().any(|&p| p));
        let u: Vec<f32> = h.iter().zip(&pick).map(|(&x, &p)| if p { (x as f64 * alpha) as f32 } else { x }).collect();
        let n = h.len();
        let (sev, zero) = rank_severity(&tensor(vec![n], h), &tensor(vec![n], u), SeverityMode::Mismatching);
        prop_assert_eq!(sev, (alpha - 1.0).abs());
        prop_assert_eq!(zero, 0);
    }

    #[test]
    fn wcnts_is_monotone(ratios in vec(prop_oneof![0.0f64..10.0, Just(f64::INFINITY)], 1..40)) {
        let mut prev = 0.0;
        for i in 1..=ratios.len() {
            let w = wcnts(&ratios[..i]);
            prop_assert!(w >= prev);
            prop_assert!(w.is_finite());
            prev = w;
        }
    }

    #[test]
    fn replay_reconstructs_corruption(
        data in vec(-4.0f32..4.0, 64..512),
        rate in 0.0f64..0.2,
        seed in 0u64..1000,
        step in 0u64..50,
    ) {
        let t = tensor(vec![data.len()], data);
        let p = hook_profile(rate, SeverityDist::LogUniformFactor([0.5, 8.0]), seed);
        let (bad, events) = corrupt(&t, &p, SiteKind::FwdAttn, at(step));
        prop_assert!(replay(&t, &events).unwrap().bit_eq(&bad));
        let (again, events2) = corrupt(&t, &p, SiteKind::FwdAttn, at(step));
        prop_assert!(again.bit_eq(&bad));
        prop_assert_eq!(events.len(), events2.len());
        prop_assert_eq!(events.len() as u64, sdclab::lockstep::mismatch_count(&t, &bad));
    }

    #[test]
    fn zero_rate_is_a_no_op(data in vec(-4.0f32..4.0, 1..512), seed in 0u64..1000, step in 0u64..50) {
        let t = tensor(vec![data.len()], data);
        let p = hook_profile(0.0, SeverityDist::FixedFactor(2.0), seed);
        let (out, events) = corrupt(&t, &p, SiteKind::FwdAttn, at(step));
        prop_assert!(events.is_empty());
        prop_assert_eq!(out.to_le_bytes(), t.to_le_bytes());
    }

    #[test]
    fn reduce_scatter_ignores_scheduling(vals in vec(-100.0f32..100.0, 4 * 8 * 3)) {
        let fulls: Vec<Tensor> = vals.chunks(8 * 3).map(|c| tensor(vec![8, 3], c.to_vec())).collect();
        let seq = reduce_scatter(&fulls).unwrap();
        let work = |r: usize| Ok(sdclab::tensor::scale(&fulls[r], 1.0).unwrap());
        let par = map_ranks(Schedule::Parallel, 4, work).unwrap();
        let par = reduce_scatter(&par).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            prop_assert!(a.bit_eq(b));
        }
        for (r, shard) in seq.iter().enumerate() {
            for (i, v) in shard.data().iter().enumerate() {
                let idx = r * 2 * 3 + i;
                let expect = ((fulls[0].data()[idx] + fulls[1].data()[idx]) + fulls[2].data()[idx]) + fulls[3].data()[idx];
                prop_assert_eq!(v.to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn gather_then_scatter_round_trips_integers(vals in vec(-64i32..64, 4 * 2 * 3)) {
        let shards: Vec<Tensor> = vals
            .chunks(6)
            .map(|c| tensor(vec![2, 3], c.iter().map(|&x| x as f32).collect()))
            .collect();
        let full = all_gather(&shards).unwrap();
        let scaled: Vec<Tensor> = full.iter().map(|t| sdclab::tensor::scale(t, 0.25).unwrap()).collect();
        let back = reduce_scatter(&scaled).unwrap();
        for (a, b) in shards.iter().zip(&back) {
            prop_assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn abft_flags_large_single_corruptions(
        a in vec(-1.0f32..1.0, 8 * 32),
        b in vec(-1.0f32..1.0, 32 * 6),
        idx in 0usize..48,
        scale in 2.01f64..100.0,
        sign in any::<bool>(),
    ) {
        let a = tensor(vec![8, 32], a);
        let b = tensor(vec![32, 6], b);
        let c = matmul(&a, &b).unwrap();
        let clean = verify(&a, &b, &c, RoundoffConvention::FrameworkEps).unwrap();
        prop_assert!(!clean.flagged);
        let delta = clean.rhs * scale * if sign { 1.0 } else { -1.0 };
        let mut bad = c.clone();
        bad.data_mut()[idx] += delta as f32;
        let check = verify(&a, &b, &bad, RoundoffConvention::FrameworkEps).unwrap();
        prop_assert!(check.flagged, "delta {} rhs {} lhs {}", delta, check.rhs, check.lhs);
    }
}
