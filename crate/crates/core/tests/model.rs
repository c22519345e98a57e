use sdclab::collectives::Schedule;
use sdclab::inject::{SdcProfile, SiteKind};
use sdclab::model::*;
use sdclab::tensor::{is_bf16, DType};

fn f32_cfg(tp: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        kv_heads: 2,
        seq_len: 16,
        vocab: 32,
        tp_degree: tp,
        micro_batch: 2,
        grad_accum: 1,
        ffn_mult: 4,
        dtype: DType::F32,
    }
}

fn run(
    cfg: &ModelConfig,
    params: &Params,
    batch: &TokenBatch,
    hooks: &mut dyn Hooks,
) -> (Cache, Params) {
    let mut exec = Exec::new(Schedule::Sequential);
    let cache = forward(cfg, params, batch, &mut exec, hooks).unwrap();
    let grads = backward(cfg, params, &cache, &mut exec, hooks).unwrap();
    (cache, grads)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

#[test]
fn zeroed_head_gives_uniform_loss() {
    let mut cfg = ModelConfig::tiny();
    cfg.vocab = 4;
    let mut p = Params::init(&cfg, 1).unwrap();
    p.head.data_mut().fill(0.0);
    let batch = microbatch_tokens(&cfg, 1, 0, 0);
    let mut exec = Exec::new(Schedule::Sequential);
    let loss = forward(&cfg, &p, &batch, &mut exec, &mut NoHooks)
        .unwrap()
        .loss;
    assert!((loss - 4f64.ln()).abs() < 1e-6, "{loss}");
    assert!((loss - 1.386294).abs() < 1e-6);
}

#[test]
fn tp_degrees_agree() {
    let base = f32_cfg(1);
    let p = Params::init(&base, 5).unwrap();
    let batch = microbatch_tokens(&base, 5, 0, 0);
    let (c1, g1) = run(&base, &p, &batch, &mut NoHooks);
    for tp in [2, 4] {
        let cfg = f32_cfg(tp);
        let (c, g) = run(&cfg, &p, &batch, &mut NoHooks);
        assert!(rel(c1.loss, c.loss) < 1e-3, "tp={tp}");
        let diff = g1.diff_l2(&g).unwrap();
        let norm = g1.diff_l2(&g1.zeros_like()).unwrap();
        assert!(diff / norm < 1e-3, "tp={tp}: grad rel diff {}", diff / norm);
    }
}

#[test]
fn position_zero_ignores_later_tokens() {
    let cfg = f32_cfg(2);
    let p = Params::init(&cfg, 2).unwrap();
    let batch = microbatch_tokens(&cfg, 2, 0, 0);
    let mut other = batch.clone();
    other.tokens[1] = (other.tokens[1] + 1) % cfg.vocab as u32;
    let mut e = Exec::new(Schedule::Sequential);
    let a = forward(&cfg, &p, &batch, &mut e, &mut NoHooks).unwrap();
    let b = forward(&cfg, &p, &other, &mut e, &mut NoHooks).unwrap();
    let (ha, hb) = (a.final_hidden(), b.final_hidden());
    assert_eq!(
        ha.row(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        hb.row(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_ne!(ha.row(1), hb.row(1));
}

#[test]
fn saturated_logits_give_tiny_gradients() {
    let cfg = f32_cfg(2);
    let mut p = Params::init(&cfg, 3).unwrap();
    let target = 7u32;
    let last = p.layers.last_mut().unwrap();
    last.ln2_gain.data_mut().fill(0.0);
    last.ln2_bias.data_mut().fill(1.0);
    p.head.data_mut().fill(0.0);
    let alpha = 40.0 / cfg.hidden as f32;
    for r in 0..cfg.hidden {
        p.head.data_mut()[r * cfg.vocab + target as usize] = alpha;
    }
    let batch = TokenBatch {
        tokens: vec![target; cfg.micro_batch * (cfg.seq_len + 1)],
        micro_batch: cfg.micro_batch,
        seq_len: cfg.seq_len,
    };
    let (c, g) = run(&cfg, &p, &batch, &mut NoHooks);
    assert!(c.loss < 1e-6, "{}", c.loss);
    assert!(global_norm(&g) <= 1e-3, "{}", global_norm(&g));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = ModelConfig::desk();
    let p = Params::init(&cfg, 4).unwrap();
    let batch = microbatch_tokens(&cfg, 4, 0, 0);
    let (c1, g1) = run(&cfg, &p, &batch, &mut NoHooks);
    let (c2, g2) = run(&cfg, &p, &batch, &mut NoHooks);
    assert_eq!(c1.loss.to_bits(), c2.loss.to_bits());
    assert!(g1.bit_eq(&g2));
}

#[test]
fn parallel_schedule_matches_sequential() {
    let cfg = ModelConfig::desk();
    let p = Params::init(&cfg, 6).unwrap();
    let batch = microbatch_tokens(&cfg, 6, 0, 0);
    let (c1, g1) = run(&cfg, &p, &batch, &mut NoHooks);
    let mut exec = Exec::new(Schedule::Parallel);
    let c2 = forward(&cfg, &p, &batch, &mut exec, &mut NoHooks).unwrap();
    let g2 = backward(&cfg, &p, &c2, &mut exec, &mut NoHooks).unwrap();
    assert_eq!(c1.loss.to_bits(), c2.loss.to_bits());
    assert!(g1.bit_eq(&g2));
}

#[test]
fn hooks_fire_once_per_site_and_layer() {
    let cfg = ModelConfig::desk();
    let p = Params::init(&cfg, 0).unwrap();
    let batch = microbatch_tokens(&cfg, 0, 0, 0);
    let mut rec = RecordingHooks::default();
    run(&cfg, &p, &batch, &mut rec);
    let order: Vec<(SiteKind, usize)> = rec.fired.iter().map(|(k, l, _)| (*k, *l)).collect();
    assert_eq!(
        order,
        vec![
            (SiteKind::FwdAttn, 0),
            (SiteKind::FwdFfn, 0),
            (SiteKind::FwdAttn, 1),
            (SiteKind::FwdFfn, 1),
            (SiteKind::BwdFfn, 1),
            (SiteKind::BwdAttn, 1),
            (SiteKind::BwdFfn, 0),
            (SiteKind::BwdAttn, 0),
        ]
    );
    for (_, _, ts) in &rec.fired {
        assert_eq!(ts.len(), cfg.tp_degree);
        for t in ts {
            assert_eq!(t.shape(), [cfg.rows(), cfg.hidden]);
            assert!(t.data().iter().all(|&v| is_bf16(v)));
        }
    }
}

#[test]
fn healthy_profile_matches_no_profile_at_every_hook() {
    let cfg = ModelConfig::desk();
    let p = Params::init(&cfg, 8).unwrap();
    let batch = microbatch_tokens(&cfg, 8, 0, 0);
    let mut a = RecordingHooks::default();
    let (_, ga) = run(&cfg, &p, &batch, &mut a);
    let zero_rate = SdcProfile::constant(&SiteKind::HOOKS, 0.0, Default::default(), 1);
    let mut exec = Exec::new(Schedule::Sequential).with_fault(Some(&zero_rate));
    let mut b = RecordingHooks::default();
    let c = forward(&cfg, &p, &batch, &mut exec, &mut b).unwrap();
    let gb = backward(&cfg, &p, &c, &mut exec, &mut b).unwrap();
    assert!(exec.events.is_empty());
    assert!(ga.bit_eq(&gb));
    for ((_, _, x), (_, _, y)) in a.fired.iter().zip(&b.fired) {
        assert!(x.iter().zip(y).all(|(s, t)| s.bit_eq(t)));
    }
}

#[test]
fn injection_changes_only_the_unhealthy_view() {
    let cfg = ModelConfig::desk();
    let p = Params::init(&cfg, 9).unwrap();
    let batch = microbatch_tokens(&cfg, 9, 0, 0);
    let prof = SdcProfile::constant(&[SiteKind::FwdFfn], 1e-3, Default::default(), 2);
    let mut exec = Exec::new(Schedule::Sequential).with_fault(Some(&prof));
    let mut rec = RecordingHooks::default();
    forward(&cfg, &p, &batch, &mut exec, &mut rec).unwrap();
    assert!(!exec.events.is_empty());
    assert!(exec.events.iter().all(|e| e.site == SiteKind::FwdFfn));
    let mut clean = RecordingHooks::default();
    let mut e2 = Exec::new(Schedule::Sequential);
    forward(&cfg, &p, &batch, &mut e2, &mut clean).unwrap();
    // the first attention hook precedes any injection
    assert!(rec.fired[0]
        .2
        .iter()
        .zip(&clean.fired[0].2)
        .all(|(a, b)| a.bit_eq(b)));
    assert!(!rec.fired[1]
        .2
        .iter()
        .zip(&clean.fired[1].2)
        .all(|(a, b)| a.bit_eq(b)));
}

#[test]
fn matmul_internal_faults_are_logged_with_op() {
    let cfg = f32_cfg(2);
    let p = Params::init(&cfg, 1).unwrap();
    let batch = microbatch_tokens(&cfg, 1, 0, 0);
    let prof = SdcProfile::constant(&[SiteKind::MatmulInternal], 1e-3, Default::default(), 4);
    let mut exec = Exec::new(Schedule::Sequential).with_fault(Some(&prof));
    let c = forward(&cfg, &p, &batch, &mut exec, &mut NoHooks).unwrap();
    backward(&cfg, &p, &c, &mut exec, &mut NoHooks).unwrap();
    assert!(!exec.events.is_empty());
    assert!(exec.events.iter().all(|e| e.op.is_some()));
    assert!(exec
        .events
        .iter()
        .any(|e| e.site_label().starts_with("matmul_internal/")));
}

#[test]
fn out_of_range_token_is_contract_error() {
    let cfg = ModelConfig::tiny();
    let p = Params::init(&cfg, 0).unwrap();
    let mut batch = microbatch_tokens(&cfg, 0, 0, 0);
    batch.tokens[0] = cfg.vocab as u32;
    let mut exec = Exec::new(Schedule::Sequential);
    let err = forward(&cfg, &p, &batch, &mut exec, &mut NoHooks).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn overflowing_activation_is_numerical_with_location() {
    let cfg = f32_cfg(1);
    let mut p = Params::init(&cfg, 0).unwrap();
    p.layers[1].ln1_bias.data_mut().fill(1e30);
    let batch = microbatch_tokens(&cfg, 0, 0, 0);
    let mut exec = Exec::new(Schedule::Sequential);
    exec.at(3, 12);
    let err = forward(&cfg, &p, &batch, &mut exec, &mut NoHooks).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(msg.contains("step 3") && msg.contains("layer 1"), "{msg}");
}

#[test]
fn gradcheck_tiny_config() {
    let r = gradcheck(&ModelConfig::tiny(), 0, 1e-2).unwrap();
    assert_eq!(r.tensors.len(), 2 + 11 * 2);
    assert!(r.max_rel_err <= 1e-2, "{:?}", r.worst());
}

#[test]
fn snapshot_resume_reproduces_trajectory() {
    let cfg = ModelConfig::tiny();
    let p = Params::init(&cfg, 0).unwrap();
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("p.bin");
    write_snapshot(&path, &p).unwrap();
    let q = read_snapshot(&path, &p).unwrap();
    let batch = microbatch_tokens(&cfg, 0, 0, 0);
    let (_, ga) = run(&cfg, &p, &batch, &mut NoHooks);
    let (_, gb) = run(&cfg, &q, &batch, &mut NoHooks);
    assert!(ga.bit_eq(&gb));
}
