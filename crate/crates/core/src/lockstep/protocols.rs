use std::collections::BTreeMap;
use std::vec;

use super::metrics::{aggregate, layer_metric, LayerMetric, SeverityMode, SiteReport};
use super::sink::{CalibrationRow, Rq1LayerRow, Rq1Row, Rq2Row, Rq3Row, ShadowRow, Sink};
use crate::abft::{flag_rate_report, FlagRow, RoundoffConvention};
use crate::collectives::{broadcast, Schedule};
use crate::error::{Error, Result};
use crate::inject::{binomial_ci99, temporal_rate, FaultEvent, SdcProfile, SiteKind, Temporal};
use crate::model::{
    adam_step, backward, clip_by_global_norm, forward, global_norm, microbatch_tokens, AdamHyper,
    AdamState, Exec, Hooks, LinearCheck, LrSchedule, ModelConfig, Params, RecordingHooks,
};
use crate::tensor::{accumulate, Tensor};

/// Everything a protocol needs to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: ModelConfig,
    pub profile: SdcProfile,
    /// Optimizer steps `M`.
    pub steps: u64,
    pub seed: u64,
    /// `lr` is the peak learning rate.
    pub optimizer: AdamHyper,
    pub warmup_frac: f64,
    pub min_lr_frac: f64,
    pub severity_mode: SeverityMode,
    pub u_convention: RoundoffConvention,
    pub schedule: Schedule,
    /// Emit checkpoints after these many updates (0 = initial parameters).
    pub snapshot_steps: Vec<u64>,
    /// Starting parameters; seeded initialization when `None`.
    pub init: Option<Params>,
    /// Steady-state microsteps measured by `run_calibrate`.
    pub calibrate_microsteps: u64,
}

impl Experiment {
    pub fn new(model: ModelConfig, profile: SdcProfile, steps: u64, seed: u64) -> Self {
        Experiment {
            model,
            profile,
            steps,
            seed,
            optimizer: AdamHyper::default(),
            warmup_frac: 0.02,
            min_lr_frac: 0.1,
            severity_mode: SeverityMode::default(),
            u_convention: RoundoffConvention::default(),
            schedule: Schedule::Sequential,
            snapshot_steps: Vec::new(),
            init: None,
            calibrate_microsteps: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.profile.validate("profile")?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        Ok(())
    }

    fn lr(&self) -> LrSchedule {
        LrSchedule::new(
            self.optimizer.lr,
            self.steps,
            self.warmup_frac,
            self.min_lr_frac,
        )
    }

    fn initial_params(&self) -> Result<Params> {
        match &self.init {
            Some(p) => Ok(p.clone()),
            None => Params::init(&self.model, self.seed),
        }
    }

    fn microstep(&self, step: u64, accum: usize) -> u64 {
        step * self.model.grad_accum as u64 + accum as u64
    }

    fn wants_snapshot(&self, updates: u64) -> bool {
        self.snapshot_steps.contains(&updates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Completed,
    /// The unhealthy trajectory hit NaN/Inf during this step and was stopped.
    UnhealthyDiverged {
        step: u64,
    },
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Completed => "completed",
            Status::UnhealthyDiverged { .. } => "unhealthy_diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: Status,
    /// Rows emitted (steps fully completed by both nodes).
    pub steps_run: u64,
    pub events: u64,
}

struct Node {
    params: Params,
    adam: AdamState,
}

impl Node {
    fn new(params: Params) -> Self {
        let adam = AdamState::new(&params);
        Node { params, adam }
    }

    /// Clips, steps Adam, and returns the pre-clip gradient norm.
    fn update(&mut self, exp: &Experiment, mut grads: Params, step: u64) -> Result<f64> {
        let norm = clip_by_global_norm(&mut grads, exp.optimizer.max_grad_norm);
        adam_step(
            &mut self.params,
            &grads,
            &mut self.adam,
            &exp.optimizer,
            exp.lr().lr(step),
        )?;
        Ok(norm)
    }
}

fn sum_into(acc: &mut Option<Params>, g: Params) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (x, y) in a.tensors_mut().into_iter().zip(g.tensors()) {
                accumulate(x, y)?;
            }
        }
    }
    Ok(())
}

fn mean_of(acc: Option<Params>, n: usize) -> Params {
    let mut g = acc.expect("at least one microstep");
    if n > 1 {
        let s = 1.0 / n as f32;
        for t in g.tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    g
}

/// Mean loss and mean gradient over the step's microsteps on one node.
fn node_grads(
    exp: &Experiment,
    params: &Params,
    step: u64,
    fault: Option<&SdcProfile>,
    abft: Option<RoundoffConvention>,
    events: &mut Vec<FaultEvent>,
    checks: &mut Vec<LinearCheck>,
) -> Result<(f64, Params)> {
    let cfg = &exp.model;
    let mut acc = None;
    let mut loss = 0.0;
    for a in 0..cfg.grad_accum {
        let batch = microbatch_tokens(cfg, exp.seed, step, a);
        let mut exec = Exec::new(exp.schedule).with_fault(fault).with_abft(abft);
        exec.at(step, exp.microstep(step, a));
        let res =
            forward(cfg, params, &batch, &mut exec, &mut crate::model::NoHooks).and_then(|cache| {
                let g = backward(cfg, params, &cache, &mut exec, &mut crate::model::NoHooks)?;
                Ok((cache.loss, g))
            });
        events.append(&mut exec.events);
        checks.append(&mut exec.checks);
        let (l, g) = res?;
        loss += l;
        sum_into(&mut acc, g)?;
    }
    Ok((loss / cfg.grad_accum as f64, mean_of(acc, cfg.grad_accum)))
}

fn checkpoint(
    exp: &Experiment,
    sink: &mut dyn Sink,
    updates: u64,
    h: &Params,
    u: Option<&Params>,
) -> Result<()> {
    if exp.wants_snapshot(updates) {
        sink.checkpoint(updates, h, u)?;
    }
    Ok(())
}

/// Compares the unhealthy node's hook tensors with the healthy node's
/// recording, then overwrites them with the healthy values.
struct LockstepHooks<'a> {
    expected: vec::IntoIter<(SiteKind, usize, Vec<Tensor>)>,
    cfg: &'a ModelConfig,
    mode: SeverityMode,
    layers: BTreeMap<SiteKind, Vec<LayerMetric>>,
}

impl<'a> LockstepHooks<'a> {
    fn new(recorded: RecordingHooks, cfg: &'a ModelConfig, mode: SeverityMode) -> Self {
        LockstepHooks {
            expected: recorded.fired.into_iter(),
            cfg,
            mode,
            layers: BTreeMap::new(),
        }
    }

    fn finish(mut self, microstep: u64) -> Result<Vec<SiteReport>> {
        if self.expected.next().is_some() {
            return Err(Error::Invariant(
                "unhealthy node skipped a hook site".into(),
            ));
        }
        let mut out = Vec::with_capacity(SiteKind::HOOKS.len());
        for kind in SiteKind::HOOKS {
            let mut layers = self.layers.remove(&kind).unwrap_or_default();
            layers.sort_by_key(|l| l.layer);
            out.push(aggregate(kind, microstep, layers)?);
        }
        Ok(out)
    }
}

impl Hooks for LockstepHooks<'_> {
    fn on_site(&mut self, kind: SiteKind, layer: usize, tensors: &mut [Tensor]) -> Result<()> {
        let (k, l, healthy) = self
            .expected
            .next()
            .ok_or_else(|| Error::Invariant("unhealthy node fired an extra hook".into()))?;
        if (k, l) != (kind, layer) {
            return Err(Error::Invariant(format!(
                "hook order diverged: healthy {k} layer {l}, unhealthy {kind} layer {layer}"
            )));
        }
        let m = layer_metric(layer, &healthy, tensors, self.cfg, self.mode)?;
        self.layers.entry(kind).or_default().push(m);
        tensors.clone_from_slice(&healthy);
        Ok(())
    }
}

/// Lock-step computation synchronization.
///
/// The healthy node runs each microstep first and records its hook tensors;
/// the unhealthy node then runs the same microstep, and at every hook site
/// its tensors are compared against and overwritten by the recording. The
/// healthy node never reads unhealthy state, so this ordering gives the same
/// results as a barrier at each site.
pub fn run_rq1(exp: &Experiment, sink: &mut dyn Sink) -> Result<Outcome> {
    exp.validate()?;
    let cfg = &exp.model;
    let init = exp.initial_params()?;
    let mut h = Node::new(init.clone());
    let mut u = Node::new(init);
    let mut n_events = 0;
    checkpoint(exp, sink, 0, &h.params, Some(&u.params))?;
    for s in 0..exp.steps {
        let (mut gh, mut gu) = (None, None);
        for a in 0..cfg.grad_accum {
            let j = exp.microstep(s, a);
            let batch = microbatch_tokens(cfg, exp.seed, s, a);
            let mut eh = Exec::new(exp.schedule);
            eh.at(s, j);
            let mut rec = RecordingHooks::default();
            let ch = forward(cfg, &h.params, &batch, &mut eh, &mut rec)?;
            sum_into(&mut gh, backward(cfg, &h.params, &ch, &mut eh, &mut rec)?)?;

            let mut eu = Exec::new(exp.schedule).with_fault(Some(&exp.profile));
            eu.at(s, j);
            let mut lock = LockstepHooks::new(rec, cfg, exp.severity_mode);
            let res = forward(cfg, &u.params, &batch, &mut eu, &mut lock)
                .and_then(|cu| backward(cfg, &u.params, &cu, &mut eu, &mut lock));
            sink.events(&eu.events)?;
            n_events += eu.events.len() as u64;
            sum_into(&mut gu, res?)?;

            for r in lock.finish(j)? {
                let site = r.kind.to_string();
                sink.rq1(&Rq1Row {
                    step: s,
                    microstep: j,
                    site: site.clone(),
                    freq: r.freq,
                    sev: r.sev,
                    zero_ref_count: r.zero_ref_count,
                })?;
                for l in &r.layers {
                    sink.rq1_layer(&Rq1LayerRow {
                        step: s,
                        microstep: j,
                        site: site.clone(),
                        layer: l.layer,
                        mismatches: l.mismatches,
                        freq: l.freq,
                        sev: l.sev,
                        zero_ref_count: l.zero_ref,
                    })?;
                }
            }
        }
        h.update(exp, mean_of(gh, cfg.grad_accum), s)?;
        u.update(exp, mean_of(gu, cfg.grad_accum), s)?;
        if exp.profile.hook_sites_only() {
            if let Some(name) = h.params.first_difference(&u.params) {
                return Err(Error::Invariant(format!(
                    "lock-step containment broken after step {s}: {name} differs"
                )));
            }
        }
        checkpoint(exp, sink, s + 1, &h.params, Some(&u.params))?;
    }
    Ok(Outcome {
        status: Status::Completed,
        steps_run: exp.steps,
        events: n_events,
    })
}

/// Gradient comparison with parameter synchronization by broadcast.
pub fn run_rq2(exp: &Experiment, sink: &mut dyn Sink) -> Result<Outcome> {
    exp.validate()?;
    let init = exp.initial_params()?;
    let mut h = Node::new(init.clone());
    let mut u_params = init;
    let mut wc = 0.0f64;
    let mut n_events = 0;
    checkpoint(exp, sink, 0, &h.params, Some(&u_params))?;
    for s in 0..exp.steps {
        let mut events = Vec::new();
        let (_, gh) = node_grads(
            exp,
            &h.params,
            s,
            None,
            None,
            &mut Vec::new(),
            &mut Vec::new(),
        )?;
        let res = node_grads(
            exp,
            &u_params,
            s,
            Some(&exp.profile),
            None,
            &mut events,
            &mut Vec::new(),
        );
        sink.events(&events)?;
        n_events += events.len() as u64;
        let (_, gu) = res?;
        let diff_l2 = gh.diff_l2(&gu)?;
        let truth_l2 = global_norm(&gh);
        let ratio = if truth_l2 > 0.0 {
            diff_l2 / truth_l2
        } else if diff_l2 == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if ratio.is_finite() {
            wc = wc.max(ratio);
        }
        sink.rq2(&Rq2Row {
            step: s,
            diff_l2,
            truth_l2,
            ratio,
            wcnts: wc,
        })?;
        h.update(exp, gh, s)?;
        u_params = broadcast(&h.params, 1).swap_remove(0);
        if !u_params.bit_eq(&h.params) {
            return Err(Error::Invariant(format!(
                "parameters differ after broadcast at step {s}"
            )));
        }
        checkpoint(exp, sink, s + 1, &h.params, Some(&u_params))?;
    }
    Ok(Outcome {
        status: Status::Completed,
        steps_run: exp.steps,
        events: n_events,
    })
}

/// Free-running paired training; records parameter drift.
pub fn run_rq3(exp: &Experiment, sink: &mut dyn Sink) -> Result<Outcome> {
    exp.validate()?;
    let init = exp.initial_params()?;
    let mut h = Node::new(init.clone());
    let mut u = Node::new(init);
    let mut n_events = 0;
    checkpoint(exp, sink, 0, &h.params, Some(&u.params))?;
    for s in 0..exp.steps {
        let (loss_healthy, gh) = node_grads(
            exp,
            &h.params,
            s,
            None,
            None,
            &mut Vec::new(),
            &mut Vec::new(),
        )?;
        let mut events = Vec::new();
        let unhealthy = node_grads(
            exp,
            &u.params,
            s,
            Some(&exp.profile),
            None,
            &mut events,
            &mut Vec::new(),
        )
        .and_then(|(l, g)| Ok((l, u.update(exp, g, s)?)));
        sink.events(&events)?;
        n_events += events.len() as u64;
        let (loss_unhealthy, gnorm_unhealthy) = match unhealthy {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                return Ok(Outcome {
                    status: Status::UnhealthyDiverged { step: s },
                    steps_run: s,
                    events: n_events,
                });
            }
            Err(e) => return Err(e),
        };
        let gnorm_healthy = h.update(exp, gh, s)?;
        let param_diff_l2 = h.params.diff_l2(&u.params)?;
        sink.rq3(&Rq3Row {
            step: s,
            param_diff_l2,
            loss_healthy,
            loss_unhealthy,
            gnorm_healthy,
            gnorm_unhealthy,
        })?;
        checkpoint(exp, sink, s + 1, &h.params, Some(&u.params))?;
    }
    Ok(Outcome {
        status: Status::Completed,
        steps_run: exp.steps,
        events: n_events,
    })
}

/// Shadow data-parallel replica: the target (unhealthy) and a shadow replica
/// process the same microbatches from shared parameters; their gradients are
/// compared bitwise before averaging.
pub fn run_shadow(exp: &Experiment, sink: &mut dyn Sink) -> Result<Outcome> {
    exp.validate()?;
    let mut node = Node::new(exp.initial_params()?);
    let mut n_events = 0;
    checkpoint(exp, sink, 0, &node.params, None)?;
    for s in 0..exp.steps {
        let mut events = Vec::new();
        let target = node_grads(
            exp,
            &node.params,
            s,
            Some(&exp.profile),
            None,
            &mut events,
            &mut Vec::new(),
        );
        sink.events(&events)?;
        n_events += events.len() as u64;
        let (_, gt) = target?;
        let (_, gs) = node_grads(
            exp,
            &node.params,
            s,
            None,
            None,
            &mut Vec::new(),
            &mut Vec::new(),
        )?;
        let first = gs.first_difference(&gt);
        sink.shadow(&ShadowRow {
            step: s,
            alarm: first.is_some(),
            first_diff_tensor: first.unwrap_or_default(),
        })?;
        let mut avg = gt;
        avg.zip_apply(&gs, |a, b| *a = (*a + b) * 0.5);
        node.update(exp, avg, s)?;
        checkpoint(exp, sink, s + 1, &node.params, None)?;
    }
    Ok(Outcome {
        status: Status::Completed,
        steps_run: exp.steps,
        events: n_events,
    })
}

/// Trains one (possibly unhealthy) node with checksummed matmuls at every
/// linear layer and reports flag counts.
pub fn run_abft(exp: &Experiment, sink: &mut dyn Sink) -> Result<Outcome> {
    exp.validate()?;
    let mut node = Node::new(exp.initial_params()?);
    let fault = (!exp.profile.sites.is_empty()).then_some(&exp.profile);
    let mut n_events = 0;
    checkpoint(exp, sink, 0, &node.params, None)?;
    for s in 0..exp.steps {
        let mut events = Vec::new();
        let mut checks = Vec::new();
        let res = node_grads(
            exp,
            &node.params,
            s,
            fault,
            Some(exp.u_convention),
            &mut events,
            &mut checks,
        );
        sink.events(&events)?;
        n_events += events.len() as u64;
        let (_, g) = res?;
        let rows: Vec<FlagRow> =
            flag_rate_report(checks.iter().map(|c| (s, c.layer, c.op, &c.check)));
        for r in &rows {
            sink.abft(r)?;
        }
        node.update(exp, g, s)?;
        checkpoint(exp, sink, s + 1, &node.params, None)?;
    }
    Ok(Outcome {
        status: Status::Completed,
        steps_run: exp.steps,
        events: n_events,
    })
}

/// Forwards to an inner sink while keeping per-layer rows for one site.
struct Tee<'a> {
    inner: &'a mut dyn Sink,
    site: String,
    layers: Vec<Rq1LayerRow>,
}

impl Sink for Tee<'_> {
    fn rq1(&mut self, row: &Rq1Row) -> Result<()> {
        self.inner.rq1(row)
    }
    fn rq1_layer(&mut self, row: &Rq1LayerRow) -> Result<()> {
        if row.site == self.site {
            self.layers.push(row.clone());
        }
        self.inner.rq1_layer(row)
    }
    fn events(&mut self, events: &[FaultEvent]) -> Result<()> {
        self.inner.events(events)
    }
    fn checkpoint(&mut self, step: u64, h: &Params, u: Option<&Params>) -> Result<()> {
        self.inner.checkpoint(step, h, u)
    }
}

/// Runs lock-step past any initial spike and checks that the measured
/// mismatch frequency at the profile's first hook site lies in the 99%
/// binomial interval of the configured rate.
pub fn run_calibrate(exp: &Experiment, sink: &mut dyn Sink) -> Result<(CalibrationRow, Outcome)> {
    exp.validate()?;
    let cfg = &exp.model;
    let site = exp
        .profile
        .sites
        .iter()
        .copied()
        .find(|s| s.is_hook())
        .ok_or_else(|| Error::config("profile.sites", "calibration needs a hook site"))?;
    let start = match exp.profile.temporal {
        Temporal::InitialSpike { steps, .. } => steps,
        _ => 0,
    };
    let ga = cfg.grad_accum as u64;
    let mut run = exp.clone();
    run.steps = start + exp.calibrate_microsteps.div_ceil(ga).max(1);
    let mut tee = Tee {
        inner: sink,
        site: site.to_string(),
        layers: Vec::new(),
    };
    let outcome = run_rq1(&run, &mut tee)?;

    let affected = match &exp.profile.affected_ranks {
        None => cfg.tp_degree,
        Some(r) => (0..cfg.tp_degree).filter(|x| r.contains(x)).count(),
    };
    let per_rank = (cfg.rows() * cfg.hidden) as u64;
    let per_micro = cfg.site_elements() as u64 * cfg.layers as u64;
    let first_micro = start * ga;
    let last_micro = first_micro + exp.calibrate_microsteps;
    let mut mismatches = 0u64;
    for r in &tee.layers {
        if (first_micro..last_micro).contains(&r.microstep) {
            mismatches += r.mismatches;
        }
    }
    let mut groups = Vec::new();
    for j in first_micro..last_micro {
        let p = temporal_rate(&exp.profile, j / ga);
        groups.push((per_rank * affected as u64 * cfg.layers as u64, p));
    }
    let elements = per_micro * exp.calibrate_microsteps;
    let (lo, hi) = binomial_ci99(&groups);
    let expected: f64 = groups.iter().map(|(n, p)| *n as f64 * p).sum();
    let row = CalibrationRow {
        microsteps: exp.calibrate_microsteps,
        elements,
        mismatches,
        measured_rate: mismatches as f64 / elements as f64,
        expected_rate: expected / elements as f64,
        ci_lo: lo / elements as f64,
        ci_hi: hi / elements as f64,
        within_ci: (lo..=hi).contains(&(mismatches as f64)),
    };
    tee.inner.calibration(&row)?;
    if !row.within_ci {
        return Err(Error::Invariant(format!(
            "calibration: measured rate {} outside [{}, {}]",
            row.measured_rate, row.ci_lo, row.ci_hi
        )));
    }
    Ok((row, outcome))
}
