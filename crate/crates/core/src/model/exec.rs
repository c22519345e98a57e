use super::{Hooks, LayerParams, ModelConfig, Params, TokenBatch};
use crate::abft::{self, AbftCheck, RoundoffConvention};
use crate::collectives::{all_gather, map_ranks, reduce_scatter, Schedule};
use crate::error::{Error, Locate, Result};
use crate::inject::{
    corrupt, corrupt_matmul_accumulator, Coords, FaultEvent, SdcProfile, SiteKind,
};
use crate::tensor::{
    accumulate, add, cross_entropy, layer_norm, layer_norm_backward, matmul, mul, scale,
    softmax_backward, softmax_causal, swish, swish_grad, DType, LnCache, Tensor,
};

/// ABFT verdict for one linear-layer matmul.
#[derive(Debug, Clone)]
pub struct LinearCheck {
    pub layer: usize,
    pub rank: usize,
    pub op: &'static str,
    pub check: AbftCheck,
}

/// Per-node execution context for one microstep.
///
/// A healthy node has `fault = None`. Fault events and ABFT checks are
/// appended in rank order regardless of the schedule.
pub struct Exec<'a> {
    pub schedule: Schedule,
    pub fault: Option<&'a SdcProfile>,
    pub abft: Option<RoundoffConvention>,
    pub step: u64,
    pub microstep: u64,
    pub events: Vec<FaultEvent>,
    pub checks: Vec<LinearCheck>,
}

impl<'a> Exec<'a> {
    pub fn new(schedule: Schedule) -> Self {
        Exec {
            schedule,
            fault: None,
            abft: None,
            step: 0,
            microstep: 0,
            events: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn with_fault(mut self, profile: Option<&'a SdcProfile>) -> Self {
        self.fault = profile;
        self
    }

    pub fn with_abft(mut self, convention: Option<RoundoffConvention>) -> Self {
        self.abft = convention;
        self
    }

    pub fn at(&mut self, step: u64, microstep: u64) {
        self.step = step;
        self.microstep = microstep;
    }

    fn coords(&self, layer: usize, rank: usize) -> Coords {
        Coords {
            step: self.step,
            microstep: self.microstep,
            layer,
            rank,
        }
    }

    fn run_ranks<T: Send>(
        &mut self,
        layer: usize,
        ranks: usize,
        f: impl Fn(&mut RankCtx, usize) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let (fault, abft) = (self.fault, self.abft);
        let base = self.coords(layer, 0);
        let outs = map_ranks(self.schedule, ranks, |rank| {
            let mut ctx = RankCtx {
                fault,
                abft,
                at: Coords { rank, ..base },
                events: Vec::new(),
                checks: Vec::new(),
            };
            let v = f(&mut ctx, rank)?;
            Ok((v, ctx.events, ctx.checks))
        })?;
        let mut vals = Vec::with_capacity(outs.len());
        for (v, ev, ch) in outs {
            self.events.extend(ev);
            self.checks.extend(ch);
            vals.push(v);
        }
        Ok(vals)
    }

    fn inject_site(&mut self, kind: SiteKind, layer: usize, tensors: &mut [Tensor]) {
        let Some(profile) = self.fault else { return };
        for (rank, t) in tensors.iter_mut().enumerate() {
            let (out, ev) = corrupt(t, profile, kind, self.coords(layer, rank));
            if !ev.is_empty() {
                *t = out;
                self.events.extend(ev);
            }
        }
    }
}

struct RankCtx<'a> {
    fault: Option<&'a SdcProfile>,
    abft: Option<RoundoffConvention>,
    at: Coords,
    events: Vec<FaultEvent>,
    checks: Vec<LinearCheck>,
}

impl RankCtx<'_> {
    /// Linear-layer matmul: the only place matmul-internal faults and ABFT apply.
    fn linear(&mut self, op: &'static str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let c = match self.fault {
            Some(p) if p.targets(SiteKind::MatmulInternal, self.at.rank) => {
                let (c, ev) = corrupt_matmul_accumulator(a, b, p, op, self.at)?;
                self.events.extend(ev);
                c
            }
            _ => matmul(a, b)?,
        };
        if let Some(conv) = self.abft {
            let check = abft::verify(a, b, &c, conv)?;
            self.checks.push(LinearCheck {
                layer: self.at.layer,
                rank: self.at.rank,
                op,
                check,
            });
        }
        Ok(c)
    }
}

struct AttnRank {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Indexed by `local_head * micro_batch + sample`.
    probs: Vec<Tensor>,
    o: Tensor,
}

struct FfnRank {
    gate: Tensor,
    sw: Tensor,
    up: Tensor,
    z: Tensor,
}

struct LayerCache {
    x_full: Tensor,
    attn: Vec<AttnRank>,
    ln1: Vec<LnCache>,
    h_full: Tensor,
    ffn: Vec<FfnRank>,
    ln2: Vec<LnCache>,
}

/// Forward activations kept for backward.
pub struct Cache {
    inputs: Vec<u32>,
    layers: Vec<LayerCache>,
    final_hidden: Tensor,
    dlogits: Tensor,
    pub loss: f64,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache")
            .field("loss", &self.loss)
            .field("layers", &self.layers.len())
            .finish()
    }
}

impl Cache {
    /// Output of the last decoder layer, all rows, before the head.
    pub fn final_hidden(&self) -> &Tensor {
        &self.final_hidden
    }
}

/// Range of KV heads `(first, count)` needed by rank `t`.
fn kv_range(cfg: &ModelConfig, t: usize) -> (usize, usize) {
    let h0 = t * cfg.heads_per_rank();
    let lo = h0 / cfg.group();
    let hi = (h0 + cfg.heads_per_rank() - 1) / cfg.group();
    (lo, hi - lo + 1)
}

struct AttnWeights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

fn attn_weights(cfg: &ModelConfig, lp: &LayerParams, t: usize) -> AttnWeights {
    let (hd, hpr, dt) = (cfg.head_dim(), cfg.heads_per_rank(), cfg.dtype);
    let h0 = t * hpr;
    let (kv_lo, kv_n) = kv_range(cfg, t);
    AttnWeights {
        wq: lp.wq.slice_cols(h0 * hd, (h0 + hpr) * hd).to_dtype(dt),
        wk: lp
            .wk
            .slice_cols(kv_lo * hd, (kv_lo + kv_n) * hd)
            .to_dtype(dt),
        wv: lp
            .wv
            .slice_cols(kv_lo * hd, (kv_lo + kv_n) * hd)
            .to_dtype(dt),
        wo: lp.wo.slice_rows(h0 * hd, (h0 + hpr) * hd).to_dtype(dt),
    }
}

fn attn_scale(cfg: &ModelConfig) -> f32 {
    (1.0 / (cfg.head_dim() as f64).sqrt()) as f32
}

fn attn_fwd(
    ctx: &mut RankCtx,
    cfg: &ModelConfig,
    lp: &LayerParams,
    x: &Tensor,
    t: usize,
) -> Result<(Tensor, AttnRank)> {
    let (hd, hpr, l) = (cfg.head_dim(), cfg.heads_per_rank(), cfg.seq_len);
    let h0 = t * hpr;
    let (kv_lo, _) = kv_range(cfg, t);
    let w = attn_weights(cfg, lp, t);
    let q = ctx.linear("attn.wq", x, &w.wq)?;
    let k = ctx.linear("attn.wk", x, &w.wk)?;
    let v = ctx.linear("attn.wv", x, &w.wv)?;
    let sc = attn_scale(cfg);
    let mut o = Tensor::zeros(vec![cfg.rows(), hpr * hd], DType::F32);
    let mut probs = Vec::with_capacity(hpr * cfg.micro_batch);
    for hl in 0..hpr {
        let kvl = (h0 + hl) / cfg.group() - kv_lo;
        for b in 0..cfg.micro_batch {
            let r0 = b * l;
            let qb = q.block(r0, hl * hd, l, hd);
            let kb = k.block(r0, kvl * hd, l, hd);
            let vb = v.block(r0, kvl * hd, l, hd);
            let s = scale(&matmul(&qb, &kb.transpose())?, sc)?;
            let p = softmax_causal(&s)?;
            o.add_block(r0, hl * hd, &matmul(&p, &vb)?);
            probs.push(p);
        }
    }
    let o = o.to_dtype(cfg.dtype);
    let y = ctx.linear("attn.wo", &o, &w.wo)?;
    Ok((y, AttnRank { q, k, v, probs, o }))
}

struct AttnGrads {
    dx: Tensor,
    dwq: Tensor,
    dwk: Tensor,
    dwv: Tensor,
    dwo: Tensor,
}

fn attn_bwd(
    ctx: &mut RankCtx,
    cfg: &ModelConfig,
    lp: &LayerParams,
    x: &Tensor,
    c: &AttnRank,
    dy: &Tensor,
    t: usize,
) -> Result<AttnGrads> {
    let (hd, hpr, l) = (cfg.head_dim(), cfg.heads_per_rank(), cfg.seq_len);
    let h0 = t * hpr;
    let (kv_lo, kv_n) = kv_range(cfg, t);
    let w = attn_weights(cfg, lp, t);
    let dwo = ctx.linear("attn.wo.dw", &c.o.transpose(), dy)?;
    let d_o = ctx.linear("attn.wo.dx", dy, &w.wo.transpose())?;
    let sc = attn_scale(cfg);
    let mut dq = Tensor::zeros(vec![cfg.rows(), hpr * hd], DType::F32);
    let mut dk = Tensor::zeros(vec![cfg.rows(), kv_n * hd], DType::F32);
    let mut dv = Tensor::zeros(vec![cfg.rows(), kv_n * hd], DType::F32);
    for hl in 0..hpr {
        let kvl = (h0 + hl) / cfg.group() - kv_lo;
        for b in 0..cfg.micro_batch {
            let r0 = b * l;
            let p = &c.probs[hl * cfg.micro_batch + b];
            let dob = d_o.block(r0, hl * hd, l, hd);
            let qb = c.q.block(r0, hl * hd, l, hd);
            let kb = c.k.block(r0, kvl * hd, l, hd);
            let vb = c.v.block(r0, kvl * hd, l, hd);
            let dp = matmul(&dob, &vb.transpose())?;
            dv.add_block(r0, kvl * hd, &matmul(&p.transpose(), &dob)?);
            let ds = scale(&softmax_backward(p, &dp)?, sc)?;
            dq.add_block(r0, hl * hd, &matmul(&ds, &kb)?);
            dk.add_block(r0, kvl * hd, &matmul(&ds.transpose(), &qb)?);
        }
    }
    let (dq, dk, dv) = (
        dq.to_dtype(cfg.dtype),
        dk.to_dtype(cfg.dtype),
        dv.to_dtype(cfg.dtype),
    );
    let xt = x.transpose();
    let dwq = ctx.linear("attn.wq.dw", &xt, &dq)?;
    let dwk = ctx.linear("attn.wk.dw", &xt, &dk)?;
    let dwv = ctx.linear("attn.wv.dw", &xt, &dv)?;
    let dx = ctx.linear("attn.wq.dx", &dq, &w.wq.transpose())?;
    let dx = add(&dx, &ctx.linear("attn.wk.dx", &dk, &w.wk.transpose())?)?;
    let dx = add(&dx, &ctx.linear("attn.wv.dx", &dv, &w.wv.transpose())?)?;
    Ok(AttnGrads {
        dx,
        dwq,
        dwk,
        dwv,
        dwo,
    })
}

struct FfnWeights {
    wg: Tensor,
    wu: Tensor,
    wd: Tensor,
}

fn ffn_weights(cfg: &ModelConfig, lp: &LayerParams, t: usize) -> FfnWeights {
    let per = cfg.ffn_hidden() / cfg.tp_degree;
    let c0 = t * per;
    FfnWeights {
        wg: lp.w_gate.slice_cols(c0, c0 + per).to_dtype(cfg.dtype),
        wu: lp.w_up.slice_cols(c0, c0 + per).to_dtype(cfg.dtype),
        wd: lp.w_down.slice_rows(c0, c0 + per).to_dtype(cfg.dtype),
    }
}

fn ffn_fwd(
    ctx: &mut RankCtx,
    cfg: &ModelConfig,
    lp: &LayerParams,
    g: &Tensor,
    t: usize,
) -> Result<(Tensor, FfnRank)> {
    let w = ffn_weights(cfg, lp, t);
    let gate = ctx.linear("ffn.w_gate", g, &w.wg)?;
    let up = ctx.linear("ffn.w_up", g, &w.wu)?;
    let sw = swish(&gate)?;
    let z = mul(&sw, &up)?;
    let y = ctx.linear("ffn.w_down", &z, &w.wd)?;
    Ok((y, FfnRank { gate, sw, up, z }))
}

struct FfnGrads {
    dg: Tensor,
    dwg: Tensor,
    dwu: Tensor,
    dwd: Tensor,
}

fn ffn_bwd(
    ctx: &mut RankCtx,
    cfg: &ModelConfig,
    lp: &LayerParams,
    g: &Tensor,
    c: &FfnRank,
    dy: &Tensor,
    t: usize,
) -> Result<FfnGrads> {
    let w = ffn_weights(cfg, lp, t);
    let dwd = ctx.linear("ffn.w_down.dw", &c.z.transpose(), dy)?;
    let dz = ctx.linear("ffn.w_down.dx", dy, &w.wd.transpose())?;
    let dgate = mul(&mul(&dz, &c.up)?, &swish_grad(&c.gate)?)?;
    let dup = mul(&dz, &c.sw)?;
    let gt = g.transpose();
    let dwg = ctx.linear("ffn.w_gate.dw", &gt, &dgate)?;
    let dwu = ctx.linear("ffn.w_up.dw", &gt, &dup)?;
    let dg = ctx.linear("ffn.w_gate.dx", &dgate, &w.wg.transpose())?;
    let dg = add(&dg, &ctx.linear("ffn.w_up.dx", &dup, &w.wu.transpose())?)?;
    Ok(FfnGrads { dg, dwg, dwu, dwd })
}

fn split_rows(full: &Tensor, ranks: usize) -> Vec<Tensor> {
    let s = full.rows() / ranks;
    (0..ranks)
        .map(|r| full.slice_rows(r * s, (r + 1) * s))
        .collect()
}

/// Runs one microstep forward and returns the cache (with the loss).
pub fn forward(
    cfg: &ModelConfig,
    params: &Params,
    batch: &TokenBatch,
    exec: &mut Exec,
    hooks: &mut dyn Hooks,
) -> Result<Cache> {
    let (step, micro) = (exec.step, exec.microstep);
    forward_inner(cfg, params, batch, exec, hooks)
        .locate(|| format!("forward step {step} microstep {micro}"))
}

fn forward_inner(
    cfg: &ModelConfig,
    params: &Params,
    batch: &TokenBatch,
    exec: &mut Exec,
    hooks: &mut dyn Hooks,
) -> Result<Cache> {
    let (tp, dt, h) = (cfg.tp_degree, cfg.dtype, cfg.hidden);
    let inputs = batch.inputs();
    let labels = batch.labels();
    if inputs.len() != cfg.rows() {
        return Err(Error::contract(
            "token batch does not match micro_batch x seq_len",
        ));
    }
    if let Some(&bad) = inputs
        .iter()
        .chain(&labels)
        .find(|&&t| t as usize >= cfg.vocab)
    {
        return Err(Error::contract(format!(
            "token id {bad} >= vocab {}",
            cfg.vocab
        )));
    }
    let mut x0 = Vec::with_capacity(cfg.rows() * h);
    for &tok in &inputs {
        x0.extend_from_slice(params.embed.row(tok as usize));
    }
    let x0 = Tensor::new(vec![cfg.rows(), h], x0, DType::F32)?.to_dtype(dt);
    let mut shards = split_rows(&x0, tp);
    let mut layers = Vec::with_capacity(cfg.layers);

    for (l, lp) in params.layers.iter().enumerate() {
        let res: Result<()> = (|| {
            let gathered = all_gather(&shards)?;
            let outs = exec.run_ranks(l, tp, |ctx, t| attn_fwd(ctx, cfg, lp, &gathered[t], t))?;
            let (mut ys, attn): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
            exec.inject_site(SiteKind::FwdAttn, l, &mut ys);
            hooks.on_site(SiteKind::FwdAttn, l, &mut ys)?;
            let a = reduce_scatter(&ys)?;

            let (g1, b1) = (lp.ln1_gain.to_dtype(dt), lp.ln1_bias.to_dtype(dt));
            let mut hs = Vec::with_capacity(tp);
            let mut ln1 = Vec::with_capacity(tp);
            for r in 0..tp {
                let (y, c) = layer_norm(&add(&shards[r], &a[r])?, &g1, &b1)?;
                hs.push(y);
                ln1.push(c);
            }

            let gathered2 = all_gather(&hs)?;
            let outs = exec.run_ranks(l, tp, |ctx, t| ffn_fwd(ctx, cfg, lp, &gathered2[t], t))?;
            let (mut ys, ffn): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
            exec.inject_site(SiteKind::FwdFfn, l, &mut ys);
            hooks.on_site(SiteKind::FwdFfn, l, &mut ys)?;
            let f = reduce_scatter(&ys)?;

            let (g2, b2) = (lp.ln2_gain.to_dtype(dt), lp.ln2_bias.to_dtype(dt));
            let mut ln2 = Vec::with_capacity(tp);
            for r in 0..tp {
                let (y, c) = layer_norm(&add(&hs[r], &f[r])?, &g2, &b2)?;
                shards[r] = y;
                ln2.push(c);
            }
            let mut gathered = gathered;
            let mut gathered2 = gathered2;
            layers.push(LayerCache {
                x_full: gathered.swap_remove(0),
                attn,
                ln1,
                h_full: gathered2.swap_remove(0),
                ffn,
                ln2,
            });
            Ok(())
        })();
        res.locate(|| format!("layer {l}"))?;
    }

    let final_hidden = all_gather(&shards)?.swap_remove(0);
    let head = params.head.to_dtype(dt);
    let mut logits = exec.run_ranks(cfg.layers, 1, |ctx, _| {
        ctx.linear("head", &final_hidden, &head)
    })?;
    let (loss, dlogits) =
        cross_entropy(&logits.swap_remove(0), &labels).locate(|| "loss".into())?;
    Ok(Cache {
        inputs,
        layers,
        final_hidden,
        dlogits,
        loss,
    })
}

/// Backpropagates the cached microstep; returns parameter gradients (f32).
pub fn backward(
    cfg: &ModelConfig,
    params: &Params,
    cache: &Cache,
    exec: &mut Exec,
    hooks: &mut dyn Hooks,
) -> Result<Params> {
    let (step, micro) = (exec.step, exec.microstep);
    backward_inner(cfg, params, cache, exec, hooks)
        .locate(|| format!("backward step {step} microstep {micro}"))
}

fn backward_inner(
    cfg: &ModelConfig,
    params: &Params,
    cache: &Cache,
    exec: &mut Exec,
    hooks: &mut dyn Hooks,
) -> Result<Params> {
    let (tp, dt, hd) = (cfg.tp_degree, cfg.dtype, cfg.head_dim());
    let mut grads = params.zeros_like();

    let head = params.head.to_dtype(dt);
    let fh = &cache.final_hidden;
    let dl = &cache.dlogits;
    let mut outs = exec.run_ranks(cfg.layers, 1, |ctx, _| {
        let dw = ctx.linear("head.dw", &fh.transpose(), dl)?;
        let dx = ctx.linear("head.dx", dl, &head.transpose())?;
        Ok((dw, dx))
    })?;
    let (dhead, dfinal) = outs.swap_remove(0);
    accumulate(&mut grads.head, &dhead)?;
    let mut d_shards = split_rows(&dfinal, tp);

    for l in (0..cfg.layers).rev() {
        let lp = &params.layers[l];
        let lc = &cache.layers[l];
        let gl = &mut grads.layers[l];
        let res: Result<()> = (|| {
            let g2 = lp.ln2_gain.to_dtype(dt);
            let mut ds2 = Vec::with_capacity(tp);
            for (d, ln) in d_shards.iter().zip(&lc.ln2) {
                let (dx, dg, db) = layer_norm_backward(d, ln, &g2)?;
                accumulate(&mut gl.ln2_gain, &dg)?;
                accumulate(&mut gl.ln2_bias, &db)?;
                ds2.push(dx);
            }

            let dy2 = all_gather(&ds2)?;
            let outs = exec.run_ranks(l, tp, |ctx, t| {
                ffn_bwd(ctx, cfg, lp, &lc.h_full, &lc.ffn[t], &dy2[t], t)
            })?;
            let per = cfg.ffn_hidden() / tp;
            let mut dgs = Vec::with_capacity(tp);
            for (t, g) in outs.into_iter().enumerate() {
                gl.w_gate.add_block(0, t * per, &g.dwg);
                gl.w_up.add_block(0, t * per, &g.dwu);
                gl.w_down.add_block(t * per, 0, &g.dwd);
                dgs.push(g.dg);
            }
            exec.inject_site(SiteKind::BwdFfn, l, &mut dgs);
            hooks.on_site(SiteKind::BwdFfn, l, &mut dgs)?;
            let rs = reduce_scatter(&dgs)?;

            let g1 = lp.ln1_gain.to_dtype(dt);
            let mut ds1 = Vec::with_capacity(tp);
            for r in 0..tp {
                let dh = add(&ds2[r], &rs[r])?;
                let (dx, dg, db) = layer_norm_backward(&dh, &lc.ln1[r], &g1)?;
                accumulate(&mut gl.ln1_gain, &dg)?;
                accumulate(&mut gl.ln1_bias, &db)?;
                ds1.push(dx);
            }

            let dya = all_gather(&ds1)?;
            let outs = exec.run_ranks(l, tp, |ctx, t| {
                attn_bwd(ctx, cfg, lp, &lc.x_full, &lc.attn[t], &dya[t], t)
            })?;
            let hpr = cfg.heads_per_rank();
            let mut dxs = Vec::with_capacity(tp);
            for (t, g) in outs.into_iter().enumerate() {
                let (kv_lo, _) = kv_range(cfg, t);
                gl.wq.add_block(0, t * hpr * hd, &g.dwq);
                gl.wk.add_block(0, kv_lo * hd, &g.dwk);
                gl.wv.add_block(0, kv_lo * hd, &g.dwv);
                gl.wo.add_block(t * hpr * hd, 0, &g.dwo);
                dxs.push(g.dx);
            }
            exec.inject_site(SiteKind::BwdAttn, l, &mut dxs);
            hooks.on_site(SiteKind::BwdAttn, l, &mut dxs)?;
            let rs = reduce_scatter(&dxs)?;
            for r in 0..tp {
                d_shards[r] = add(&ds1[r], &rs[r])?;
            }
            Ok(())
        })();
        res.locate(|| format!("layer {l}"))?;
    }

    let dfull = Tensor::concat_rows(&d_shards)?;
    let h = cfg.hidden;
    let ed = grads.embed.data_mut();
    for (i, &tok) in cache.inputs.iter().enumerate() {
        let dst = &mut ed[tok as usize * h..(tok as usize + 1) * h];
        for (d, s) in dst.iter_mut().zip(dfull.row(i)) {
            *d += *s;
        }
    }
    if grads
        .tensors()
        .iter()
        .any(|t| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numerical("parameter gradients"));
    }
    Ok(grads)
}
