//! Exact gradients of the masked mean cross-entropy w.r.t. every weight.

use super::ops::{
    attention_backward, embed_backward, gelu_backward, layer_norm_backward, linear_backward, rms_norm_backward,
};
use super::GradientSet;
use crate::baseline::{BaselineTrace, KvProjection};
use crate::config::{GatingMode, LatentAttnConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::kernel::{embed_lookup, Tensor};
use crate::latent::{KvDown, LatentAttnWeights, LatentTrace, QueryProj};
use crate::model::{forward_with_cache, AttnTrace, AttnWeights, ModelCache, ModelWeights, SharedKv};
use crate::rope::{apply_rope_inverse, RopeFreqs};

/// Per-position targets; `None` positions do not contribute to the loss.
pub type Targets<'a> = &'a [Option<usize>];

/// Mean negative log-likelihood over the positions that carry a target.
pub fn masked_loss(w: &ModelWeights, tokens: &[usize], targets: Targets) -> Result<f64> {
    let logits = crate::model::forward_full(w, tokens)?;
    let (loss, _) = loss_and_dlogits(&logits, targets)?;
    Ok(loss)
}

fn loss_and_dlogits(logits: &Tensor, targets: Targets) -> Result<(f64, Tensor)> {
    if logits.outer() != targets.len() {
        return Err(Error::shape("loss", logits.shape(), &[targets.len()]));
    }
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Err(Error::Invalid("no position carries a target".into()));
    }
    let v = logits.last_dim();
    let mut loss = 0.0;
    let mut d = Tensor::zeros(logits.shape());
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        if y >= v {
            return Err(Error::TokenOutOfRange { id: y, vocab: v });
        }
        let row = logits.row(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        loss += m + z.ln() - row[y];
        for (k, dv) in d.row_mut(t).iter_mut().enumerate() {
            *dv = (row[k] - m).exp() / z / n as f64;
        }
        d.row_mut(t)[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, d))
}

/// `(loss, gradients)` with every position supervised.
pub fn backward(w: &ModelWeights, tokens: &[usize], targets: &[usize]) -> Result<(f64, GradientSet)> {
    let t: Vec<Option<usize>> = targets.iter().map(|&y| Some(y)).collect();
    backward_masked(w, tokens, &t)
}

/// Gradients flowing back into a group's shared cached activation.
enum GroupAcc {
    Latent { d_latents: Tensor, d_k_rope: Tensor },
    Dense { d_keys: Tensor, d_values: Tensor },
}

pub fn backward_masked(w: &ModelWeights, tokens: &[usize], targets: Targets) -> Result<(f64, GradientSet)> {
    let cfg = &w.config;
    let mut cache = ModelCache::new(cfg);
    let (logits, trace) = forward_with_cache(w, tokens, &mut cache, true)?;
    let trace = trace.expect("trace requested");
    let (loss, dlogits) = loss_and_dlogits(&logits, targets)?;
    let mut gs = GradientSet::zeros_like(w);
    let eps = cfg.norm_eps;
    let t_len = tokens.len();
    let positions: Vec<usize> = (0..t_len).collect();

    let (dh_final, d_unembed) = linear_backward(&trace.h_final, &w.unembed, &dlogits)?;
    gs.accumulate("unembed", &d_unembed)?;
    let (mut dx, d_final_norm) = rms_norm_backward(&trace.x_final, &w.final_norm, &dh_final, eps)?;
    gs.accumulate("final_norm", &d_final_norm)?;

    let mut acc: Option<GroupAcc> = None;
    for (i, (block, bt)) in w.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        let g = w.group_of(i);
        let leader = i % cfg.lgz == 0;
        let name = |p: &str| format!("layer.{i}.{p}");

        // MLP branch.
        let (dact, dw_proj) = linear_backward(&bt.act, &block.w_proj, &dx)?;
        gs.accumulate(&name("w_proj"), &dw_proj)?;
        let dh = gelu_backward(&bt.h, &dact)?;
        let (dm, dw_fc) = linear_backward(&bt.m, &block.w_fc, &dh)?;
        gs.accumulate(&name("w_fc"), &dw_fc)?;
        let (dx_mlp, d_mlp_norm) = rms_norm_backward(&bt.x_mid, &block.mlp_norm, &dm, eps)?;
        gs.accumulate(&name("mlp_norm"), &d_mlp_norm)?;
        let dx_mid = dx.add(&dx_mlp)?;

        // Attention branch.
        let da = match (&block.attn, &bt.attn, &w.groups[g]) {
            (AttnWeights::Latent(lw), AttnTrace::Latent(tr), SharedKv::Latent(down)) => {
                let lc = cfg.latent();
                let acc_ref = acc.get_or_insert_with(|| GroupAcc::Latent {
                    d_latents: Tensor::zeros(&[t_len, lc.kv_lora_rank]),
                    d_k_rope: Tensor::zeros(&[t_len, lc.d_rope]),
                });
                let GroupAcc::Latent { d_latents, d_k_rope } = acc_ref else { unreachable!() };
                let mut da = latent_backward(&lc, lw, tr, &bt.a, &dx_mid, &positions, w.freqs(), eps, i, d_latents, d_k_rope, &mut gs)?;
                if leader {
                    let d_in = kv_down_backward(&lc, down, tr, &bt.a, d_latents, d_k_rope, &positions, w.freqs(), eps, g, &mut gs)?;
                    da.add_assign(&d_in)?;
                }
                da
            }
            (AttnWeights::Dense(bw), AttnTrace::Dense(tr), SharedKv::Dense(kv)) => {
                let acc_ref = acc.get_or_insert_with(|| GroupAcc::Dense {
                    d_keys: Tensor::zeros(tr.keys.shape()),
                    d_values: Tensor::zeros(tr.values.shape()),
                });
                let GroupAcc::Dense { d_keys, d_values } = acc_ref else { unreachable!() };
                let (dq_raw, dwo) = baseline_core_backward(cfg, tr, &bw.wo, &dx_mid, &positions, w.freqs(), d_keys, d_values)?;
                gs.accumulate(&name("wo"), &dwo)?;
                let (mut da, dwq) = linear_backward(&bt.a, &bw.wq, &dq_raw)?;
                gs.accumulate(&name("wq"), &dwq)?;
                if leader {
                    let d_in = kv_proj_backward(cfg, kv, &bt.a, d_keys, d_values, &positions, w.freqs(), g, &mut gs)?;
                    da.add_assign(&d_in)?;
                }
                da
            }
            _ => return Err(Error::config("trace does not match the model layout")),
        };
        if leader {
            acc = None;
        }
        let (dx_attn, d_attn_norm) = rms_norm_backward(&bt.x, &block.attn_norm, &da, eps)?;
        gs.accumulate(&name("attn_norm"), &d_attn_norm)?;
        dx = dx_mid.add(&dx_attn)?;
    }
    let d_emb = embed_backward(tokens, &dx, cfg.vocab_size)?;
    gs.accumulate("tok_emb", &d_emb)?;
    Ok((loss, gs))
}

/// Rotary-aware split of a per-head packed row into `[T × n × d]`.
fn unrotate(x: &Tensor, heads: usize, d: usize, positions: &[usize], freqs: &RopeFreqs) -> Result<Tensor> {
    let t = x.outer();
    apply_rope_inverse(&x.clone().reshape(&[t, heads, d])?, positions, freqs)?.reshape(&[t, heads * d])
}

#[allow(clippy::too_many_arguments)]
fn latent_backward(
    cfg: &LatentAttnConfig,
    lw: &LatentAttnWeights,
    tr: &LatentTrace<f64>,
    a: &Tensor,
    d_out: &Tensor,
    positions: &[usize],
    freqs: &RopeFreqs,
    eps: f64,
    layer: usize,
    d_latents: &mut Tensor,
    d_k_rope: &mut Tensor,
    gs: &mut GradientSet,
) -> Result<Tensor> {
    let name = |p: &str| format!("layer.{layer}.{p}");
    let (nh, dn, dr, dv) = (cfg.n_head, cfg.d_nope, cfg.d_rope, cfg.d_v);
    let hw = dn + dv;
    let t_new = a.outer();
    let s_total = tr.kv.outer();
    let scale = 1.0 / ((dn + dr) as f64).sqrt();

    let (du, dw_o) = linear_backward(&tr.u, &lw.w_o, d_out)?;
    gs.accumulate(&name("w_o"), &dw_o)?;

    let mut dkv = Tensor::zeros(tr.kv.shape());
    let dscores = attention_backward(
        &tr.probs,
        &du,
        dv,
        scale,
        |h, s| &tr.kv.row(s)[h * hw + dn..(h + 1) * hw],
        |h, s, p, du_row| {
            for (o, g) in dkv.row_mut(s)[h * hw + dn..(h + 1) * hw].iter_mut().zip(du_row) {
                *o += p * g;
            }
        },
    );
    let mut dq_nope = Tensor::zeros(tr.query.q_nope.shape());
    let mut dq_rope = Tensor::zeros(tr.query.q_rope.shape());
    for h in 0..nh {
        for t in 0..t_new {
            let off = (h * t_new + t) * s_total;
            for s in 0..=tr.probs.start + t {
                let ds = dscores[off + s];
                if ds == 0.0 {
                    continue;
                }
                let qn = &tr.query.q_nope.row(t)[h * dn..(h + 1) * dn];
                let qr = &tr.query.q_rope.row(t)[h * dr..(h + 1) * dr];
                let kn = &tr.kv.row(s)[h * hw..h * hw + dn];
                let kr = tr.k_rope.row(s);
                for (o, k) in dq_nope.row_mut(t)[h * dn..(h + 1) * dn].iter_mut().zip(kn) {
                    *o += ds * k;
                }
                for (o, k) in dq_rope.row_mut(t)[h * dr..(h + 1) * dr].iter_mut().zip(kr) {
                    *o += ds * k;
                }
                for (o, q) in dkv.row_mut(s)[h * hw..h * hw + dn].iter_mut().zip(qn) {
                    *o += ds * q;
                }
                for (o, q) in d_k_rope.row_mut(s).iter_mut().zip(qr) {
                    *o += ds * q;
                }
            }
        }
    }

    // Gate and its LayerNorm.
    let dkv_c = match (&lw.gate, &tr.gate, &tr.gate_pre) {
        (Some(gw), Some(g), Some(pre)) => {
            let dpre = match &gw.ln {
                Some(ln) if cfg.gating_mode.uses_ln() => {
                    let (dpre, dgamma, dbeta) = layer_norm_backward(pre, &ln.gamma, &dkv, eps)?;
                    gs.accumulate(&name("ln_gamma"), &dgamma)?;
                    gs.accumulate(&name("ln_beta"), &dbeta)?;
                    dpre
                }
                _ => dkv,
            };
            let (dkv_c, dg) = match cfg.gating_mode {
                GatingMode::MulLn | GatingMode::MulNoLn => (dpre.hadamard(g)?, dpre.hadamard(&tr.kv_c)?),
                GatingMode::AddLn => (dpre.clone(), dpre),
            };
            let e = embed_lookup(&gw.emb, &tr.ids)?;
            let (de, dw_ue) = linear_backward(&e, &gw.w_ue, &dg)?;
            gs.accumulate(&name("w_ue"), &dw_ue)?;
            gs.accumulate(&name("emb"), &embed_backward(&tr.ids, &de, cfg.vocab_size)?)?;
            dkv_c
        }
        (None, None, None) => dkv,
        _ => return Err(Error::Invalid("gate trace and weights disagree".into())),
    };
    let (dlat, dw_ukv) = linear_backward(&tr.latents, &lw.w_ukv, &dkv_c)?;
    gs.accumulate(&name("w_ukv"), &dw_ukv)?;
    d_latents.add_assign(&dlat)?;

    // Query path.
    let dq_rope = unrotate(&dq_rope, nh, dr, positions, freqs)?;
    let mut dq = Vec::with_capacity(t_new * cfg.q_width());
    for t in 0..t_new {
        for h in 0..nh {
            dq.extend_from_slice(&dq_nope.row(t)[h * dn..(h + 1) * dn]);
            dq.extend_from_slice(&dq_rope.row(t)[h * dr..(h + 1) * dr]);
        }
    }
    let dq = Tensor::new(&[t_new, cfg.q_width()], dq)?;
    match &lw.query {
        QueryProj::Direct { w_q } => {
            let (da, dw) = linear_backward(a, w_q, &dq)?;
            gs.accumulate(&name("w_q"), &dw)?;
            Ok(da)
        }
        QueryProj::LowRank { w_dq, q_norm_gamma, w_uq } => {
            let (cq_raw, cq) = match (&tr.query.cq_raw, &tr.query.cq) {
                (Some(r), Some(c)) => (r, c),
                _ => return Err(Error::Invalid("low-rank query without trace".into())),
            };
            let (dcq, dw_uq) = linear_backward(cq, w_uq, &dq)?;
            gs.accumulate(&name("w_uq"), &dw_uq)?;
            let (dcq_raw, dgamma) = rms_norm_backward(cq_raw, q_norm_gamma, &dcq, eps)?;
            gs.accumulate(&name("q_norm"), &dgamma)?;
            let (da, dw_dq) = linear_backward(a, w_dq, &dcq_raw)?;
            gs.accumulate(&name("w_dq"), &dw_dq)?;
            Ok(da)
        }
    }
}

/// Backpropagates the group's accumulated latent and rope-key gradients
/// through the shared down-projection of the leader layer.
#[allow(clippy::too_many_arguments)]
fn kv_down_backward(
    cfg: &LatentAttnConfig,
    down: &KvDown,
    tr: &LatentTrace<f64>,
    a: &Tensor,
    d_latents: &Tensor,
    d_k_rope: &Tensor,
    positions: &[usize],
    freqs: &RopeFreqs,
    eps: f64,
    group: usize,
    gs: &mut GradientSet,
) -> Result<Tensor> {
    let latent_raw = tr
        .latent_raw
        .as_ref()
        .ok_or_else(|| Error::Invalid("leader trace lacks the raw latent".into()))?;
    let (dlat_raw, dgamma) = rms_norm_backward(latent_raw, &down.kv_norm_gamma, d_latents, eps)?;
    gs.accumulate(&format!("group.{group}.kv_norm"), &dgamma)?;
    let dk_raw = unrotate(d_k_rope, 1, cfg.d_rope, positions, freqs)?;
    let dfused = Tensor::concat_cols(&[&dlat_raw, &dk_raw])?;
    let (da, dw) = linear_backward(a, &down.w_dkv, &dfused)?;
    gs.accumulate(&format!("group.{group}.w_dkv"), &dw)?;
    Ok(da)
}

/// Returns `(d q before RoPE, d wo)` and accumulates key/value gradients.
#[allow(clippy::too_many_arguments)]
fn baseline_core_backward(
    cfg: &ModelConfig,
    tr: &BaselineTrace<f64>,
    wo: &Tensor,
    d_out: &Tensor,
    positions: &[usize],
    freqs: &RopeFreqs,
    d_keys: &mut Tensor,
    d_values: &mut Tensor,
) -> Result<(Tensor, Tensor)> {
    let (nh, dh) = (cfg.n_head, cfg.head_dim);
    let group = nh / cfg.n_kv_heads();
    let t_new = tr.q.outer();
    let s_total = tr.keys.outer();
    let scale = 1.0 / (dh as f64).sqrt();
    let (du, dwo) = linear_backward(&tr.u, wo, d_out)?;
    let dscores = attention_backward(
        &tr.probs,
        &du,
        dh,
        scale,
        |h, s| &tr.values.row(s)[(h / group) * dh..(h / group + 1) * dh],
        |h, s, p, du_row| {
            let g = h / group;
            for (o, d) in d_values.row_mut(s)[g * dh..(g + 1) * dh].iter_mut().zip(du_row) {
                *o += p * d;
            }
        },
    );
    let mut dq = Tensor::zeros(tr.q.shape());
    for h in 0..nh {
        let g = h / group;
        for t in 0..t_new {
            let off = (h * t_new + t) * s_total;
            for s in 0..=tr.probs.start + t {
                let ds = dscores[off + s];
                let k = &tr.keys.row(s)[g * dh..(g + 1) * dh];
                let q = &tr.q.row(t)[h * dh..(h + 1) * dh];
                for (o, kv) in dq.row_mut(t)[h * dh..(h + 1) * dh].iter_mut().zip(k) {
                    *o += ds * kv;
                }
                for (o, qv) in d_keys.row_mut(s)[g * dh..(g + 1) * dh].iter_mut().zip(q) {
                    *o += ds * qv;
                }
            }
        }
    }
    Ok((unrotate(&dq, nh, dh, positions, freqs)?, dwo))
}

#[allow(clippy::too_many_arguments)]
fn kv_proj_backward(
    cfg: &ModelConfig,
    kv: &KvProjection,
    a: &Tensor,
    d_keys: &Tensor,
    d_values: &Tensor,
    positions: &[usize],
    freqs: &RopeFreqs,
    group: usize,
    gs: &mut GradientSet,
) -> Result<Tensor> {
    let dk_raw = unrotate(d_keys, cfg.n_kv_heads(), cfg.head_dim, positions, freqs)?;
    let (mut da, dwk) = linear_backward(a, &kv.wk, &dk_raw)?;
    let (da_v, dwv) = linear_backward(a, &kv.wv, d_values)?;
    da.add_assign(&da_v)?;
    gs.accumulate(&format!("group.{group}.wk"), &dwk)?;
    gs.accumulate(&format!("group.{group}.wv"), &dwv)?;
    Ok(da)
}
