//! Multi-head latent attention with optional embedding gating.
//!
//! Per token `t` with id `i_t` and normalised input `x_t`:
//!
//! ```text
//! [c_t ; k_t^R]  = x_t · W_dkv                 (fused down-projection)
//! c_t            = RMSNorm(c_t)                (cached)
//! k_t^R          = RoPE(k_t^R)                 (cached, shared by all heads)
//! kv_t           = c_t · W_ukv
//! g_t            = Emb(i_t) · W_ue             (or a row of the gate table)
//! kv~_t          = LN(kv_t ⊙ g_t) | kv_t ⊙ g_t | LN(kv_t + g_t)
//! k_t,i ; v_t,i  = split of kv~_t per head
//! ```
//!
//! Queries are `[q^C ; RoPE(q^R)]` per head, scores are scaled by
//! `1/sqrt(d_nope + d_rope)` and the concatenated head outputs go through
//! `W_o`. Plain MLA skips the gate and its LayerNorm entirely.

use crate::attn::{causal_attend, dot_concat, AttnProbs};
use crate::baseline::check_positions;
use crate::config::{GatingMode, LatentAttnConfig};
use crate::error::{Error, Result};
use crate::kernel::counter::{tagged, MatmulTag};
use crate::kernel::{embed_lookup, layer_norm, matmul, rms_norm, Real, Tensor};
use crate::kvcache::LatentKVCache;
use crate::rope::{apply_rope, RopeFreqs};

/// Fused KV down-projection and the latent RMSNorm; shared by a layer group.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDown<T: Real = f64> {
    /// `d_model × (kv_lora_rank + d_rope)`
    pub w_dkv: Tensor<T>,
    /// `kv_lora_rank`
    pub kv_norm_gamma: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryProj<T: Real = f64> {
    /// `w_q: d_model × n_h·(d_nope + d_rope)`
    Direct { w_q: Tensor<T> },
    /// `x · w_dq → RMSNorm → · w_uq`
    LowRank {
        w_dq: Tensor<T>,
        q_norm_gamma: Tensor<T>,
        w_uq: Tensor<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams<T: Real = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Per-layer gate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights<T: Real = f64> {
    /// `V × kv_emb_dim`
    pub emb: Tensor<T>,
    /// `kv_emb_dim × n_h·(d_nope + d_v)`
    pub w_ue: Tensor<T>,
    /// Present unless the gating mode drops the LayerNorm.
    pub ln: Option<LnParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentAttnWeights<T: Real = f64> {
    pub query: QueryProj<T>,
    /// `kv_lora_rank × n_h·(d_nope + d_v)`
    pub w_ukv: Tensor<T>,
    pub gate: Option<GateWeights<T>>,
    /// `n_h·d_v × d_model`
    pub w_o: Tensor<T>,
}

/// Gate vectors precomputed for every vocabulary id; row `v` is
/// `Emb(v) · W_ue` computed with the same kernel as the live path.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTable<T: Real = f64> {
    table: Tensor<T>,
}

impl<T: Real> GateTable<T> {
    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn elements(&self) -> usize {
        self.table.len()
    }
}

/// Where gate vectors come from.
#[derive(Debug, Clone, Copy)]
pub enum GateSource<'a, T: Real> {
    Weights(&'a GateWeights<T>),
    Table(&'a GateTable<T>),
}

/// Down-projects, splits at `kv_lora_rank` and normalises the latent.
/// Returns `(latent, k_rope_raw, latent_raw)`.
pub(crate) fn kv_compress_raw<T: Real>(
    cfg: &LatentAttnConfig,
    x: &Tensor<T>,
    down: &KvDown<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.last_dim() != cfg.d_model {
        return Err(Error::shape("kv_compress", x.shape(), &[cfg.d_model]));
    }
    let kv = matmul(x, &down.w_dkv)?;
    let r = cfg.kv_lora_rank;
    let latent_raw = kv.slice_cols(0, r)?;
    let k_rope_raw = kv.slice_cols(r, r + cfg.d_rope)?;
    let latent = rms_norm(&latent_raw, &down.kv_norm_gamma, eps)?;
    Ok((latent, k_rope_raw, latent_raw))
}

/// `(latent, k_rope_raw)`: the normalised latent in its cached form and the
/// positional key before rotation.
pub fn kv_compress<T: Real>(
    cfg: &LatentAttnConfig,
    x: &Tensor<T>,
    down: &KvDown<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    kv_compress_raw(cfg, x, down, eps).map(|(l, k, _)| (l, k))
}

pub fn kv_up<T: Real>(latent: &Tensor<T>, w_ukv: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(latent, w_ukv)
}

pub fn compute_gate<T: Real>(ids: &[usize], source: GateSource<'_, T>) -> Result<Tensor<T>> {
    match source {
        GateSource::Weights(g) => {
            let e = embed_lookup(&g.emb, ids)?;
            tagged(MatmulTag::Gate, || matmul(&e, &g.w_ue))
        }
        GateSource::Table(t) => embed_lookup(&t.table, ids),
    }
}

/// Combines `kv_c` with the gate `g`. Returns `(kv_tilde, pre_norm)` where
/// `pre_norm` is the product or sum fed to the LayerNorm.
pub(crate) fn apply_gate_raw<T: Real>(
    kv_c: &Tensor<T>,
    g: &Tensor<T>,
    mode: GatingMode,
    ln: Option<&LnParams<T>>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let pre = match mode {
        GatingMode::MulLn | GatingMode::MulNoLn => kv_c.hadamard(g)?,
        GatingMode::AddLn => kv_c.add(g)?,
    };
    if !mode.uses_ln() {
        return Ok((pre.clone(), pre));
    }
    let ln = ln.ok_or_else(|| Error::Invalid(format!("gating mode {mode} needs LayerNorm parameters")))?;
    Ok((layer_norm(&pre, &ln.gamma, &ln.beta, eps)?, pre))
}

pub fn apply_gate<T: Real>(
    kv_c: &Tensor<T>,
    g: &Tensor<T>,
    mode: GatingMode,
    ln: Option<&LnParams<T>>,
    eps: f64,
) -> Result<Tensor<T>> {
    apply_gate_raw(kv_c, g, mode, ln, eps).map(|(kv, _)| kv)
}

/// Largest `d1 · d2` accepted by [`expand_second_order`].
pub const SECOND_ORDER_LIMIT: usize = 4096;

/// Evaluates the gate product two ways: fused `(w1·x1) ⊙ (w2·x2)` and the
/// explicit sum of all `d1 · d2` pairwise terms
/// `Σ_i Σ_j w1[c,i] w2[c,j] x1[i] x2[j]` per output channel `c`.
///
/// `w1` is `d × d1`, `w2` is `d × d2`. Returns `(fused, expanded)`.
pub fn expand_second_order(
    w1: &Tensor<f64>,
    w2: &Tensor<f64>,
    x1: &Tensor<f64>,
    x2: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (d, d1, d2) = (w1.outer(), w1.last_dim(), w2.last_dim());
    if w2.outer() != d || x1.len() != d1 || x2.len() != d2 {
        return Err(Error::shape("expand_second_order", w1.shape(), w2.shape()));
    }
    if d1 * d2 > SECOND_ORDER_LIMIT {
        return Err(Error::Invalid(format!(
            "second-order expansion of {d1}x{d2} terms exceeds {SECOND_ORDER_LIMIT}"
        )));
    }
    let p1 = matmul(w1, &x1.clone().reshape(&[d1, 1])?)?;
    let p2 = matmul(w2, &x2.clone().reshape(&[d2, 1])?)?;
    let fused = p1.hadamard(&p2)?.reshape(&[d])?;
    let mut expanded = vec![0.0; d];
    for (c, out) in expanded.iter_mut().enumerate() {
        let (r1, r2) = (w1.row(c), w2.row(c));
        for i in 0..d1 {
            for j in 0..d2 {
                *out += r1[i] * r2[j] * x1.data()[i] * x2.data()[j];
            }
        }
    }
    Ok((fused, Tensor::new(&[d], expanded)?))
}

#[derive(Debug, Clone)]
pub struct QueryTrace<T: Real> {
    /// Low-rank path only: `x · w_dq` and its RMSNorm.
    pub cq_raw: Option<Tensor<T>>,
    pub cq: Option<Tensor<T>>,
    /// `T × n_h·d_nope`
    pub q_nope: Tensor<T>,
    /// `T × n_h·d_rope`, rotated.
    pub q_rope: Tensor<T>,
}

pub(crate) fn query_path_traced<T: Real>(
    cfg: &LatentAttnConfig,
    x: &Tensor<T>,
    query: &QueryProj<T>,
    positions: &[usize],
    freqs: &RopeFreqs,
    eps: f64,
) -> Result<QueryTrace<T>> {
    let (q, cq_raw, cq) = match query {
        QueryProj::Direct { w_q } => (matmul(x, w_q)?, None, None),
        QueryProj::LowRank { w_dq, q_norm_gamma, w_uq } => {
            let raw = matmul(x, w_dq)?;
            let normed = rms_norm(&raw, q_norm_gamma, eps)?;
            (matmul(&normed, w_uq)?, Some(raw), Some(normed))
        }
    };
    let t = x.outer();
    let (nh, dn, dr) = (cfg.n_head, cfg.d_nope, cfg.d_rope);
    if q.last_dim() != cfg.q_width() {
        return Err(Error::shape("query_path", q.shape(), &[cfg.q_width()]));
    }
    let mut nope = Vec::with_capacity(t * nh * dn);
    let mut rope = Vec::with_capacity(t * nh * dr);
    for row in q.rows() {
        for h in 0..nh {
            let head = &row[h * (dn + dr)..(h + 1) * (dn + dr)];
            nope.extend_from_slice(&head[..dn]);
            rope.extend_from_slice(&head[dn..]);
        }
    }
    let q_rope = apply_rope(&Tensor::new(&[t, nh, dr], rope)?, positions, freqs)?;
    Ok(QueryTrace {
        cq_raw,
        cq,
        q_nope: Tensor::new(&[t, nh * dn], nope)?,
        q_rope: q_rope.reshape(&[t, nh * dr])?,
    })
}

/// `(q_nope: T × n_h × d_nope, q_rope: T × n_h × d_rope)`, RoPE applied to
/// the positional part only.
pub fn query_path<T: Real>(
    cfg: &LatentAttnConfig,
    x: &Tensor<T>,
    query: &QueryProj<T>,
    positions: &[usize],
    freqs: &RopeFreqs,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tr = query_path_traced(cfg, x, query, positions, freqs, eps)?;
    let t = x.outer();
    Ok((
        tr.q_nope.reshape(&[t, cfg.n_head, cfg.d_nope])?,
        tr.q_rope.reshape(&[t, cfg.n_head, cfg.d_rope])?,
    ))
}

/// Intermediates of one latent attention call, kept for backpropagation.
/// Rows of `latents`, `k_rope`, `kv_c`, `gate`, `gate_pre` and `kv` cover
/// every cached position the new queries attended to.
#[derive(Debug, Clone)]
pub struct LatentTrace<T: Real> {
    /// Leader layers only: pre-norm latent of the new rows.
    pub latent_raw: Option<Tensor<T>>,
    pub query: QueryTrace<T>,
    pub latents: Tensor<T>,
    pub k_rope: Tensor<T>,
    pub ids: Vec<usize>,
    pub kv_c: Tensor<T>,
    pub gate: Option<Tensor<T>>,
    pub gate_pre: Option<Tensor<T>>,
    pub kv: Tensor<T>,
    pub probs: AttnProbs<T>,
    pub u: Tensor<T>,
}

/// Up-projects and gates every cached latent, giving `S × n_h·(d_nope+d_v)`.
/// Returns `(kv_c, gate, pre_norm, kv_tilde)`.
#[allow(clippy::type_complexity)]
pub(crate) fn expand_cache<T: Real>(
    cfg: &LatentAttnConfig,
    latents: &Tensor<T>,
    ids: &[usize],
    w: &LatentAttnWeights<T>,
    table: Option<&GateTable<T>>,
    eps: f64,
) -> Result<(Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>)> {
    let kv_c = kv_up(latents, &w.w_ukv)?;
    if !cfg.is_gated() {
        return Ok((kv_c.clone(), None, None, kv_c));
    }
    let gw = w
        .gate
        .as_ref()
        .ok_or_else(|| Error::Invalid("gated layer without gate weights".into()))?;
    let source = match table {
        Some(t) => GateSource::Table(t),
        None => GateSource::Weights(gw),
    };
    let g = compute_gate(ids, source)?;
    let (kv, pre) = apply_gate_raw(&kv_c, &g, cfg.gating_mode, gw.ln.as_ref(), eps)?;
    Ok((kv_c, Some(g), Some(pre), kv))
}

/// Latent attention over `x` (`T × d_model`) with token ids `ids`.
///
/// With `down` given, the new latents and rotated keys are appended to
/// `cache` first; without it the layer reads the rows its group leader
/// appended. Keys and values are then rebuilt for every cached position.
#[allow(clippy::too_many_arguments)]
pub fn latent_attend_traced<T: Real>(
    cfg: &LatentAttnConfig,
    x: &Tensor<T>,
    ids: &[usize],
    down: Option<&KvDown<T>>,
    w: &LatentAttnWeights<T>,
    cache: &mut LatentKVCache<T>,
    positions: &[usize],
    freqs: &RopeFreqs,
    table: Option<&GateTable<T>>,
    eps: f64,
    want_trace: bool,
) -> Result<(Tensor<T>, Option<LatentTrace<T>>)> {
    let t_new = x.outer();
    if ids.len() != t_new {
        return Err(Error::shape("latent_attend", &[t_new], &[ids.len()]));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    check_positions(positions, cache.len(), down.is_some(), t_new)?;
    if freqs.d_rope() != cfg.d_rope {
        return Err(Error::shape("latent_attend", &[cfg.d_rope], &[freqs.d_rope()]));
    }

    let latent_raw = match down {
        Some(down) => {
            let (latent, k_raw, latent_raw) = kv_compress_raw(cfg, x, down, eps)?;
            let k_rope = apply_rope(&k_raw, positions, freqs)?;
            for i in 0..t_new {
                cache.append(latent.row(i), k_rope.row(i), ids[i])?;
            }
            Some(latent_raw)
        }
        None => {
            let cached = &cache.ids()[positions[0]..];
            if cached != ids {
                return Err(Error::Invalid("token ids differ from the group leader's".into()));
            }
            None
        }
    };

    let query = query_path_traced(cfg, x, &w.query, positions, freqs, eps)?;
    let latents = cache.latents().expect("cache holds the new rows");
    let k_rope = cache.roped_keys().expect("cache holds the new rows");
    let (kv_c, gate, gate_pre, kv) = expand_cache(cfg, &latents, cache.ids(), w, table, eps)?;

    let (nh, dn, dr, dv) = (cfg.n_head, cfg.d_nope, cfg.d_rope, cfg.d_v);
    let hw = dn + dv;
    let scale = T::one() / T::of((dn + dr) as f64).sqrt();
    let (u, probs) = causal_attend(
        nh,
        t_new,
        positions[0],
        cache.len(),
        dv,
        scale,
        |h, t, s| {
            dot_concat(
                &query.q_nope.row(t)[h * dn..(h + 1) * dn],
                &query.q_rope.row(t)[h * dr..(h + 1) * dr],
                &kv.row(s)[h * hw..h * hw + dn],
                k_rope.row(s),
            )
        },
        |h, s| &kv.row(s)[h * hw + dn..(h + 1) * hw],
    );
    let u = Tensor::new(&[t_new, nh * dv], u)?;
    let out = matmul(&u, &w.w_o)?;
    let trace = want_trace.then(|| LatentTrace {
        latent_raw,
        query,
        latents,
        k_rope,
        ids: cache.ids().to_vec(),
        kv_c,
        gate,
        gate_pre,
        kv,
        probs,
        u,
    });
    Ok((out, trace))
}

/// [`latent_attend_traced`] without the trace.
#[allow(clippy::too_many_arguments)]
pub fn latent_attend<T: Real>(
    cfg: &LatentAttnConfig,
    x: &Tensor<T>,
    ids: &[usize],
    down: Option<&KvDown<T>>,
    w: &LatentAttnWeights<T>,
    cache: &mut LatentKVCache<T>,
    positions: &[usize],
    freqs: &RopeFreqs,
    table: Option<&GateTable<T>>,
    eps: f64,
) -> Result<Tensor<T>> {
    latent_attend_traced(cfg, x, ids, down, w, cache, positions, freqs, table, eps, false).map(|(o, _)| o)
}

/// Precomputes `Emb(v) · W_ue` for every id `v`.
pub fn build_gate_table<T: Real>(w: &LatentAttnWeights<T>) -> Result<GateTable<T>> {
    let g = w
        .gate
        .as_ref()
        .ok_or_else(|| Error::config("gate table requested for a layer without embedding gate"))?;
    let ids: Vec<usize> = (0..g.emb.shape()[0]).collect();
    Ok(GateTable {
        table: compute_gate(&ids, GateSource::Weights(g))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{counter, init_linear, Init, Rng, DEFAULT_EPS};
    use crate::rope::build_freqs;

    fn cfg(gated: bool) -> LatentAttnConfig {
        LatentAttnConfig {
            d_model: 12,
            n_head: 3,
            d_nope: 4,
            d_rope: 4,
            d_v: 2,
            q_lora_rank: 0,
            kv_lora_rank: 5,
            kv_emb_dim: if gated { 3 } else { 0 },
            vocab_size: 11,
            gating_mode: GatingMode::MulLn,
            use_gate_table: false,
        }
    }

    fn init(rng: &mut Rng, c: &LatentAttnConfig) -> (KvDown, LatentAttnWeights) {
        let n = Init::Normal(0.4);
        let mut ln_gamma: Tensor = init_linear(rng, 1, c.kv_width(), Init::Normal(0.2)).unwrap();
        ln_gamma = ln_gamma.map(|v| v + 1.0).reshape(&[c.kv_width()]).unwrap();
        let gate = c.is_gated().then(|| GateWeights {
            emb: init_linear(rng, c.vocab_size, c.kv_emb_dim, Init::Normal(1.0)).unwrap(),
            w_ue: init_linear(rng, c.kv_emb_dim, c.kv_width(), n).unwrap(),
            ln: c.gating_mode.uses_ln().then(|| LnParams {
                gamma: ln_gamma.clone(),
                beta: init_linear(rng, 1, c.kv_width(), Init::Normal(0.1)).unwrap().reshape(&[c.kv_width()]).unwrap(),
            }),
        });
        let query = if c.q_lora_rank == 0 {
            QueryProj::Direct { w_q: init_linear(rng, c.d_model, c.q_width(), n).unwrap() }
        } else {
            QueryProj::LowRank {
                w_dq: init_linear(rng, c.d_model, c.q_lora_rank, n).unwrap(),
                q_norm_gamma: Tensor::filled(&[c.q_lora_rank], 1.0),
                w_uq: init_linear(rng, c.q_lora_rank, c.q_width(), n).unwrap(),
            }
        };
        (
            KvDown {
                w_dkv: init_linear(rng, c.d_model, c.kv_lora_rank + c.d_rope, n).unwrap(),
                kv_norm_gamma: Tensor::filled(&[c.kv_lora_rank], 1.0),
            },
            LatentAttnWeights {
                query,
                w_ukv: init_linear(rng, c.kv_lora_rank, c.kv_width(), n).unwrap(),
                gate,
                w_o: init_linear(rng, c.n_head * c.d_v, c.d_model, n).unwrap(),
            },
        )
    }

    fn full(c: &LatentAttnConfig, x: &Tensor, ids: &[usize], down: &KvDown, w: &LatentAttnWeights, table: Option<&GateTable>) -> Tensor {
        let f = build_freqs(c.d_rope, 32, 10_000.0).unwrap();
        let mut cache = LatentKVCache::new(c.kv_lora_rank, c.d_rope);
        let pos: Vec<usize> = (0..x.outer()).collect();
        latent_attend(c, x, ids, Some(down), w, &mut cache, &pos, &f, table, DEFAULT_EPS).unwrap()
    }

    #[test]
    fn compress_zero_weights_and_hand_example() {
        let c = LatentAttnConfig { d_model: 2, kv_lora_rank: 1, d_rope: 2, ..cfg(false) };
        let zero = KvDown { w_dkv: Tensor::zeros(&[2, 3]), kv_norm_gamma: Tensor::filled(&[1], 1.0) };
        let x = Tensor::from_rows(&[&[3.0, 4.0]]).unwrap();
        let (l, k) = kv_compress(&c, &x, &zero, DEFAULT_EPS).unwrap();
        assert_eq!(l.max_abs() + k.max_abs(), 0.0);

        let down = KvDown {
            w_dkv: Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0]]).unwrap(),
            kv_norm_gamma: Tensor::filled(&[1], 1.5),
        };
        let (l, k) = kv_compress(&c, &x, &down, DEFAULT_EPS).unwrap();
        assert_eq!(k.data(), &[4.0, 4.0]);
        assert!((l.data()[0] - 1.5 * 3.0 / (9.0f64 + DEFAULT_EPS).sqrt()).abs() < 1e-15);
        let (l2, _) = kv_compress(&c, &x.scale(2.0), &down, 1e-300).unwrap();
        let (l1, _) = kv_compress(&c, &x, &down, 1e-300).unwrap();
        assert!(l1.max_abs_diff(&l2) < 1e-10);
    }

    #[test]
    fn kv_up_examples() {
        let latent = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(kv_up(&latent, &Tensor::eye(3)).unwrap(), latent);
        assert_eq!(kv_up(&Tensor::zeros(&[1, 3]), &Tensor::filled(&[3, 4], 2.0)).unwrap().max_abs(), 0.0);
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0, 0.0, -1.0], &[1.0, 2.0, 4.0]]).unwrap();
        // hand expansion
        let want = Tensor::from_rows(&[&[5.0, 4.0, 7.0], &[0.5, -2.0, -4.5]]).unwrap();
        assert_eq!(kv_up(&a, &b).unwrap(), want);
    }

    #[test]
    fn gate_examples_and_dual_path() {
        let g = GateWeights {
            emb: Tensor::<f64>::eye(2),
            w_ue: Tensor::eye(2),
            ln: None,
        };
        let out = compute_gate(&[0, 1], GateSource::Weights(&g)).unwrap();
        assert_eq!(out, Tensor::eye(2));
        let zero = GateWeights { w_ue: Tensor::zeros(&[2, 2]), ..g.clone() };
        assert_eq!(compute_gate(&[1, 0, 1], GateSource::Weights(&zero)).unwrap().max_abs(), 0.0);

        let c = cfg(true);
        let mut rng = Rng::new(2);
        let (_, w) = init(&mut rng, &c);
        let table = build_gate_table(&w).unwrap();
        let ids: Vec<usize> = (0..100).map(|_| rng.below(c.vocab_size)).collect();
        let a = compute_gate(&ids, GateSource::Weights(w.gate.as_ref().unwrap())).unwrap();
        let b = compute_gate(&ids, GateSource::Table(&table)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(compute_gate(&[11], GateSource::Table(&table)).is_err());
    }

    #[test]
    fn apply_gate_modes() {
        let kv = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let g = Tensor::from_rows(&[&[2.0, 0.0, -1.0]]).unwrap();
        let out = apply_gate(&kv, &g, GatingMode::MulNoLn, None, DEFAULT_EPS).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, -3.0]);

        let ln = LnParams { gamma: Tensor::vector(&[1.0, 0.5, 2.0]).unwrap(), beta: Tensor::vector(&[0.1, 0.2, 0.3]).unwrap() };
        let ones = Tensor::filled(&[1, 3], 1.0);
        let a = apply_gate(&kv, &ones, GatingMode::MulLn, Some(&ln), DEFAULT_EPS).unwrap();
        assert!(a.bit_eq(&layer_norm(&kv, &ln.gamma, &ln.beta, DEFAULT_EPS).unwrap()));
        let b = apply_gate(&kv, &ones, GatingMode::AddLn, Some(&ln), DEFAULT_EPS).unwrap();
        let shifted = kv.map(|v| v + 1.0);
        assert!(b.bit_eq(&layer_norm(&shifted, &ln.gamma, &ln.beta, DEFAULT_EPS).unwrap()));
        assert!(apply_gate(&kv, &ones, GatingMode::AddLn, None, DEFAULT_EPS).is_err());
    }

    #[test]
    fn second_order_examples() {
        let w1 = Tensor::from_rows(&[&[2.0]]).unwrap();
        let w2 = Tensor::from_rows(&[&[3.0]]).unwrap();
        let (f, e) = expand_second_order(&w1, &w2, &Tensor::vector(&[5.0]).unwrap(), &Tensor::vector(&[7.0]).unwrap()).unwrap();
        assert_eq!((f.data()[0], e.data()[0]), (210.0, 210.0));
        let (f, e) = expand_second_order(&w1, &w2, &Tensor::vector(&[0.0]).unwrap(), &Tensor::vector(&[7.0]).unwrap()).unwrap();
        assert_eq!((f.data()[0], e.data()[0]), (0.0, 0.0));
        let big = Tensor::zeros(&[1, 65]);
        let x = Tensor::zeros(&[65]);
        assert!(expand_second_order(&big, &big, &x, &x).is_err());
    }

    #[test]
    fn query_position_zero_and_zero_weights() {
        let c = cfg(false);
        let mut rng = Rng::new(4);
        let (_, w) = init(&mut rng, &c);
        let f = build_freqs(c.d_rope, 8, 10_000.0).unwrap();
        let x: Tensor = init_linear(&mut rng, 1, c.d_model, Init::Normal(1.0)).unwrap();
        let (_, q_rope) = query_path(&c, &x, &w.query, &[0], &f, DEFAULT_EPS).unwrap();
        let QueryProj::Direct { w_q } = &w.query else { unreachable!() };
        let raw = matmul(&x, w_q).unwrap();
        for h in 0..c.n_head {
            let want = &raw.row(0)[h * 8 + 4..h * 8 + 8];
            assert_eq!(&q_rope.data()[h * 4..h * 4 + 4], want);
        }
        let zero = QueryProj::Direct { w_q: Tensor::zeros(&[c.d_model, c.q_width()]) };
        let (a, b) = query_path(&c, &x, &zero, &[3], &f, DEFAULT_EPS).unwrap();
        assert_eq!(a.max_abs() + b.max_abs(), 0.0);
    }

    #[test]
    fn low_rank_query_collapses_to_direct_on_unit_rms_input() {
        // With gamma = 1 and an input whose low-rank projection already has
        // unit mean square, RMSNorm is (almost) the identity and the two
        // stages fold into w_dq · w_uq.
        let c = LatentAttnConfig { q_lora_rank: 4, ..cfg(false) };
        let mut rng = Rng::new(7);
        let (_, w) = init(&mut rng, &c);
        let QueryProj::LowRank { w_dq, w_uq, .. } = &w.query else { unreachable!() };
        let x0: Tensor = init_linear(&mut rng, 1, c.d_model, Init::Normal(1.0)).unwrap();
        let proj = matmul(&x0, w_dq).unwrap();
        let ms = proj.sum_sq() / 4.0;
        let x = x0.scale(1.0 / ms.sqrt());
        let f = build_freqs(c.d_rope, 8, 10_000.0).unwrap();
        let eps = 1e-300;
        let (a1, b1) = query_path(&c, &x, &w.query, &[2], &f, eps).unwrap();
        let direct = QueryProj::Direct { w_q: matmul(w_dq, w_uq).unwrap() };
        let (a2, b2) = query_path(&c, &x, &direct, &[2], &f, eps).unwrap();
        assert!(a1.max_abs_diff(&a2) < 1e-9 && b1.max_abs_diff(&b2) < 1e-9);
    }

    #[test]
    fn single_token_output_is_projected_value() {
        let c = cfg(true);
        let mut rng = Rng::new(5);
        let (down, w) = init(&mut rng, &c);
        let x: Tensor = init_linear(&mut rng, 1, c.d_model, Init::Normal(1.0)).unwrap();
        let out = full(&c, &x, &[3], &down, &w, None);
        let (latent, _) = kv_compress(&c, &x, &down, DEFAULT_EPS).unwrap();
        let (_, _, _, kv) = expand_cache(&c, &latent, &[3], &w, None, DEFAULT_EPS).unwrap();
        let hw = c.d_nope + c.d_v;
        let v: Vec<f64> = (0..c.n_head).flat_map(|h| kv.row(0)[h * hw + c.d_nope..(h + 1) * hw].to_vec()).collect();
        let want = matmul(&Tensor::new(&[1, v.len()], v).unwrap(), &w.w_o).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn zero_up_projection_without_ln_gives_zero() {
        let c = LatentAttnConfig { gating_mode: GatingMode::MulNoLn, ..cfg(true) };
        let mut rng = Rng::new(6);
        let (down, mut w) = init(&mut rng, &c);
        w.w_ukv = Tensor::zeros(w.w_ukv.shape());
        let x: Tensor = init_linear(&mut rng, 4, c.d_model, Init::Normal(1.0)).unwrap();
        assert_eq!(full(&c, &x, &[1, 2, 3, 4], &down, &w, None).max_abs(), 0.0);
    }

    #[test]
    fn prefill_matches_incremental_decode() {
        for mode in GatingMode::ALL {
            let c = LatentAttnConfig { gating_mode: mode, ..cfg(true) };
            let mut rng = Rng::new(9);
            let (down, w) = init(&mut rng, &c);
            let x: Tensor = init_linear(&mut rng, 4, c.d_model, Init::Normal(1.0)).unwrap();
            let ids = [4, 1, 4, 9];
            let want = full(&c, &x, &ids, &down, &w, None);
            let f = build_freqs(c.d_rope, 32, 10_000.0).unwrap();
            let mut cache = LatentKVCache::new(c.kv_lora_rank, c.d_rope);
            for t in 0..4 {
                let row = x.slice_rows(t, t + 1).unwrap();
                let out = latent_attend(&c, &row, &ids[t..t + 1], Some(&down), &w, &mut cache, &[t], &f, None, DEFAULT_EPS).unwrap();
                assert!(out.max_abs_diff(&want.slice_rows(t, t + 1).unwrap()) <= 1e-10);
            }
        }
    }

    #[test]
    fn gate_table_path_is_bit_identical_and_skips_gate_matmuls() {
        let c = cfg(true);
        let mut rng = Rng::new(10);
        let (down, w) = init(&mut rng, &c);
        let table = build_gate_table(&w).unwrap();
        let x: Tensor = init_linear(&mut rng, 5, c.d_model, Init::Normal(1.0)).unwrap();
        let ids = [0, 10, 3, 3, 7];
        let a = full(&c, &x, &ids, &down, &w, None);
        counter::reset_matmul_counts();
        let b = full(&c, &x, &ids, &down, &w, Some(&table));
        assert_eq!(counter::matmul_counts().gate, 0);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn all_ones_gate_equals_mla_with_ln() {
        let c = cfg(true);
        let mut rng = Rng::new(12);
        let (down, mut w) = init(&mut rng, &c);
        // Gate forced to ones: Emb = e1 columns, w_ue first row all ones.
        let g = w.gate.as_mut().unwrap();
        g.emb = Tensor::from_parts(vec![c.vocab_size, 3], (0..c.vocab_size).flat_map(|_| [1.0, 0.0, 0.0]).collect());
        let mut w_ue = Tensor::zeros(&[3, c.kv_width()]);
        w_ue.row_mut(0).iter_mut().for_each(|v| *v = 1.0);
        g.w_ue = w_ue;
        let x: Tensor = init_linear(&mut rng, 4, c.d_model, Init::Normal(1.0)).unwrap();
        let ids = [1, 2, 3, 4];
        let gated = full(&c, &x, &ids, &down, &w, None);

        // MLA with LayerNorm directly after the up-projection.
        let ln = w.gate.as_ref().unwrap().ln.clone().unwrap();
        let (latent, k_raw) = kv_compress(&c, &x, &down, DEFAULT_EPS).unwrap();
        let f = build_freqs(c.d_rope, 32, 10_000.0).unwrap();
        let pos = [0, 1, 2, 3];
        let k_rope = apply_rope(&k_raw, &pos, &f).unwrap();
        let kv = layer_norm(&kv_up(&latent, &w.w_ukv).unwrap(), &ln.gamma, &ln.beta, DEFAULT_EPS).unwrap();
        let (qn, qr) = query_path(&c, &x, &w.query, &pos, &f, DEFAULT_EPS).unwrap();
        let want = reference_attention(&c, &qn, &qr, &kv, &k_rope, &w.w_o);
        assert!(gated.max_abs_diff(&want) < 1e-12);

        // kv_emb_dim = 0 reduces to MLA without any LayerNorm.
        let plain_c = cfg(false);
        let plain_w = LatentAttnWeights { gate: None, ..w.clone() };
        let plain = full(&plain_c, &x, &ids, &down, &plain_w, None);
        let kv_plain = kv_up(&latent, &w.w_ukv).unwrap();
        let want = reference_attention(&plain_c, &qn, &qr, &kv_plain, &k_rope, &w.w_o);
        assert!(plain.max_abs_diff(&want) < 1e-12);
    }

    /// Unfused reference: materialises per-head `[k^C; k^R]` and `[q^C; q^R]`
    /// and runs plain causal softmax attention.
    fn reference_attention(c: &LatentAttnConfig, qn: &Tensor, qr: &Tensor, kv: &Tensor, k_rope: &Tensor, w_o: &Tensor) -> Tensor {
        let t = kv.outer();
        let hw = c.d_nope + c.d_v;
        let mut u = vec![0.0; t * c.n_head * c.d_v];
        for h in 0..c.n_head {
            let q_h: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    let mut q = qn.data()[(i * c.n_head + h) * c.d_nope..][..c.d_nope].to_vec();
                    q.extend_from_slice(&qr.data()[(i * c.n_head + h) * c.d_rope..][..c.d_rope]);
                    q
                })
                .collect();
            let k_h: Vec<Vec<f64>> = (0..t)
                .map(|j| {
                    let mut k = kv.row(j)[h * hw..h * hw + c.d_nope].to_vec();
                    k.extend_from_slice(k_rope.row(j));
                    k
                })
                .collect();
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q_h[i].iter().zip(&k_h[j]).map(|(a, b)| a * b).sum::<f64>() / ((c.d_nope + c.d_rope) as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, p) in e.iter().enumerate() {
                    for d in 0..c.d_v {
                        u[(i * c.n_head + h) * c.d_v + d] += p / z * kv.row(j)[h * hw + c.d_nope + d];
                    }
                }
            }
        }
        matmul(&Tensor::new(&[t, c.n_head * c.d_v], u).unwrap(), w_o).unwrap()
    }

    #[test]
    fn fused_scores_match_unfused_reference() {
        let c = cfg(true);
        let mut rng = Rng::new(13);
        let (down, w) = init(&mut rng, &c);
        let x: Tensor = init_linear(&mut rng, 6, c.d_model, Init::Normal(1.0)).unwrap();
        let ids = [5, 2, 8, 0, 1, 1];
        let got = full(&c, &x, &ids, &down, &w, None);
        let f = build_freqs(c.d_rope, 32, 10_000.0).unwrap();
        let pos: Vec<usize> = (0..6).collect();
        let (latent, k_raw) = kv_compress(&c, &x, &down, DEFAULT_EPS).unwrap();
        let k_rope = apply_rope(&k_raw, &pos, &f).unwrap();
        let (_, _, _, kv) = expand_cache(&c, &latent, &ids, &w, None, DEFAULT_EPS).unwrap();
        let (qn, qr) = query_path(&c, &x, &w.query, &pos, &f, DEFAULT_EPS).unwrap();
        let want = reference_attention(&c, &qn, &qr, &kv, &k_rope, &w.w_o);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn causal_and_gate_locality() {
        let c = cfg(true);
        let mut rng = Rng::new(14);
        let (down, w) = init(&mut rng, &c);
        let x: Tensor = init_linear(&mut rng, 6, c.d_model, Init::Normal(1.0)).unwrap();
        let ids = [5, 2, 8, 0, 1, 1];
        let base = full(&c, &x, &ids, &down, &w, None);
        let mut y = x.clone();
        y.row_mut(4).iter_mut().for_each(|v| *v *= -3.0);
        let ids2 = [5, 2, 8, 0, 9, 3];
        let pert = full(&c, &y, &ids2, &down, &w, None);
        assert!(pert.slice_rows(0, 4).unwrap().max_abs_diff(&base.slice_rows(0, 4).unwrap()) <= 1e-12);

        let gw = GateSource::Weights(w.gate.as_ref().unwrap());
        let g1 = compute_gate(&[3, 4, 5], gw).unwrap();
        let g2 = compute_gate(&[9, 4, 0], gw).unwrap();
        assert_eq!(g1.row(1), g2.row(1));
    }

    #[test]
    fn gate_table_requires_gate() {
        let c = cfg(false);
        let mut rng = Rng::new(1);
        let (_, mut w) = init(&mut rng, &c);
        w.gate = None;
        assert!(build_gate_table(&w).is_err());
    }
}
