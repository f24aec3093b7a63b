//! Decoder-only model: token embedding, pre-norm attention + MLP blocks,
//! layer grouping, unembedding, and the prefill/decode loop.
//!
//! Blocks compute `x += attn(rms(x)); x += mlp(rms(x))` followed by a final
//! RMSNorm and an untied unembedding. With `lgz > 1`, consecutive groups of
//! `lgz` layers share one KV down-projection (or, for the baselines, one K/V
//! projection) and the cached activation it produces: only the first layer
//! of a group computes and caches it, later layers read the same cache.

use crate::baseline::{baseline_attend_traced, BaselineAttnWeights, BaselineShape, BaselineTrace, KvProjection};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::kernel::{
    embed_lookup, gelu, init_linear, matmul, rms_norm, Init, Real, Rng, Tensor,
};
use crate::kvcache::{DenseKVCache, LatentKVCache};
use crate::latent::{
    build_gate_table, latent_attend_traced, GateTable, GateWeights, KvDown, LatentAttnWeights, LatentTrace,
    LnParams, QueryProj,
};
use crate::rope::{build_freqs, RopeFreqs};

/// Projection shared by the layers of one group.
#[derive(Debug, Clone, PartialEq)]
pub enum SharedKv<T: Real = f64> {
    Dense(KvProjection<T>),
    Latent(KvDown<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttnWeights<T: Real = f64> {
    Dense(BaselineAttnWeights<T>),
    Latent(LatentAttnWeights<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f64> {
    pub attn_norm: Tensor<T>,
    pub attn: AttnWeights<T>,
    pub mlp_norm: Tensor<T>,
    /// `d_model × mlp_hidden`
    pub w_fc: Tensor<T>,
    /// `mlp_hidden × d_model`
    pub w_proj: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights<T: Real = f64> {
    pub config: ModelConfig,
    /// `V × d_model`
    pub tok_emb: Tensor<T>,
    /// One entry per layer group.
    pub groups: Vec<SharedKv<T>>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    /// `d_model × V`
    pub unembed: Tensor<T>,
    /// Precomputed gates per layer (EG-MLA-A only).
    gate_tables: Vec<Option<GateTable<T>>>,
    freqs: RopeFreqs,
}

impl<T: Real> PartialEq for ModelWeights<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tok_emb == other.tok_emb
            && self.groups == other.groups
            && self.blocks == other.blocks
            && self.final_norm == other.final_norm
            && self.unembed == other.unembed
    }
}

/// Parameter totals split into activated weights and the per-layer gate
/// embedding tables (lookup-only, offloadable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub activated: u64,
    pub embed: u64,
    /// Distinct KV down-projection (or K/V projection) matrices.
    pub kv_down_matrices: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.activated + self.embed
    }
}

/// Analytic parameter count for `cfg` without allocating weights.
pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let (v, d, hid, l) = (cfg.vocab_size, cfg.d_model, cfg.mlp_hidden, cfg.n_layer);
    let groups = cfg.n_groups();
    let mut activated = 2 * v * d + d + l * (2 * d + 2 * d * hid);
    let mut embed = 0;
    if cfg.variant.is_latent() {
        let lc = cfg.latent();
        let q = if lc.q_lora_rank == 0 {
            d * lc.q_width()
        } else {
            d * lc.q_lora_rank + lc.q_lora_rank + lc.q_lora_rank * lc.q_width()
        };
        let mut per_layer = q + lc.kv_lora_rank * lc.kv_width() + cfg.n_head * cfg.d_v * d;
        if lc.is_gated() {
            per_layer += lc.kv_emb_dim * lc.kv_width();
            if lc.gating_mode.uses_ln() {
                per_layer += 2 * lc.kv_width();
            }
            embed += l * v * lc.kv_emb_dim;
        }
        activated += l * per_layer + groups * (d * (lc.kv_lora_rank + lc.d_rope) + lc.kv_lora_rank);
    } else {
        let qw = cfg.n_head * cfg.head_dim;
        let kvw = cfg.n_kv_heads() * cfg.head_dim;
        activated += l * 2 * d * qw + groups * 2 * d * kvw;
    }
    ParamCounts {
        activated: activated as u64,
        embed: embed as u64,
        kv_down_matrices: groups as u64,
    }
}

/// Largest parameter count [`ModelWeights::build`] will allocate. Larger
/// configurations are for cache and parameter accounting only.
pub const RUNNABLE_PARAM_LIMIT: u64 = 50_000_000;

pub fn ensure_runnable(cfg: &ModelConfig) -> Result<()> {
    let n = param_counts(cfg).total();
    if n > RUNNABLE_PARAM_LIMIT {
        return Err(Error::config(format!(
            "'{}' has {n} parameters; configurations above {RUNNABLE_PARAM_LIMIT} are audit-only",
            cfg.name
        )));
    }
    Ok(())
}

fn vec_param<T: Real>(n: usize, value: f64) -> Tensor<T> {
    Tensor::filled(&[n], T::of(value))
}

impl ModelWeights<f64> {
    /// Deterministic initialisation: every matrix `N(0, init_std²)`, norm
    /// gains 1, LayerNorm shifts 0.
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        ensure_runnable(cfg)?;
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let init = Init::Normal(cfg.init_std);
        let mut lin = |r: usize, c: usize| init_linear::<f64>(rng, r, c, init);
        let tok_emb = lin(v, d)?;
        let mut groups = Vec::with_capacity(cfg.n_groups());
        for _ in 0..cfg.n_groups() {
            groups.push(if cfg.variant.is_latent() {
                SharedKv::Latent(KvDown {
                    w_dkv: lin(d, cfg.kv_lora_rank + cfg.d_rope)?,
                    kv_norm_gamma: vec_param(cfg.kv_lora_rank, 1.0),
                })
            } else {
                let kvw = cfg.n_kv_heads() * cfg.head_dim;
                SharedKv::Dense(KvProjection { wk: lin(d, kvw)?, wv: lin(d, kvw)? })
            });
        }
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for _ in 0..cfg.n_layer {
            let attn = if cfg.variant.is_latent() {
                let lc = cfg.latent();
                let query = if lc.q_lora_rank == 0 {
                    QueryProj::Direct { w_q: lin(d, lc.q_width())? }
                } else {
                    QueryProj::LowRank {
                        w_dq: lin(d, lc.q_lora_rank)?,
                        q_norm_gamma: vec_param(lc.q_lora_rank, 1.0),
                        w_uq: lin(lc.q_lora_rank, lc.q_width())?,
                    }
                };
                let w_ukv = lin(lc.kv_lora_rank, lc.kv_width())?;
                let gate = if lc.is_gated() {
                    Some(GateWeights {
                        emb: lin(v, lc.kv_emb_dim)?,
                        w_ue: lin(lc.kv_emb_dim, lc.kv_width())?,
                        ln: lc.gating_mode.uses_ln().then(|| LnParams {
                            gamma: vec_param(lc.kv_width(), 1.0),
                            beta: vec_param(lc.kv_width(), 0.0),
                        }),
                    })
                } else {
                    None
                };
                AttnWeights::Latent(LatentAttnWeights {
                    query,
                    w_ukv,
                    gate,
                    w_o: lin(cfg.n_head * cfg.d_v, d)?,
                })
            } else {
                let qw = cfg.n_head * cfg.head_dim;
                AttnWeights::Dense(BaselineAttnWeights { wq: lin(d, qw)?, wo: lin(qw, d)? })
            };
            blocks.push(Block {
                attn_norm: vec_param(d, 1.0),
                attn,
                mlp_norm: vec_param(d, 1.0),
                w_fc: lin(d, cfg.mlp_hidden)?,
                w_proj: lin(cfg.mlp_hidden, d)?,
            });
        }
        let final_norm = vec_param(d, 1.0);
        let unembed = lin(d, v)?;
        Self::assemble(cfg.clone(), tok_emb, groups, blocks, final_norm, unembed)
    }
}

impl<T: Real> ModelWeights<T> {
    /// Validates shapes and derives rotary tables and gate tables.
    pub fn assemble(
        config: ModelConfig,
        tok_emb: Tensor<T>,
        groups: Vec<SharedKv<T>>,
        blocks: Vec<Block<T>>,
        final_norm: Tensor<T>,
        unembed: Tensor<T>,
    ) -> Result<Self> {
        config.validate()?;
        if groups.len() != config.n_groups() || blocks.len() != config.n_layer {
            return Err(Error::config(format!(
                "expected {} groups and {} blocks, got {} and {}",
                config.n_groups(),
                config.n_layer,
                groups.len(),
                blocks.len()
            )));
        }
        let freqs = build_freqs(config.rope_dim(), config.max_seq_len, config.rope_base)?;
        let mut w = ModelWeights {
            gate_tables: vec![None; config.n_layer],
            config,
            tok_emb,
            groups,
            blocks,
            final_norm,
            unembed,
            freqs,
        };
        w.check_shapes()?;
        w.refresh_gate_tables()?;
        Ok(w)
    }

    fn check_shapes(&self) -> Result<()> {
        let pc = param_counts(&self.config);
        let mut total = 0u64;
        for (_, t) in self.tensors() {
            total += t.len() as u64;
        }
        if total != pc.total() {
            return Err(Error::config(format!(
                "weights hold {total} parameters, configuration implies {}",
                pc.total()
            )));
        }
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        if self.tok_emb.shape() != [v, d] || self.unembed.shape() != [d, v] {
            return Err(Error::shape("model", self.tok_emb.shape(), self.unembed.shape()));
        }
        Ok(())
    }

    /// Rebuilds the EG-MLA-A gate tables from the current gate weights.
    pub fn refresh_gate_tables(&mut self) -> Result<()> {
        for (i, block) in self.blocks.iter().enumerate() {
            self.gate_tables[i] = match (&block.attn, self.config.variant) {
                (AttnWeights::Latent(lw), Variant::EgMlaA) => Some(build_gate_table(lw)?),
                _ => None,
            };
        }
        Ok(())
    }

    pub fn gate_table(&self, layer: usize) -> Option<&GateTable<T>> {
        self.gate_tables.get(layer).and_then(Option::as_ref)
    }

    pub fn freqs(&self) -> &RopeFreqs {
        &self.freqs
    }

    pub fn group_of(&self, layer: usize) -> usize {
        layer / self.config.lgz
    }

    /// The shared projection a layer uses; layers of one group return the
    /// same object.
    pub fn shared_kv(&self, layer: usize) -> &SharedKv<T> {
        &self.groups[self.group_of(layer)]
    }

    /// Same model with a different gating configuration-free variant flag;
    /// used to compare EG-MLA against EG-MLA-A on identical weights.
    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        let mut config = self.config.clone();
        config.variant = variant;
        Self::assemble(
            config,
            self.tok_emb.clone(),
            self.groups.clone(),
            self.blocks.clone(),
            self.final_norm.clone(),
            self.unembed.clone(),
        )
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let mut out = ModelWeights::<U> {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            groups: self
                .groups
                .iter()
                .map(|g| match g {
                    SharedKv::Dense(p) => SharedKv::Dense(KvProjection { wk: p.wk.cast(), wv: p.wv.cast() }),
                    SharedKv::Latent(p) => SharedKv::Latent(KvDown {
                        w_dkv: p.w_dkv.cast(),
                        kv_norm_gamma: p.kv_norm_gamma.cast(),
                    }),
                })
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: b.attn_norm.cast(),
                    attn: match &b.attn {
                        AttnWeights::Dense(a) => AttnWeights::Dense(BaselineAttnWeights { wq: a.wq.cast(), wo: a.wo.cast() }),
                        AttnWeights::Latent(a) => AttnWeights::Latent(LatentAttnWeights {
                            query: match &a.query {
                                QueryProj::Direct { w_q } => QueryProj::Direct { w_q: w_q.cast() },
                                QueryProj::LowRank { w_dq, q_norm_gamma, w_uq } => QueryProj::LowRank {
                                    w_dq: w_dq.cast(),
                                    q_norm_gamma: q_norm_gamma.cast(),
                                    w_uq: w_uq.cast(),
                                },
                            },
                            w_ukv: a.w_ukv.cast(),
                            gate: a.gate.as_ref().map(|g| GateWeights {
                                emb: g.emb.cast(),
                                w_ue: g.w_ue.cast(),
                                ln: g.ln.as_ref().map(|ln| LnParams { gamma: ln.gamma.cast(), beta: ln.beta.cast() }),
                            }),
                            w_o: a.w_o.cast(),
                        }),
                    },
                    mlp_norm: b.mlp_norm.cast(),
                    w_fc: b.w_fc.cast(),
                    w_proj: b.w_proj.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
            gate_tables: vec![None; self.config.n_layer],
            freqs: self.freqs.clone(),
        };
        out.refresh_gate_tables().expect("cast preserves gate weights");
        out
    }

    /// Every parameter tensor with its canonical name, in a fixed order.
    /// Shared group projections appear once.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("tok_emb".into(), &self.tok_emb)];
        for (g, shared) in self.groups.iter().enumerate() {
            match shared {
                SharedKv::Dense(p) => {
                    out.push((format!("group.{g}.wk"), &p.wk));
                    out.push((format!("group.{g}.wv"), &p.wv));
                }
                SharedKv::Latent(p) => {
                    out.push((format!("group.{g}.w_dkv"), &p.w_dkv));
                    out.push((format!("group.{g}.kv_norm"), &p.kv_norm_gamma));
                }
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer.{i}.attn_norm"), &b.attn_norm));
            match &b.attn {
                AttnWeights::Dense(a) => {
                    out.push((format!("layer.{i}.wq"), &a.wq));
                    out.push((format!("layer.{i}.wo"), &a.wo));
                }
                AttnWeights::Latent(a) => {
                    match &a.query {
                        QueryProj::Direct { w_q } => out.push((format!("layer.{i}.w_q"), w_q)),
                        QueryProj::LowRank { w_dq, q_norm_gamma, w_uq } => {
                            out.push((format!("layer.{i}.w_dq"), w_dq));
                            out.push((format!("layer.{i}.q_norm"), q_norm_gamma));
                            out.push((format!("layer.{i}.w_uq"), w_uq));
                        }
                    }
                    out.push((format!("layer.{i}.w_ukv"), &a.w_ukv));
                    if let Some(g) = &a.gate {
                        out.push((format!("layer.{i}.emb"), &g.emb));
                        out.push((format!("layer.{i}.w_ue"), &g.w_ue));
                        if let Some(ln) = &g.ln {
                            out.push((format!("layer.{i}.ln_gamma"), &ln.gamma));
                            out.push((format!("layer.{i}.ln_beta"), &ln.beta));
                        }
                    }
                    out.push((format!("layer.{i}.w_o"), &a.w_o));
                }
            }
            out.push((format!("layer.{i}.mlp_norm"), &b.mlp_norm));
            out.push((format!("layer.{i}.w_fc"), &b.w_fc));
            out.push((format!("layer.{i}.w_proj"), &b.w_proj));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order. Call
    /// [`refresh_gate_tables`](Self::refresh_gate_tables) after editing
    /// gate weights of an EG-MLA-A model.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("tok_emb".into(), &mut self.tok_emb)];
        for (g, shared) in self.groups.iter_mut().enumerate() {
            match shared {
                SharedKv::Dense(p) => {
                    out.push((format!("group.{g}.wk"), &mut p.wk));
                    out.push((format!("group.{g}.wv"), &mut p.wv));
                }
                SharedKv::Latent(p) => {
                    out.push((format!("group.{g}.w_dkv"), &mut p.w_dkv));
                    out.push((format!("group.{g}.kv_norm"), &mut p.kv_norm_gamma));
                }
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layer.{i}.attn_norm"), &mut b.attn_norm));
            match &mut b.attn {
                AttnWeights::Dense(a) => {
                    out.push((format!("layer.{i}.wq"), &mut a.wq));
                    out.push((format!("layer.{i}.wo"), &mut a.wo));
                }
                AttnWeights::Latent(a) => {
                    match &mut a.query {
                        QueryProj::Direct { w_q } => out.push((format!("layer.{i}.w_q"), w_q)),
                        QueryProj::LowRank { w_dq, q_norm_gamma, w_uq } => {
                            out.push((format!("layer.{i}.w_dq"), w_dq));
                            out.push((format!("layer.{i}.q_norm"), q_norm_gamma));
                            out.push((format!("layer.{i}.w_uq"), w_uq));
                        }
                    }
                    out.push((format!("layer.{i}.w_ukv"), &mut a.w_ukv));
                    if let Some(g) = &mut a.gate {
                        out.push((format!("layer.{i}.emb"), &mut g.emb));
                        out.push((format!("layer.{i}.w_ue"), &mut g.w_ue));
                        if let Some(ln) = &mut g.ln {
                            out.push((format!("layer.{i}.ln_gamma"), &mut ln.gamma));
                            out.push((format!("layer.{i}.ln_beta"), &mut ln.beta));
                        }
                    }
                    out.push((format!("layer.{i}.w_o"), &mut a.w_o));
                }
            }
            out.push((format!("layer.{i}.mlp_norm"), &mut b.mlp_norm));
            out.push((format!("layer.{i}.w_fc"), &mut b.w_fc));
            out.push((format!("layer.{i}.w_proj"), &mut b.w_proj));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    /// Exhaustive tally of the allocated tensors.
    pub fn tally(&self) -> ParamCounts {
        let mut pc = ParamCounts {
            kv_down_matrices: self.groups.len() as u64,
            ..ParamCounts::default()
        };
        for (name, t) in self.tensors() {
            if name.ends_with(".emb") {
                pc.embed += t.len() as u64;
            } else {
                pc.activated += t.len() as u64;
            }
        }
        pc
    }
}

/// Per-group caches of one decoding session.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupCache<T: Real = f64> {
    Dense(DenseKVCache<T>),
    Latent(LatentKVCache<T>),
}

impl<T: Real> GroupCache<T> {
    pub fn len(&self) -> usize {
        match self {
            GroupCache::Dense(c) => c.len(),
            GroupCache::Latent(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elements(&self) -> usize {
        match self {
            GroupCache::Dense(c) => c.elements(),
            GroupCache::Latent(c) => c.elements(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCache<T: Real = f64> {
    pub groups: Vec<GroupCache<T>>,
}

impl<T: Real> ModelCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let groups = (0..cfg.n_groups())
            .map(|_| {
                if cfg.variant.is_latent() {
                    GroupCache::Latent(LatentKVCache::new(cfg.kv_lora_rank, cfg.d_rope))
                } else {
                    GroupCache::Dense(DenseKVCache::new(cfg.n_kv_heads() * cfg.head_dim))
                }
            })
            .collect();
        ModelCache { groups }
    }

    /// Cached sequence length.
    pub fn len(&self) -> usize {
        self.groups.first().map_or(0, GroupCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Float elements held across all groups.
    pub fn elements(&self) -> usize {
        self.groups.iter().map(GroupCache::elements).sum()
    }
}

#[derive(Debug, Clone)]
pub enum AttnTrace<T: Real> {
    Dense(BaselineTrace<T>),
    Latent(LatentTrace<T>),
}

/// Activations of one block kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockTrace<T: Real> {
    pub x: Tensor<T>,
    pub a: Tensor<T>,
    pub attn: AttnTrace<T>,
    pub x_mid: Tensor<T>,
    pub m: Tensor<T>,
    pub h: Tensor<T>,
    pub act: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelTrace<T: Real> {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockTrace<T>>,
    pub x_final: Tensor<T>,
    pub h_final: Tensor<T>,
}

/// Runs `tokens` through the model on top of `cache`, appending to it.
/// Returns logits `T × V` (and the trace when requested).
pub fn forward_with_cache<T: Real>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    cache: &mut ModelCache<T>,
    want_trace: bool,
) -> Result<(Tensor<T>, Option<ModelTrace<T>>)> {
    let cfg = &w.config;
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    let start = cache.len();
    if start + tokens.len() > cfg.max_seq_len {
        return Err(Error::PositionOverflow {
            position: start + tokens.len() - 1,
            max_len: cfg.max_seq_len,
        });
    }
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let eps = cfg.norm_eps;
    let mut x = embed_lookup(&w.tok_emb, tokens)?;
    let mut traces = Vec::new();
    for (i, block) in w.blocks.iter().enumerate() {
        let g = w.group_of(i);
        let leader = i % cfg.lgz == 0;
        let a = rms_norm(&x, &block.attn_norm, eps)?;
        let (attn_out, attn_trace) = match (&block.attn, &w.groups[g], &mut cache.groups[g]) {
            (AttnWeights::Dense(aw), SharedKv::Dense(kv), GroupCache::Dense(c)) => {
                let shape = BaselineShape {
                    d_model: cfg.d_model,
                    n_head: cfg.n_head,
                    n_kv: cfg.n_kv_heads(),
                    head_dim: cfg.head_dim,
                };
                let (o, t) = baseline_attend_traced(shape, &a, aw, leader.then_some(kv), c, &positions, &w.freqs, want_trace)?;
                (o, t.map(AttnTrace::Dense))
            }
            (AttnWeights::Latent(lw), SharedKv::Latent(down), GroupCache::Latent(c)) => {
                let (o, t) = latent_attend_traced(
                    &cfg.latent(),
                    &a,
                    tokens,
                    leader.then_some(down),
                    lw,
                    c,
                    &positions,
                    &w.freqs,
                    w.gate_table(i),
                    eps,
                    want_trace,
                )?;
                (o, t.map(AttnTrace::Latent))
            }
            _ => return Err(Error::config("attention weights do not match the cache layout")),
        };
        let x_mid = x.add(&attn_out)?;
        let m = rms_norm(&x_mid, &block.mlp_norm, eps)?;
        let h = matmul(&m, &block.w_fc)?;
        let act = h.map(gelu);
        let y = matmul(&act, &block.w_proj)?;
        let x_out = x_mid.add(&y)?;
        if let Some(attn) = attn_trace {
            traces.push(BlockTrace { x, a, attn, x_mid, m, h, act });
        }
        x = x_out;
    }
    let h_final = rms_norm(&x, &w.final_norm, eps)?;
    let logits = matmul(&h_final, &w.unembed)?;
    let trace = want_trace.then(|| ModelTrace {
        tokens: tokens.to_vec(),
        blocks: traces,
        x_final: x,
        h_final,
    });
    Ok((logits, trace))
}

/// Logits for every position of `tokens`, computed in one pass from empty
/// caches.
pub fn forward_full<T: Real>(w: &ModelWeights<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let mut cache = ModelCache::new(&w.config);
    forward_with_cache(w, tokens, &mut cache, false).map(|(l, _)| l)
}

/// Logits computed one token at a time against a growing cache.
pub fn forward_incremental<T: Real>(w: &ModelWeights<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let mut cache = ModelCache::new(&w.config);
    let mut rows = Vec::with_capacity(tokens.len() * w.config.vocab_size);
    for &tok in tokens {
        let (l, _) = forward_with_cache(w, &[tok], &mut cache, false)?;
        rows.extend_from_slice(l.data());
    }
    Tensor::new(&[tokens.len(), w.config.vocab_size], rows)
}

#[derive(Debug, Clone)]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, rng: Rng },
}

impl Sampler {
    pub fn sample<T: Real>(&mut self, logits: &[T]) -> usize {
        match self {
            Sampler::Greedy => argmax(logits),
            Sampler::Temperature { temperature, rng } => {
                let t = temperature.max(1e-6);
                let m = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
                let p: Vec<f64> = logits.iter().map(|v| ((v.f64() - m) / t).exp()).collect();
                let z: f64 = p.iter().sum();
                let mut r = rng.uniform() * z;
                for (i, pi) in p.iter().enumerate() {
                    if r < *pi {
                        return i;
                    }
                    r -= pi;
                }
                p.len() - 1
            }
        }
    }
}

/// Index of the first maximum.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct DecodeOutput<T: Real = f64> {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    /// Logits that produced each generated token.
    pub step_logits: Vec<Vec<T>>,
    pub cache: ModelCache<T>,
}

/// Prefills `prompt` in one pass, then generates `n_new` tokens one step at
/// a time against the caches.
pub fn decode<T: Real>(
    w: &ModelWeights<T>,
    prompt: &[usize],
    n_new: usize,
    sampler: &mut Sampler,
) -> Result<DecodeOutput<T>> {
    if prompt.is_empty() {
        return Err(Error::Invalid("decode needs a non-empty prompt".into()));
    }
    let total = prompt.len() + n_new.saturating_sub(1);
    if total > w.config.max_seq_len {
        return Err(Error::Invalid(format!(
            "prompt {} + {n_new} new tokens exceeds max_seq_len {}",
            prompt.len(),
            w.config.max_seq_len
        )));
    }
    let mut cache = ModelCache::new(&w.config);
    let mut tokens = prompt.to_vec();
    let mut step_logits = Vec::with_capacity(n_new);
    let (prefill, _) = forward_with_cache(w, prompt, &mut cache, false)?;
    if n_new == 0 {
        return Ok(DecodeOutput { tokens, step_logits, cache });
    }
    let mut last = prefill.row(prefill.outer() - 1).to_vec();
    loop {
        let next = sampler.sample(&last);
        tokens.push(next);
        step_logits.push(last);
        if step_logits.len() == n_new {
            break;
        }
        let (l, _) = forward_with_cache(w, &[next], &mut cache, false)?;
        last = l.row(0).to_vec();
    }
    Ok(DecodeOutput { tokens, step_logits, cache })
}

/// Mean next-token negative log-likelihood in nats.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    if logits.outer() != targets.len() || targets.is_empty() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let v = logits.last_dim();
    let mut total = 0.0;
    for (row, &t) in logits.rows().zip(targets) {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let lse = m + row.iter().map(|x| (x.f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[t].f64();
    }
    Ok(total / targets.len() as f64)
}
