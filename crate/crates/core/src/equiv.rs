//! Dual-path equivalence suites: each case computes one quantity two
//! independent ways and reports the largest disagreement.

use std::fmt;
use std::str::FromStr;

use crate::config::{GatingMode, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::grad::grad_check;
use crate::kernel::counter::{matmul_counts, reset_matmul_counts};
use crate::kernel::{DType, Init, Real, Rng, Tensor};
use crate::latent::{apply_gate, compute_gate, expand_second_order, GateSource, LnParams};
use crate::model::{decode, forward_full, forward_incremental, AttnWeights, ModelWeights, Sampler};
use crate::shard::{make_plan, shard_memory_report, sharded_gate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Decode,
    Gating,
    GateTable,
    Shard,
    SecondOrder,
    Grad,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Decode,
        Suite::Gating,
        Suite::GateTable,
        Suite::Shard,
        Suite::SecondOrder,
        Suite::Grad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Decode => "decode",
            Suite::Gating => "gating",
            Suite::GateTable => "gate-table",
            Suite::Shard => "shard",
            Suite::SecondOrder => "secondorder",
            Suite::Grad => "grad",
        }
    }

    /// Seeds used when the caller does not choose.
    pub fn default_seeds(self) -> usize {
        match self {
            Suite::Decode => 10,
            Suite::SecondOrder => 20,
            _ => 1,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|x| x.as_str()).collect();
            Error::Invalid(format!("unknown suite '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tol: f64,
    pub pass: bool,
    pub note: String,
}

impl CaseResult {
    fn abs(case: String, max_abs: f64, max_rel: f64, tol: f64) -> Self {
        CaseResult { case, max_abs, max_rel, tol, pass: max_abs <= tol, note: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.pass)
    }

    pub fn max_abs(&self) -> f64 {
        self.cases.iter().map(|c| c.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,case,max_abs,max_rel,tol,status,note\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{},{},{:.3e},{:.3e},{:.0e},{},{}\n",
                self.suite,
                c.case,
                c.max_abs,
                c.max_rel,
                c.tol,
                if c.pass { "PASS" } else { "FAIL" },
                c.note
            ));
        }
        out
    }
}

/// Prefill/decode tolerance at the given precision.
pub fn decode_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-10,
        DType::F32 => 1e-4,
    }
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn as_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

/// Max abs and rel logit difference between one-pass prefill and
/// token-by-token decoding of `t_len` random tokens, at `dtype`.
pub fn decode_case(cfg: &ModelConfig, seed: u64, t_len: usize, dtype: DType) -> Result<(f64, f64)> {
    let w = ModelWeights::build(cfg, &mut Rng::new(seed))?;
    let tokens = random_tokens(&mut Rng::new(seed ^ 0x5eed), t_len.min(cfg.max_seq_len), cfg.vocab_size);
    let (full, inc) = match dtype {
        DType::F64 => (as_f64(&forward_full(&w, &tokens)?), as_f64(&forward_incremental(&w, &tokens)?)),
        DType::F32 => {
            let w = w.cast::<f32>();
            (as_f64(&forward_full(&w, &tokens)?), as_f64(&forward_incremental(&w, &tokens)?))
        }
    };
    let abs = full.iter().zip(&inc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((abs, max_rel_diff(&full, &inc)))
}

fn decode_suite(models: &[ModelConfig], seeds: usize, dtype: DType) -> Result<Vec<CaseResult>> {
    let tol = decode_tolerance(dtype);
    let mut cases = Vec::new();
    for cfg in models {
        let mut lgzs = vec![cfg.lgz];
        if cfg.lgz == 1 && cfg.n_layer % 2 == 0 {
            lgzs.push(2);
        }
        for lgz in lgzs {
            let c = ModelConfig { lgz, ..cfg.clone() };
            let (mut abs, mut rel) = (0.0f64, 0.0f64);
            for s in 0..seeds as u64 {
                let (a, r) = decode_case(&c, cfg.seed + s, 16, dtype)?;
                abs = abs.max(a);
                rel = rel.max(r);
            }
            cases.push(CaseResult::abs(format!("{} lgz={lgz} {}", cfg.name, dtype.name()), abs, rel, tol));
        }
    }
    Ok(cases)
}

/// Scalar-loop reference for every gating mode.
fn gate_oracle(kv: &Tensor, g: &Tensor, mode: GatingMode, ln: &LnParams, eps: f64) -> Tensor {
    let d = kv.last_dim();
    let mut out = Vec::with_capacity(kv.len());
    for r in 0..kv.outer() {
        let pre: Vec<f64> = (0..d)
            .map(|c| match mode {
                GatingMode::AddLn => kv.at(r, c) + g.at(r, c),
                _ => kv.at(r, c) * g.at(r, c),
            })
            .collect();
        if !mode.uses_ln() {
            out.extend(pre);
            continue;
        }
        let mean = pre.iter().sum::<f64>() / d as f64;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (c, v) in pre.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * ln.gamma.data()[c] + ln.beta.data()[c]);
        }
    }
    Tensor::new(kv.shape(), out).expect("shape preserved")
}

/// EG-MLA with every gate forced to exactly 1 under `mul_noln`, and the
/// same weights with the gate removed.
fn unit_gate_pair(cfg: &ModelConfig, seed: u64) -> Result<(ModelWeights, ModelWeights)> {
    let gated_cfg = ModelConfig { variant: Variant::EgMla, gating_mode: GatingMode::MulNoLn, ..cfg.clone() };
    let mut gated = ModelWeights::build(&gated_cfg, &mut Rng::new(seed))?;
    let mut plain_blocks = gated.blocks.clone();
    for b in &mut gated.blocks {
        if let AttnWeights::Latent(a) = &mut b.attn {
            let g = a.gate.as_mut().expect("gated layer");
            g.emb = Tensor::filled(g.emb.shape(), 1.0);
            g.w_ue = Tensor::zeros(g.w_ue.shape());
            g.w_ue.row_mut(0).fill(1.0);
        }
    }
    gated.refresh_gate_tables()?;
    for b in &mut plain_blocks {
        if let AttnWeights::Latent(a) = &mut b.attn {
            a.gate = None;
        }
    }
    let plain_cfg = ModelConfig { variant: Variant::Mla, kv_emb_dim: 0, ..gated_cfg };
    let plain = ModelWeights::assemble(
        plain_cfg,
        gated.tok_emb.clone(),
        gated.groups.clone(),
        plain_blocks,
        gated.final_norm.clone(),
        gated.unembed.clone(),
    )?;
    Ok((gated, plain))
}

fn gated_models(models: &[ModelConfig]) -> Vec<ModelConfig> {
    let gated: Vec<ModelConfig> = models.iter().filter(|m| m.variant.is_gated()).cloned().collect();
    if gated.is_empty() {
        vec![ModelConfig::desk(Variant::EgMla)]
    } else {
        gated
    }
}

fn gating_suite(models: &[ModelConfig], seeds: usize) -> Result<Vec<CaseResult>> {
    let mut cases = Vec::new();
    for cfg in gated_models(models) {
        let width = cfg.latent().kv_width();
        for mode in GatingMode::ALL {
            let (mut abs, mut rel) = (0.0f64, 0.0f64);
            for s in 0..seeds as u64 {
                let mut rng = Rng::new(cfg.seed + s);
                let mut draw = |r, c| crate::kernel::init_linear::<f64>(&mut rng, r, c, Init::Normal(1.0));
                let kv = draw(5, width)?;
                let g = draw(5, width)?;
                let ln = LnParams { gamma: draw(1, width)?.reshape(&[width])?, beta: draw(1, width)?.reshape(&[width])? };
                let got = apply_gate(&kv, &g, mode, mode.uses_ln().then_some(&ln), cfg.norm_eps)?;
                let want = gate_oracle(&kv, &g, mode, &ln, cfg.norm_eps);
                abs = abs.max(got.max_abs_diff(&want));
                rel = rel.max(max_rel_diff(got.data(), want.data()));
            }
            cases.push(CaseResult::abs(format!("{} {mode} vs scalar oracle", cfg.name), abs, rel, 1e-12));
        }
        let mut abs = 0.0f64;
        let mut identical = true;
        for s in 0..seeds as u64 {
            let (gated, plain) = unit_gate_pair(&cfg, cfg.seed + s)?;
            let tokens = random_tokens(&mut Rng::new(s), 12.min(cfg.max_seq_len), cfg.vocab_size);
            let a = forward_full(&gated, &tokens)?;
            let b = forward_full(&plain, &tokens)?;
            abs = abs.max(a.max_abs_diff(&b));
            identical &= a.bit_eq(&b);
        }
        cases.push(CaseResult {
            case: format!("{} unit gate mul_noln vs mla", cfg.name),
            max_abs: abs,
            max_rel: 0.0,
            tol: 0.0,
            pass: identical,
            note: if identical { "bit-identical".into() } else { "logits differ".into() },
        });
    }
    Ok(cases)
}

/// Result of comparing greedy decoding with and without the gate table.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTableCheck {
    pub tokens_equal: bool,
    pub logits_bit_equal: bool,
    pub max_abs: f64,
    /// Gate-path matmuls over the whole decode (prefill included).
    pub gate_matmuls_direct: u64,
    pub gate_matmuls_table: u64,
}

impl GateTableCheck {
    pub fn passed(&self) -> bool {
        self.tokens_equal && self.logits_bit_equal && self.gate_matmuls_table == 0
    }
}

/// Greedy-decodes `n_new` tokens with EG-MLA and EG-MLA-A on the same weights.
pub fn gate_table_case(cfg: &ModelConfig, seed: u64, n_new: usize) -> Result<GateTableCheck> {
    let cfg = ModelConfig { variant: Variant::EgMla, ..cfg.clone() };
    let direct = ModelWeights::build(&cfg, &mut Rng::new(seed))?;
    let table = direct.with_variant(Variant::EgMlaA)?;
    let prompt = random_tokens(&mut Rng::new(seed ^ 0x7ab1e), 4, cfg.vocab_size);
    reset_matmul_counts();
    let a = decode(&direct, &prompt, n_new, &mut Sampler::Greedy)?;
    let gate_matmuls_direct = matmul_counts().gate;
    reset_matmul_counts();
    let b = decode(&table, &prompt, n_new, &mut Sampler::Greedy)?;
    let gate_matmuls_table = matmul_counts().gate;
    let mut max_abs = 0.0f64;
    let mut bit_equal = a.step_logits.len() == b.step_logits.len();
    for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
        for (p, q) in x.iter().zip(y) {
            max_abs = max_abs.max((p - q).abs());
            bit_equal &= p.to_bits() == q.to_bits();
        }
    }
    Ok(GateTableCheck {
        tokens_equal: a.tokens == b.tokens,
        logits_bit_equal: bit_equal,
        max_abs,
        gate_matmuls_direct,
        gate_matmuls_table,
    })
}

fn gate_table_suite(models: &[ModelConfig], seeds: usize) -> Result<Vec<CaseResult>> {
    let mut cases = Vec::new();
    for cfg in gated_models(models) {
        let n_new = 20.min(cfg.max_seq_len.saturating_sub(4)).max(1);
        for s in 0..seeds as u64 {
            let c = gate_table_case(&cfg, cfg.seed + s, n_new)?;
            cases.push(CaseResult {
                case: format!("{} seed={} {n_new}-token greedy", cfg.name, cfg.seed + s),
                max_abs: c.max_abs,
                max_rel: 0.0,
                tol: 0.0,
                pass: c.passed(),
                note: format!(
                    "gate matmuls direct={} table={}{}",
                    c.gate_matmuls_direct,
                    c.gate_matmuls_table,
                    if c.tokens_equal { "" } else { " tokens differ" }
                ),
            });
        }
    }
    Ok(cases)
}

/// Sharded vs single-worker gate for every layer of a model built from
/// `cfg`; also checks the per-worker `W_ue` share is exactly `1/W`.
pub fn shard_case(cfg: &ModelConfig, seed: u64, workers: usize, n_ids: usize) -> Result<CaseResult> {
    let cfg = ModelConfig { variant: Variant::EgMla, ..cfg.clone() };
    let w = ModelWeights::build(&cfg, &mut Rng::new(seed))?;
    let ids = random_tokens(&mut Rng::new(seed ^ 0x5a4d), n_ids, cfg.vocab_size);
    let mut identical = true;
    let mut split_exact = true;
    let mut abs = 0.0f64;
    for b in &w.blocks {
        let AttnWeights::Latent(a) = &b.attn else { continue };
        let g = a.gate.as_ref().expect("gated layer");
        let reference = compute_gate(&ids, GateSource::Weights(g))?;
        let plan = make_plan(a, workers)?;
        for parallel in [false, true] {
            let got = sharded_gate(&plan, &ids, parallel)?;
            abs = abs.max(got.max_abs_diff(&reference));
            identical &= got.bit_eq(&reference);
        }
        let report = shard_memory_report(&plan);
        split_exact &= report.rows.iter().all(|r| r.w_ue_elements * workers == g.w_ue.len());
    }
    Ok(CaseResult {
        case: format!("{} W={workers}", cfg.name),
        max_abs: abs,
        max_rel: 0.0,
        tol: 0.0,
        pass: identical && split_exact,
        note: format!(
            "{}{}",
            if identical { "bit-identical" } else { "gate differs" },
            if split_exact { "" } else { "; uneven w_ue split" }
        ),
    })
}

fn shard_suite(models: &[ModelConfig], seeds: usize, workers: &[usize], n_ids: usize) -> Result<Vec<CaseResult>> {
    let mut cases = Vec::new();
    for cfg in gated_models(models) {
        for &wk in workers {
            for s in 0..seeds as u64 {
                cases.push(shard_case(&cfg, cfg.seed + s, wk, n_ids)?);
            }
        }
    }
    Ok(cases)
}

/// Trials of the fused-vs-expanded gate product with random sizes ≤ 8.
pub fn second_order_trials(seed: u64, trials: usize) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let (mut abs, mut rel) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (d, d1, d2) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
        let n = Init::Normal(1.0);
        let w1 = crate::kernel::init_linear::<f64>(&mut rng, d, d1, n)?;
        let w2 = crate::kernel::init_linear::<f64>(&mut rng, d, d2, n)?;
        let x1 = crate::kernel::init_linear::<f64>(&mut rng, 1, d1, n)?.reshape(&[d1])?;
        let x2 = crate::kernel::init_linear::<f64>(&mut rng, 1, d2, n)?.reshape(&[d2])?;
        let (fused, expanded) = expand_second_order(&w1, &w2, &x1, &x2)?;
        abs = abs.max(fused.max_abs_diff(&expanded));
        rel = rel.max(max_rel_diff(fused.data(), expanded.data()));
    }
    Ok((abs, rel))
}

fn second_order_suite(seeds: usize) -> Result<Vec<CaseResult>> {
    (0..seeds as u64)
        .map(|s| {
            let (abs, rel) = second_order_trials(s, 5)?;
            Ok(CaseResult::abs(format!("seed={s} 5 trials"), abs, rel, 1e-10))
        })
        .collect()
}

/// Worst finite-difference relative error per tensor of a model built from
/// `cfg`, probing `per_tensor` coordinates with step `h`.
pub fn grad_case(cfg: &ModelConfig, seed: u64, per_tensor: usize, h: f64) -> Result<Vec<(String, f64, f64)>> {
    let w = ModelWeights::build(cfg, &mut Rng::new(seed))?;
    let mut rng = Rng::new(seed ^ 0x9dad);
    let n = 8.min(cfg.max_seq_len);
    let s = random_tokens(&mut rng, n + 1, cfg.vocab_size);
    let targets: Vec<Option<usize>> = s[1..].iter().map(|&t| Some(t)).collect();
    let probes = grad_check(&w, &s[..n], &targets, per_tensor, h, &mut rng)?;
    let mut worst: Vec<(String, f64, f64)> = Vec::new();
    for p in probes {
        let abs = (p.analytic - p.numeric).abs();
        match worst.iter_mut().find(|(name, _, _)| *name == p.name) {
            Some(e) => {
                e.1 = e.1.max(abs);
                e.2 = e.2.max(p.rel_err);
            }
            None => worst.push((p.name, abs, p.rel_err)),
        }
    }
    Ok(worst)
}

fn grad_suite(models: &[ModelConfig], seeds: usize) -> Result<Vec<CaseResult>> {
    let mut cases = Vec::new();
    for cfg in models {
        for s in 0..seeds as u64 {
            for (name, abs, rel) in grad_case(cfg, cfg.seed + s, 5, 1e-5)? {
                cases.push(CaseResult {
                    case: format!("{} seed={} {name}", cfg.name, cfg.seed + s),
                    max_abs: abs,
                    max_rel: rel,
                    tol: 1e-4,
                    pass: rel <= 1e-4,
                    note: String::new(),
                });
            }
        }
    }
    Ok(cases)
}

/// Options shared by the suites.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub dtype: DType,
    pub workers: Vec<usize>,
    pub n_ids: usize,
}

pub fn run_suite(suite: Suite, models: &[ModelConfig], opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.seeds == 0 {
        return Err(Error::Invalid("at least one seed required".into()));
    }
    let cases = match suite {
        Suite::Decode => decode_suite(models, opts.seeds, opts.dtype)?,
        Suite::Gating => gating_suite(models, opts.seeds)?,
        Suite::GateTable => gate_table_suite(models, opts.seeds)?,
        Suite::Shard => shard_suite(models, opts.seeds, &opts.workers, opts.n_ids)?,
        Suite::SecondOrder => second_order_suite(opts.seeds)?,
        Suite::Grad => grad_suite(models, opts.seeds)?,
    };
    Ok(SuiteReport { suite, cases })
}
