//! Prefill and decode microbenchmarks with median-of-repeats timing.

use std::time::Instant;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::kernel::counter::{matmul_counts, reset_matmul_counts};
use crate::kernel::{Real, Rng};
use crate::model::{argmax, forward_with_cache, ModelCache, ModelWeights};
use crate::runconfig::BenchConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub variant: Variant,
    pub prompt_len: usize,
    pub batch: usize,
    pub n_new: usize,
    pub repeats: usize,
    pub prefill_ms: f64,
    /// Empty when `n_new == 0`.
    pub decode_ms_per_token: Option<f64>,
    pub tokens_per_s: Option<f64>,
    /// Gate-path matmuls per generated token after prefill.
    pub gate_matmuls_per_token: Option<f64>,
    /// FNV-1a over every generated token, for run-to-run comparison.
    pub tokens_digest: u64,
    pub generated: Vec<Vec<usize>>,
}

pub const BENCH_COLUMNS: &str =
    "model,variant,prompt_len,batch,n_new,repeats,prefill_ms,decode_ms_per_token,tokens_per_s,gate_matmuls_per_token,tokens_digest";

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_COLUMNS}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{},{},{},{:016x}\n",
            r.model,
            r.variant,
            r.prompt_len,
            r.batch,
            r.n_new,
            r.repeats,
            r.prefill_ms,
            opt(r.decode_ms_per_token, 4),
            opt(r.tokens_per_s, 1),
            opt(r.gate_matmuls_per_token, 2),
            r.tokens_digest
        ));
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fnv1a(tokens: &[Vec<usize>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens.iter().flatten() {
        for b in (*t as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn validate(opts: &BenchConfig, cfg: &ModelConfig) -> Result<()> {
    if opts.repeats < 3 {
        return Err(Error::config(format!("bench.repeats must be ≥ 3, got {}", opts.repeats)));
    }
    if opts.prompt_len == 0 || opts.batch == 0 {
        return Err(Error::config("bench.prompt_len and bench.batch must be positive"));
    }
    if opts.prompt_len + opts.n_new > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "prompt_len {} + n_new {} exceeds max_seq_len {}",
            opts.prompt_len, opts.n_new, cfg.max_seq_len
        )));
    }
    Ok(())
}

/// Times greedy generation on `batch` independent sessions.
pub fn bench_weights<T: Real>(w: &ModelWeights<T>, opts: &BenchConfig) -> Result<BenchRow> {
    let cfg = &w.config;
    validate(opts, cfg)?;
    let mut rng = Rng::new(cfg.seed ^ 0xbe7c);
    let prompts: Vec<Vec<usize>> = (0..opts.batch)
        .map(|_| (0..opts.prompt_len).map(|_| rng.below(cfg.vocab_size)).collect())
        .collect();
    let mut prefill = Vec::with_capacity(opts.repeats);
    let mut decode = Vec::with_capacity(opts.repeats);
    let mut generated = Vec::new();
    let mut gate_per_token = None;
    for rep in 0..opts.repeats {
        let mut caches: Vec<ModelCache<T>> = prompts.iter().map(|_| ModelCache::new(cfg)).collect();
        let mut last = Vec::with_capacity(opts.batch);
        let t0 = Instant::now();
        for (p, c) in prompts.iter().zip(&mut caches) {
            let (logits, _) = forward_with_cache(w, p, c, false)?;
            last.push(argmax(logits.row(logits.outer() - 1)));
        }
        prefill.push(t0.elapsed().as_secs_f64() * 1e3);
        if opts.n_new == 0 {
            continue;
        }
        let mut out: Vec<Vec<usize>> = last.iter().map(|&t| vec![t]).collect();
        reset_matmul_counts();
        let t1 = Instant::now();
        for _ in 1..opts.n_new {
            for (b, c) in caches.iter_mut().enumerate() {
                let prev = *out[b].last().expect("seeded with one token");
                let (logits, _) = forward_with_cache(w, &[prev], c, false)?;
                out[b].push(argmax(logits.row(0)));
            }
        }
        decode.push(t1.elapsed().as_secs_f64() * 1e3);
        if rep == 0 {
            let steps = (opts.n_new - 1) * opts.batch;
            gate_per_token = Some(if steps == 0 { 0.0 } else { matmul_counts().gate as f64 / steps as f64 });
            generated = out;
        }
    }
    // The first token of each session comes from the prefill logits.
    let decode_ms = (opts.n_new > 0).then(|| median(decode) / (opts.n_new * opts.batch) as f64);
    Ok(BenchRow {
        model: cfg.name.clone(),
        variant: cfg.variant,
        prompt_len: opts.prompt_len,
        batch: opts.batch,
        n_new: opts.n_new,
        repeats: opts.repeats,
        prefill_ms: median(prefill),
        decode_ms_per_token: decode_ms,
        tokens_per_s: decode_ms.map(|ms| if ms > 0.0 { 1e3 / ms } else { f64::INFINITY }),
        gate_matmuls_per_token: gate_per_token,
        tokens_digest: fnv1a(&generated),
        generated,
    })
}

/// Benchmarks `cfg`; a gated model is also run as its counterpart
/// (EG-MLA ↔ EG-MLA-A) on identical weights.
pub fn run_bench(cfg: &ModelConfig, opts: &BenchConfig, f32: bool) -> Result<Vec<BenchRow>> {
    validate(opts, cfg)?;
    let w = ModelWeights::build(cfg, &mut Rng::new(cfg.seed))?;
    let mut models = vec![w.clone()];
    match cfg.variant {
        Variant::EgMla => models.push(w.with_variant(Variant::EgMlaA)?),
        Variant::EgMlaA => models.insert(0, w.with_variant(Variant::EgMla)?),
        _ => {}
    }
    models
        .iter()
        .map(|m| if f32 { bench_weights(&m.cast::<f32>(), opts) } else { bench_weights(m, opts) })
        .collect()
}
