//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lgat::checkpoint::{load, save};
use lgat::config::{GatingMode, ModelConfig, Variant};
use lgat::equiv::{decode_case, gate_table_case, grad_case, second_order_trials, shard_case};
use lgat::grad::{train_toy, TrainConfig};
use lgat::kernel::{dot, init_linear, DType, Init, Rng, Tensor};
use lgat::model::{decode, ModelWeights, Sampler};
use lgat::rope::{apply_rope, build_freqs, DEFAULT_ROPE_BASE};
use lgat::runconfig::RunConfig;

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn desk_models() -> Vec<ModelConfig> {
    RunConfig::load(&fixtures().join("desk.cfg"), &[]).expect("desk.cfg").models
}

fn within(t0: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = t0.elapsed();
    if took > limit {
        return Err(format!("{what} took {took:.2?}, limit {limit:?}"));
    }
    Ok(())
}

fn cache_audit_parity() -> Outcome {
    let t0 = Instant::now();
    let cfg = fixtures().join("appendix_f.cfg");
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = lgat::cli::run(
        ["lgat", "cache-audit", "--csv", "--config", cfg.to_str().unwrap()],
        &mut out,
        &mut err,
    );
    within(t0, Duration::from_secs(1), "audit")?;
    if code != 0 {
        return Err(String::from_utf8_lossy(&err).into_owned());
    }
    let csv = String::from_utf8(out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    let elems: Vec<&str> = rows.iter().map(|r| r[3]).collect();
    let want = ["18432", "3840", "3840", "2304", "1536", "960"];
    if elems != want {
        return Err(format!("elements/token {elems:?} for {names:?}"));
    }
    let kv64 = rows.iter().find(|r| r[0] == "EG-MLA-Base-kv64").ok_or("no kv64 row")?;
    if (kv64[6], kv64[7]) != ("91.6", "59.9") {
        return Err(format!("kv64 reductions {} / {}", kv64[6], kv64[7]));
    }
    Ok(format!("{} in {:.0?}, kv64 91.6% vs MHA, 59.9% vs MLA", want.join("/"), t0.elapsed()))
}

fn prefill_decode() -> Outcome {
    let t0 = Instant::now();
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let models = desk_models();
    for cfg in &models {
        for lgz in [1, 2] {
            let c = ModelConfig { lgz, ..cfg.clone() };
            for seed in 0..10 {
                let (a64, _) = decode_case(&c, seed, 16, DType::F64).map_err(|e| e.to_string())?;
                let (a32, _) = decode_case(&c, seed, 16, DType::F32).map_err(|e| e.to_string())?;
                if a64 > 1e-10 || a32 > 1e-4 {
                    return Err(format!("{} lgz={lgz} seed={seed}: f64 {a64:.2e}, f32 {a32:.2e}", c.name));
                }
                worst64 = worst64.max(a64);
                worst32 = worst32.max(a32);
            }
        }
    }
    within(t0, Duration::from_secs(60), "equivalence")?;
    Ok(format!(
        "{} variants x lgz 1,2 x 10 seeds; max |dlogit| f64 {worst64:.1e}, f32 {worst32:.1e}",
        models.len()
    ))
}

fn second_order() -> Outcome {
    let t0 = Instant::now();
    let (abs, _) = second_order_trials(2024, 100).map_err(|e| e.to_string())?;
    within(t0, Duration::from_secs(1), "expansion")?;
    if abs > 1e-10 {
        return Err(format!("max abs {abs:.2e}"));
    }
    Ok(format!("100 trials, max abs {abs:.1e}"))
}

fn grad_models() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for cfg in desk_models() {
        for lgz in [1, 2] {
            out.push(ModelConfig { lgz, ..cfg.clone() });
        }
    }
    out
}

fn check_grads(models: &[ModelConfig]) -> Result<(usize, f64), String> {
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for cfg in models {
        let rows = grad_case(cfg, cfg.seed, 5, 1e-5).map_err(|e| e.to_string())?;
        for (name, _, rel) in &rows {
            if *rel > 1e-4 {
                return Err(format!("{} lgz={} {name}: rel {rel:.2e}", cfg.name, cfg.lgz));
            }
            worst = worst.max(*rel);
        }
        if cfg.variant.is_gated() {
            let mut wanted = vec!["tok_emb", "group.0.w_dkv", "layer.0.emb", "layer.1.w_ue"];
            if cfg.gating_mode.uses_ln() {
                wanted.extend(["layer.1.ln_gamma", "layer.0.ln_beta"]);
            }
            for want in wanted {
                if !rows.iter().any(|(n, _, _)| n == want) {
                    return Err(format!("{}: {want} was not probed", cfg.name));
                }
            }
        }
        tensors += rows.len();
    }
    Ok((tensors, worst))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let models = grad_models();
    let (tensors, worst) = check_grads(&models)?;
    within(t0, Duration::from_secs(300), "gradient check")?;
    Ok(format!("{tensors} tensors over {} models, max rel {worst:.1e}", models.len()))
}

fn gate_table() -> Outcome {
    let mut direct = 0;
    for mode in [GatingMode::MulLn, GatingMode::MulNoLn, GatingMode::AddLn] {
        let cfg = ModelConfig { gating_mode: mode, ..ModelConfig::desk(Variant::EgMla) };
        for seed in 0..3 {
            let c = gate_table_case(&cfg, seed, 20).map_err(|e| e.to_string())?;
            if !c.passed() {
                return Err(format!("{mode} seed={seed}: {c:?}"));
            }
            direct = c.gate_matmuls_direct;
        }
    }
    Ok(format!("20-token greedy bit-identical; gate matmuls {direct} direct, 0 with table"))
}

fn sharding() -> Outcome {
    let cfg = ModelConfig::desk(Variant::EgMla);
    for workers in [1, 2, 4] {
        let c = shard_case(&cfg, 3, workers, 50).map_err(|e| e.to_string())?;
        if !c.pass {
            return Err(format!("W={workers}: {}", c.note));
        }
    }
    Ok("W=1,2,4 bit-identical, w_ue split exactly".into())
}

fn grouping() -> Outcome {
    let cfg = ModelConfig { n_layer: 4, ..ModelConfig::desk(Variant::EgMla) };
    let count = |lgz| -> Result<usize, String> {
        let w = ModelWeights::build(&ModelConfig { lgz, ..cfg.clone() }, &mut Rng::new(0)).map_err(|e| e.to_string())?;
        Ok(w.tensors().iter().filter(|(n, _)| n.ends_with(".w_dkv")).count())
    };
    let (one, two) = (count(1)?, count(2)?);
    if one != 2 * two {
        return Err(format!("w_dkv matrices lgz=1 {one}, lgz=2 {two}"));
    }
    if ModelWeights::build(&ModelConfig { lgz: 3, ..cfg.clone() }, &mut Rng::new(0)).is_ok() {
        return Err("lgz=3 with 4 layers was accepted".into());
    }
    for c in desk_models() {
        let c = ModelConfig { lgz: 2, ..c };
        for seed in 0..10 {
            let (abs, _) = decode_case(&c, seed, 16, DType::F64).map_err(|e| e.to_string())?;
            if abs > 1e-10 {
                return Err(format!("{} lgz=2 decode differs by {abs:.2e}", c.name));
            }
        }
    }
    let grouped: Vec<ModelConfig> = grad_models().into_iter().filter(|c| c.lgz == 2).collect();
    check_grads(&grouped)?;
    Ok(format!("w_dkv {one} -> {two}; lgz=2 passes decode and gradient checks; lgz=3 rejected"))
}

fn training() -> Outcome {
    let t0 = Instant::now();
    let run = RunConfig::load(&fixtures().join("train_copy.cfg"), &[]).map_err(|e| e.to_string())?;
    let mut w = ModelWeights::build(run.model(), &mut Rng::new(run.model().seed)).map_err(|e| e.to_string())?;
    let report = train_toy(&run.train, &mut w).map_err(|e| e.to_string())?;
    let step = match report.reached_target {
        Some(s) if s < 3000 && report.final_loss() < 0.1 => s,
        _ => return Err(format!("final loss {:.4} after {} steps", report.final_loss(), report.losses.len())),
    };
    for mode in [GatingMode::MulLn, GatingMode::MulNoLn, GatingMode::AddLn] {
        let cfg = ModelConfig { gating_mode: mode, ..run.model().clone() };
        let mut w = ModelWeights::build(&cfg, &mut Rng::new(cfg.seed)).map_err(|e| e.to_string())?;
        let tc = TrainConfig { steps: 500, target_loss: None, ..run.train.clone() };
        let r = train_toy(&tc, &mut w).map_err(|e| format!("{mode}: {e}"))?;
        let finite = r.losses.len() == 500 && r.losses.iter().all(|l| l.is_finite());
        if !finite || w.tensors().iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(format!("{mode}: non-finite values"));
        }
    }
    within(t0, Duration::from_secs(600), "training")?;
    Ok(format!("copy loss < 0.1 at step {step}; mul_ln, mul_noln, add_ln 500 steps finite"))
}

fn rope() -> Outcome {
    let mut rng = Rng::new(9);
    let f = build_freqs(16, 64, DEFAULT_ROPE_BASE).map_err(|e| e.to_string())?;
    let (mut norm_err, mut rel_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x: Tensor = init_linear(&mut rng, 1, 16, Init::Normal(1.0)).unwrap();
        let k: Tensor = init_linear(&mut rng, 1, 16, Init::Normal(1.0)).unwrap();
        if !apply_rope(&x, &[0], &f).unwrap().bit_eq(&x) {
            return Err("position 0 is not the identity".into());
        }
        let (m, n, s) = (rng.below(32), rng.below(32), rng.below(32));
        let y = apply_rope(&x, &[m], &f).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            norm_err = norm_err.max((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs());
        }
        let score = |p: usize, q: usize| {
            dot(apply_rope(&x, &[p], &f).unwrap().data(), apply_rope(&k, &[q], &f).unwrap().data())
        };
        rel_err = rel_err.max((score(m, n) - score(m + s, n + s)).abs());
    }
    if norm_err > 1e-12 || rel_err > 1e-10 {
        return Err(format!("pair norm {norm_err:.2e}, relative {rel_err:.2e}"));
    }
    Ok(format!("identity at 0 bit-exact; pair norm {norm_err:.1e}; relative shift {rel_err:.1e}"))
}

fn checkpoint() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, cfg) in desk_models().into_iter().enumerate() {
        let cfg = ModelConfig { lgz: 1 + i % 2, ..cfg };
        let w = ModelWeights::build(&cfg, &mut Rng::new(i as u64)).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{}.lgat", cfg.name));
        save(&w, &path).map_err(|e| e.to_string())?;
        let back: ModelWeights = load(&path).map_err(|e| e.to_string())?;
        let (a, b) = (w.tensors(), back.tensors());
        if a.len() != b.len() || a.iter().zip(&b).any(|((n, x), (m, y))| n != m || !x.bit_eq(y)) {
            return Err(format!("{}: tensors differ after reload", cfg.name));
        }
        let prompt = [1, 2, 3, 4];
        let d0 = decode(&w, &prompt, 12, &mut Sampler::Greedy).map_err(|e| e.to_string())?;
        let d1 = decode(&back, &prompt, 12, &mut Sampler::Greedy).map_err(|e| e.to_string())?;
        let same = d0.tokens == d1.tokens
            && d0.step_logits.iter().flatten().zip(d1.step_logits.iter().flatten()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            return Err(format!("{}: decode differs after reload", cfg.name));
        }
    }
    Ok("every desk variant reloads bit-exact and decodes identically".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("cache-audit parity", cache_audit_parity),
        ("prefill/decode equivalence", prefill_decode),
        ("second-order expansion", second_order),
        ("gradient check", gradients),
        ("gate table", gate_table),
        ("sharding", sharding),
        ("layer grouping", grouping),
        ("toy training", training),
        ("rope properties", rope),
        ("checkpoint round-trip", checkpoint),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = f();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {:>2} {name}: {d} ({secs:.2}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
