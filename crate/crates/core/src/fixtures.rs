//! Checks for the shipped configuration fixtures.

use std::path::Path;

use crate::config::ModelConfig;
use crate::equiv::{decode_case, decode_tolerance};
use crate::error::{Error, Result};
use crate::kernel::DType;
use crate::kvcache::{audit, elements_per_token};
use crate::model::{ensure_runnable, param_counts};
use crate::runconfig::RunConfig;

/// Expected `(name, elements per token)` of `appendix_f.cfg`.
pub const APPENDIX_F_ROWS: [(&str, u64); 6] = [
    ("MHA-Base", 18432),
    ("MLA-Base", 3840),
    ("EG-MLA-Base-kv256", 3840),
    ("EG-MLA-Base-kv128", 2304),
    ("EG-MLA-Base-kv64", 1536),
    ("EG-MLA-Base-kv16", 960),
];

pub const GOLDEN_AUDIT: &str = "appendix_f_audit.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixtureReport {
    pub checks: Vec<FixtureCheck>,
}

impl FixtureReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }

    fn push(&mut self, name: &str, outcome: std::result::Result<String, String>) {
        let (pass, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(FixtureCheck { name: name.into(), pass, detail });
    }
}

/// Compares two CSV texts cell by cell. Returns the number of data rows on
/// success, or a message naming the first differing row and column.
pub fn compare_csv(actual: &str, golden: &str) -> std::result::Result<usize, String> {
    let a: Vec<&str> = actual.lines().collect();
    let g: Vec<&str> = golden.lines().collect();
    let header: Vec<&str> = g.first().map(|h| h.split(',').collect()).unwrap_or_default();
    if a.first() != g.first() {
        return Err(format!("header differs: expected '{}', got '{}'", g.first().unwrap_or(&""), a.first().unwrap_or(&"")));
    }
    for (i, (ra, rg)) in a.iter().zip(&g).enumerate().skip(1) {
        let ca: Vec<&str> = ra.split(',').collect();
        let cg: Vec<&str> = rg.split(',').collect();
        let row = cg.first().copied().unwrap_or("");
        for (j, col) in header.iter().enumerate() {
            let (x, y) = (ca.get(j).copied().unwrap_or(""), cg.get(j).copied().unwrap_or(""));
            if x != y {
                return Err(format!("row {i} ({row}) column {col}: expected '{y}', got '{x}'"));
            }
        }
        if ca.len() != cg.len() {
            return Err(format!("row {i} ({row}): expected {} fields, got {}", cg.len(), ca.len()));
        }
    }
    if a.len() != g.len() {
        return Err(format!("expected {} data rows, got {}", g.len().saturating_sub(1), a.len().saturating_sub(1)));
    }
    if actual != golden {
        return Err("line endings or trailing bytes differ".into());
    }
    Ok(g.len() - 1)
}

fn load(dir: &Path, file: &str) -> std::result::Result<RunConfig, String> {
    RunConfig::load(&dir.join(file), &[]).map_err(|e| format!("{file}: {e}"))
}

fn expect_elements(models: &[ModelConfig], want: &[(&str, u64)]) -> std::result::Result<String, String> {
    if models.len() != want.len() {
        return Err(format!("expected {} models, found {}", want.len(), models.len()));
    }
    for (m, (name, n)) in models.iter().zip(want) {
        let got = elements_per_token(m);
        if m.name != *name || got != *n {
            return Err(format!("row {}: expected {name} with {n} elements/token, got {got}", m.name));
        }
    }
    Ok(format!("{} rows matched", want.len()))
}

fn appendix_golden(dir: &Path) -> std::result::Result<String, String> {
    let run = load(dir, "appendix_f.cfg")?;
    let golden = std::fs::read_to_string(dir.join(GOLDEN_AUDIT)).map_err(|e| format!("{GOLDEN_AUDIT}: {e}"))?;
    let n = compare_csv(&audit(&run.models, DType::F64).cache_csv(), &golden)?;
    Ok(format!("{n} rows match {GOLDEN_AUDIT}"))
}

fn appendix_rows(dir: &Path) -> std::result::Result<String, String> {
    let run = load(dir, "appendix_f.cfg")?;
    expect_elements(&run.models, &APPENDIX_F_ROWS)?;
    let report = audit(&run.models, DType::F64);
    let kv64 = &report.rows[4];
    let shown = (kv64.pct_vs_mha.map(|p| format!("{p:.1}")), kv64.pct_vs_mla.map(|p| format!("{p:.1}")));
    if shown != (Some("91.6".into()), Some("59.9".into())) {
        return Err(format!("row {}: reductions {shown:?}, expected 91.6 / 59.9", kv64.name));
    }
    for m in &run.models {
        if ensure_runnable(m).is_ok() {
            return Err(format!("row {}: full-size config is small enough to instantiate", m.name));
        }
    }
    Ok("6 rows matched; kv64 reads 91.6 / 59.9".into())
}

fn base_kv(dir: &Path) -> std::result::Result<String, String> {
    let run = load(dir, "base_kv.cfg")?;
    expect_elements(
        &run.models,
        &[("base_kv256", 3840), ("base_kv128", 2304), ("base_kv64", 1536), ("base_kv16", 960)],
    )
}

fn emb_sweep(dir: &Path) -> std::result::Result<String, String> {
    let run = load(dir, "emb.cfg")?;
    let want: Vec<(String, u64)> = [64, 128, 256, 512, 1024, 2048]
        .iter()
        .map(|e| (format!("EG-MLA-Base-emb{e}"), 1536))
        .collect();
    let want_ref: Vec<(&str, u64)> = want.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    expect_elements(&run.models, &want_ref)?;
    let embeds: Vec<u64> = run.models.iter().map(|m| param_counts(m).embed).collect();
    if embeds.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(format!("embed parameters should double per row: {embeds:?}"));
    }
    Ok("cache constant at 1536 across embedding widths; embed params double".into())
}

fn desk_decode(dir: &Path) -> std::result::Result<String, String> {
    let run = load(dir, "desk.cfg")?;
    let tol = decode_tolerance(DType::F64);
    let mut worst = 0.0f64;
    for m in &run.models {
        for seed in 0..2 {
            let (abs, _) = decode_case(m, seed, 16, DType::F64).map_err(|e| format!("row {}: {e}", m.name))?;
            if abs > tol {
                return Err(format!("row {}: prefill/decode differ by {abs:.3e}", m.name));
            }
            worst = worst.max(abs);
        }
    }
    Ok(format!("{} runnable twins, max |Δlogit| {worst:.1e}", run.models.len()))
}

fn train_seed(dir: &Path) -> std::result::Result<String, String> {
    let run = load(dir, "train_copy.cfg")?;
    ensure_runnable(run.model()).map_err(|e| e.to_string())?;
    match run.train.target_loss {
        Some(t) => Ok(format!("seed {} targets loss < {t} in {} steps", run.train.seed, run.train.steps)),
        None => Err("train_copy.cfg sets no train.target_loss".into()),
    }
}

/// Runs every fixture check against the files in `dir`.
pub fn verify_fixtures(dir: &Path) -> Result<FixtureReport> {
    if !dir.is_dir() {
        return Err(Error::Fixture(format!("{} is not a directory", dir.display())));
    }
    let mut report = FixtureReport::default();
    report.push("appendix_f golden", appendix_golden(dir));
    report.push("appendix_f rows", appendix_rows(dir));
    report.push("base_kv rows", base_kv(dir));
    report.push("emb rows", emb_sweep(dir));
    report.push("desk decode", desk_decode(dir));
    report.push("train seed", train_seed(dir));
    Ok(report)
}
