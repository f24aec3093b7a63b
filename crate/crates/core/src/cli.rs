//! Command-line front end. [`run`] parses arguments and writes to the given
//! streams so the binary and the tests share one code path.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_csv, run_bench};
use crate::checkpoint::{checkpoint_bytes, load, save};
use crate::equiv::{run_suite, shard_case, Suite, SuiteOptions};
use crate::error::{Error, Result};
use crate::fixtures::verify_fixtures;
use crate::grad::{loss_csv, train_toy};
use crate::kernel::{DType, Rng};
use crate::kvcache::audit;
use crate::model::{decode, AttnWeights, ModelWeights, Sampler};
use crate::runconfig::{parse_override, RunConfig};
use crate::shard::{make_plan, shard_memory_report, SHARD_COLUMNS};

/// Exit status when a check fails.
pub const EXIT_FAIL: i32 = 1;
/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lgat", version, about = "Latent and embedding-gated attention toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Configuration file; `cache-audit` accepts several.
    #[arg(long, global = true)]
    pub config: Vec<PathBuf>,
    /// Model seed (also used as the training seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path for CSV or checkpoint output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub dtype: Option<String>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// KV-cache elements and bytes per token for each configured model.
    CacheAudit {
        /// Print CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Run an equivalence suite.
    Equivcheck {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Prefill and decode timings.
    Bench,
    /// Toy-task training; writes the loss curve.
    Train,
    /// Sharded gate equivalence and per-worker memory.
    Shardsim,
    /// Build a model from the config and write a checkpoint to `--out`.
    Save,
    /// Read a checkpoint, check it re-encodes identically, and decode.
    Load { path: PathBuf },
    /// Check the shipped fixtures.
    VerifyFixtures {
        #[arg(long, default_value = "fixtures")]
        dir: PathBuf,
    },
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Invalid(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Check(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn run_config(g: &GlobalArgs, allow_many: bool) -> Result<RunConfig> {
    let mut overrides = g.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(s) = g.seed {
        overrides.push(("seed".into(), s.to_string()));
        overrides.push(("train.seed".into(), s.to_string()));
    }
    if let Some(d) = &g.dtype {
        overrides.push(("dtype".into(), d.clone()));
    }
    let mut run = match g.config.as_slice() {
        [] => RunConfig::with_overrides(&overrides)?,
        [one] => RunConfig::load(one, &overrides)?,
        [first, rest @ ..] if allow_many => {
            let mut run = RunConfig::load(first, &overrides)?;
            for p in rest {
                run.models.extend(RunConfig::load(p, &overrides)?.models);
            }
            run
        }
        _ => return Err(Error::config("this command takes a single --config")),
    };
    if let Some(o) = &g.out {
        run.out = Some(o.clone());
    }
    Ok(run)
}

/// Writes `text` to `path` if given, else to `out`.
fn emit(text: &str, path: Option<&Path>, out: &mut dyn Write) -> std::io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text),
        None => out.write_all(text.as_bytes()),
    }
}

fn cache_audit(run: &RunConfig, csv: bool, out: &mut dyn Write) -> CmdResult {
    let report = audit(&run.models, run.dtype);
    if csv {
        emit(&report.to_csv(), run.out.as_deref(), out)?;
    } else {
        out.write_all(report.to_table().as_bytes())?;
        if let Some(p) = &run.out {
            std::fs::write(p, report.to_csv())?;
        }
    }
    Ok(())
}

fn equivcheck(run: &RunConfig, suite: Suite, seeds: Option<usize>, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let opts = SuiteOptions {
        seeds: seeds.unwrap_or(suite.default_seeds()),
        dtype: run.dtype,
        workers: run.shard.workers.clone(),
        n_ids: run.shard.n_ids,
    };
    let report = run_suite(suite, &run.models, &opts)?;
    emit(&report.to_csv(), run.out.as_deref(), out)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    writeln!(
        err,
        "{verdict} {suite}: {} cases, max abs {:.3e}, max rel {:.3e}",
        report.cases.len(),
        report.max_abs(),
        report.max_rel()
    )?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{suite} suite failed")))
    }
}

fn bench(run: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let mut rows = Vec::new();
    for m in &run.models {
        rows.extend(run_bench(m, &run.bench, run.dtype == DType::F32)?);
    }
    emit(&bench_csv(&rows), run.out.as_deref(), out)?;
    Ok(())
}

fn train(run: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = run.model();
    let mut w = ModelWeights::build(cfg, &mut Rng::new(cfg.seed))?;
    let report = train_toy(&run.train, &mut w)?;
    emit(&loss_csv(&report), run.out.as_deref(), out)?;
    writeln!(
        err,
        "{} {}: {} steps, loss {:.4} -> {:.4}",
        cfg.name,
        run.train.task.as_str(),
        report.losses.len(),
        report.initial_loss,
        report.final_loss()
    )?;
    match (run.train.target_loss, report.reached_target) {
        (Some(t), None) if run.train.steps > 0 => {
            writeln!(err, "FAIL target loss {t} not reached")?;
            Err(Failure::Check(format!("loss stayed above {t}")))
        }
        (Some(t), Some(step)) => {
            writeln!(err, "PASS loss < {t} at step {step}")?;
            Ok(())
        }
        _ => Ok(()),
    }
}

fn shardsim(run: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let gated: Vec<_> = run.models.iter().filter(|m| m.variant.is_gated()).collect();
    if gated.is_empty() {
        return Err(Failure::Usage("shardsim needs an eg-mla or eg-mla-a model".into()));
    }
    let mut csv = format!("model,workers,{SHARD_COLUMNS}\n");
    let mut ok = true;
    for cfg in gated {
        let w = ModelWeights::build(cfg, &mut Rng::new(cfg.seed))?;
        let AttnWeights::Latent(layer0) = &w.blocks[0].attn else { unreachable!("gated model") };
        for &workers in &run.shard.workers {
            let case = shard_case(cfg, cfg.seed, workers, run.shard.n_ids)?;
            writeln!(err, "{} {}: {}", if case.pass { "PASS" } else { "FAIL" }, case.case, case.note)?;
            ok &= case.pass;
            let report = shard_memory_report(&make_plan(layer0, workers)?);
            for line in report.to_csv().lines().skip(1) {
                csv.push_str(&format!("{},{workers},{line}\n", cfg.name));
            }
        }
    }
    emit(&csv, run.out.as_deref(), out)?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Check("sharded gate differs".into()))
    }
}

fn save_cmd(run: &RunConfig, err: &mut dyn Write) -> CmdResult {
    let path = run.out.as_deref().ok_or_else(|| Failure::Usage("save needs --out PATH".into()))?;
    let cfg = run.model();
    let w = ModelWeights::build(cfg, &mut Rng::new(cfg.seed))?;
    save(&w, path)?;
    writeln!(err, "wrote {} ({} parameters) to {}", cfg.name, w.tally().total(), path.display())?;
    Ok(())
}

fn load_cmd(path: &Path, out: &mut dyn Write) -> CmdResult {
    let w = load::<f64>(path)?;
    let on_disk = std::fs::read(path)?;
    let same = checkpoint_bytes(&w) == on_disk;
    let c = &w.config;
    let prompt: Vec<usize> = (0..4.min(c.max_seq_len)).map(|i| i % c.vocab_size).collect();
    let n_new = 8.min(c.max_seq_len + 1 - prompt.len());
    let d = decode(&w, &prompt, n_new, &mut Sampler::Greedy)?;
    let tokens: Vec<String> = d.tokens.iter().map(|t| t.to_string()).collect();
    writeln!(out, "model={} variant={} params={}", c.name, c.variant, w.tally().total())?;
    writeln!(out, "reencode={}", if same { "identical" } else { "DIFFERENT" })?;
    writeln!(out, "greedy={}", tokens.join(" "))?;
    if same {
        Ok(())
    } else {
        Err(Failure::Check("checkpoint does not re-encode identically".into()))
    }
}

fn verify(dir: &Path, out: &mut dyn Write) -> CmdResult {
    let report = verify_fixtures(dir)?;
    out.write_all(report.to_text().as_bytes())?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check("fixture mismatch".into()))
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let many = matches!(cli.command, Command::CacheAudit { .. });
    let run = run_config(&cli.global, many)?;
    match &cli.command {
        Command::CacheAudit { csv } => cache_audit(&run, *csv, out),
        Command::Equivcheck { suite, seeds } => equivcheck(&run, *suite, *seeds, out, err),
        Command::Bench => bench(&run, out),
        Command::Train => train(&run, out, err),
        Command::Shardsim => shardsim(&run, out, err),
        Command::Save => save_cmd(&run, err),
        Command::Load { path } => load_cmd(path, out),
        Command::VerifyFixtures { dir } => verify(dir, out),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Check(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_FAIL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("lgat").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn unknown_suite_is_a_usage_error() {
        let (code, _, err) = call(&["equivcheck", "bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("unknown suite"), "{err}");
    }

    #[test]
    fn unknown_override_is_a_usage_error() {
        let (code, _, err) = call(&["cache-audit", "--set", "colour=red"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("colour"));
    }

    #[test]
    fn audit_defaults_to_one_row() {
        let (code, out, _) = call(&["cache-audit", "--csv", "--set", "variant=mha", "--set", "kv_emb_dim=0"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 2);
        assert!(out.contains(",0.0,,0.0,"));
    }

    #[test]
    fn zero_step_training_writes_header_only() {
        let (code, out, _) = call(&["train", "--set", "train.steps=0"]);
        assert_eq!((code, out.as_str()), (0, "step,loss\n"));
    }

    #[test]
    fn save_requires_out() {
        assert_eq!(call(&["save"]).0, EXIT_USAGE);
    }
}
