use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use specshape_cli::{emit_report, run_config, ExperimentConfig, Scenario};

/// Runs a specshape scenario and writes `report.json` plus per-section CSVs.
#[derive(Parser)]
#[command(name = "specshape", version)]
struct Args {
    scenario: Scenario,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the reports.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SPECSHAPE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPECSHAPE_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> anyhow::Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    threads()?;
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::parse(&text, Some(args.scenario), args.seeds)?;
    cfg.out = None;
    let bundle = run_config(&cfg)?;
    for path in emit_report(&bundle, &args.out)? {
        println!("{}", path.display());
    }
    for s in &bundle.sections {
        let ok = s.runs.iter().filter(|r| r.passed).count();
        eprintln!("{}: {ok}/{} seeds passed -> {}", s.scenario.name(), s.runs.len(), if s.passed { "PASS" } else { "FAIL" });
    }
    Ok(ExitCode::from(u8::from(!bundle.passed)))
}
