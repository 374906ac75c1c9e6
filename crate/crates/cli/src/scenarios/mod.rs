//! One module per scenario. Each exposes its parameter struct, its CSV metric
//! columns, and a per-seed `run`.

pub mod amun;
pub mod circulant;
pub mod clip;
pub mod fastclip;
pub mod lotos;
pub mod miann;
pub mod random_ops;
pub mod spectrum;
pub mod trw;
pub mod verify_all;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, Scenario, ScenarioParams};
use crate::error::{CliError, Result};
use crate::report::{emit_report, PassRule, ReportBundle, RunReport, RunStatus, Section, SCHEMA_VERSION};

/// Result of one seed of one scenario.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub passed: bool,
    pub metrics: Vec<(&'static str, Option<f64>)>,
    pub detail: serde_json::Value,
}

impl Outcome {
    pub fn new(passed: bool) -> Self {
        Outcome {
            passed,
            ..Default::default()
        }
    }

    /// Records a metric; non-finite values are stored as undefined.
    pub fn metric(mut self, name: &'static str, v: f64) -> Self {
        self.metrics.push((name, v.is_finite().then_some(v)));
        self
    }

    pub fn maybe(mut self, name: &'static str, v: Option<f64>) -> Self {
        self.metrics.push((name, v.filter(|x| x.is_finite())));
        self
    }

    pub fn detail(mut self, d: serde_json::Value) -> Self {
        self.detail = d;
        self
    }
}

pub(crate) fn ensure(ok: bool, path: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(path, message))
    }
}

pub fn validate(params: &ScenarioParams) -> Result<()> {
    match params {
        ScenarioParams::Spectrum(p) => p.validate(),
        ScenarioParams::Clip(p) => p.validate(),
        ScenarioParams::Fastclip(p) => p.validate(),
        ScenarioParams::CirculantVerify(p) => p.validate(),
        ScenarioParams::Lotos(p) => p.validate(),
        ScenarioParams::Amun(p) => p.validate(),
        ScenarioParams::Trw(p) => p.validate(),
        ScenarioParams::Miann(p) => p.validate(),
        ScenarioParams::VerifyAll(p) => p.validate(),
    }
}

/// Runs `run` for every seed (in parallel) and assembles the section in seed order.
pub(crate) fn section(
    scenario: Scenario,
    columns: &[&str],
    rule: PassRule,
    seeds: &[u64],
    run: impl Fn(u64) -> Result<Outcome> + Sync,
) -> Section {
    let runs: Vec<RunReport> = seeds
        .par_iter()
        .map(|&seed| match run(seed) {
            Ok(o) => {
                debug_assert!(o.metrics.iter().all(|(n, _)| columns.contains(n)), "undeclared metric");
                RunReport {
                    seed,
                    status: RunStatus::Ok,
                    error: None,
                    passed: o.passed,
                    metrics: o.metrics.into_iter().map(|(n, v)| (n.to_string(), v)).collect::<BTreeMap<_, _>>(),
                    detail: o.detail,
                }
            }
            Err(e) => {
                log::warn!("{} seed {seed} failed: {e}", scenario.name());
                RunReport {
                    seed,
                    status: RunStatus::Failed,
                    error: Some(e.to_string()),
                    passed: false,
                    metrics: BTreeMap::new(),
                    detail: serde_json::Value::Null,
                }
            }
        })
        .collect();
    let passed = rule.judge(&runs);
    Section {
        scenario,
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rule,
        runs,
        passed,
    }
}

/// Executes every seed of the configured scenario; writes reports when `cfg.out` is set.
pub fn run_config(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let seeds = &cfg.seeds;
    let sections = match &cfg.params {
        ScenarioParams::Spectrum(p) => vec![spectrum::section(p, seeds)],
        ScenarioParams::Clip(p) => vec![clip::section(p, seeds)],
        ScenarioParams::Fastclip(p) => vec![fastclip::section(p, seeds)],
        ScenarioParams::CirculantVerify(p) => vec![circulant::section(p, seeds)],
        ScenarioParams::Lotos(p) => vec![lotos::section(p, seeds)],
        ScenarioParams::Amun(p) => vec![amun::section(p, seeds)],
        ScenarioParams::Trw(p) => vec![trw::section(p, seeds)],
        ScenarioParams::Miann(p) => vec![miann::section(p, seeds)],
        ScenarioParams::VerifyAll(p) => verify_all::sections(p, seeds),
    };
    let passed = sections.iter().all(|s| s.passed);
    let bundle = ReportBundle {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.scenario,
        config_hash: cfg.hash(),
        config: serde_json::from_str(&cfg.canonical_json())?,
        sections,
        passed,
    };
    if let Some(dir) = &cfg.out {
        emit_report(&bundle, dir)?;
    }
    Ok(bundle)
}
