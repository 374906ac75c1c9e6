//! Report bundles and their JSON/CSV serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Columns that precede the scenario's metric columns in every CSV.
pub const LEADING_COLUMNS: [&str; 5] = ["scenario", "seed", "config_hash", "status", "passed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub passed: bool,
    /// `None` marks an undefined value, e.g. a rate with an empty denominator.
    pub metrics: BTreeMap<String, Option<f64>>,
    #[serde(default)]
    pub detail: serde_json::Value,
}

impl RunReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten()
    }
}

/// How per-seed pass flags combine into a section verdict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PassRule {
    /// Every seed must pass.
    AllSeeds,
    /// At least this fraction of seeds must pass.
    Fraction { min: f64 },
}

impl PassRule {
    pub fn judge(&self, runs: &[RunReport]) -> bool {
        if runs.iter().any(|r| r.status == RunStatus::Failed) {
            return false;
        }
        let passed = runs.iter().filter(|r| r.passed).count();
        match *self {
            PassRule::AllSeeds => passed == runs.len(),
            PassRule::Fraction { min } => passed as f64 >= min * runs.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub scenario: Scenario,
    /// Metric columns in CSV order.
    pub columns: Vec<String>,
    pub rule: PassRule,
    pub runs: Vec<RunReport>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub scenario: Scenario,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub sections: Vec<Section>,
    pub passed: bool,
}

impl ReportBundle {
    /// Process exit code: 0 iff every seed ran and every verdict passed.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Twelve significant digits, exponent form.
pub fn format_float(v: f64) -> String {
    format!("{v:.11e}")
}

fn write_csv(section: &Section, hash: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = LEADING_COLUMNS.to_vec();
    header.extend(section.columns.iter().map(String::as_str));
    header.push("error");
    w.write_record(&header)?;
    for run in &section.runs {
        let mut row = vec![
            section.scenario.name().to_string(),
            run.seed.to_string(),
            hash.to_string(),
            match run.status {
                RunStatus::Ok => "ok".into(),
                RunStatus::Failed => "failed".into(),
            },
            run.passed.to_string(),
        ];
        row.extend(section.columns.iter().map(|c| run.metric(c).map(format_float).unwrap_or_default()));
        row.push(run.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json` and one `<scenario>.csv` per section into `dir`.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    if bundle.sections.is_empty() {
        return Err(CliError::EmptyBundle);
    }
    fs::create_dir_all(dir)?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(bundle)? + "\n")?;
    let mut written = vec![json];
    for s in &bundle.sections {
        let path = dir.join(format!("{}.csv", s.scenario.name()));
        write_csv(s, &bundle.config_hash, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ReportBundle> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
