//! Experiment configs: `{scenario, seeds, params, out}`.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::scenarios::{
    amun::AmunParams, circulant::CirculantParams, clip::ClipParams, fastclip::FastClipParams, lotos::LotosParams,
    miann::MiaNnParams, spectrum::SpectrumParams, trw::TrwParams, verify_all::VerifyAllParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Spectrum,
    Clip,
    Fastclip,
    CirculantVerify,
    Lotos,
    Amun,
    Trw,
    Miann,
    VerifyAll,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::Spectrum,
        Scenario::Clip,
        Scenario::Fastclip,
        Scenario::CirculantVerify,
        Scenario::Lotos,
        Scenario::Amun,
        Scenario::Trw,
        Scenario::Miann,
        Scenario::VerifyAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Spectrum => "spectrum",
            Scenario::Clip => "clip",
            Scenario::Fastclip => "fastclip",
            Scenario::CirculantVerify => "circulant-verify",
            Scenario::Lotos => "lotos",
            Scenario::Amun => "amun",
            Scenario::Trw => "trw",
            Scenario::Miann => "miann",
            Scenario::VerifyAll => "verify-all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScenarioParams {
    Spectrum(SpectrumParams),
    Clip(ClipParams),
    Fastclip(FastClipParams),
    CirculantVerify(CirculantParams),
    Lotos(LotosParams),
    Amun(AmunParams),
    Trw(TrwParams),
    Miann(MiaNnParams),
    VerifyAll(VerifyAllParams),
}

impl ScenarioParams {
    pub fn defaults(scenario: Scenario) -> Self {
        match scenario {
            Scenario::Spectrum => ScenarioParams::Spectrum(Default::default()),
            Scenario::Clip => ScenarioParams::Clip(Default::default()),
            Scenario::Fastclip => ScenarioParams::Fastclip(Default::default()),
            Scenario::CirculantVerify => ScenarioParams::CirculantVerify(Default::default()),
            Scenario::Lotos => ScenarioParams::Lotos(Default::default()),
            Scenario::Amun => ScenarioParams::Amun(Default::default()),
            Scenario::Trw => ScenarioParams::Trw(Default::default()),
            Scenario::Miann => ScenarioParams::Miann(Default::default()),
            Scenario::VerifyAll => ScenarioParams::VerifyAll(Default::default()),
        }
    }

    fn parse(scenario: Scenario, value: serde_json::Value) -> Result<Self> {
        let value = if value.is_null() { serde_json::json!({}) } else { value };
        Ok(match scenario {
            Scenario::Spectrum => ScenarioParams::Spectrum(typed(value)?),
            Scenario::Clip => ScenarioParams::Clip(typed(value)?),
            Scenario::Fastclip => ScenarioParams::Fastclip(typed(value)?),
            Scenario::CirculantVerify => ScenarioParams::CirculantVerify(typed(value)?),
            Scenario::Lotos => ScenarioParams::Lotos(typed(value)?),
            Scenario::Amun => ScenarioParams::Amun(typed(value)?),
            Scenario::Trw => ScenarioParams::Trw(typed(value)?),
            Scenario::Miann => ScenarioParams::Miann(typed(value)?),
            Scenario::VerifyAll => ScenarioParams::VerifyAll(typed(value)?),
        })
    }
}

fn located(prefix: &str, path: &serde_path_to_error::Path) -> String {
    let p = path.to_string();
    match (prefix.is_empty(), p == ".") {
        (true, _) => p,
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{p}"),
    }
}

fn typed<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| CliError::config(located("params", e.path()), e.inner().to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub params: ScenarioParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    scenario: Option<Scenario>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    params: serde_json::Value,
    #[serde(default)]
    out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, seeds: Vec<u64>, params: ScenarioParams) -> Self {
        ExperimentConfig {
            scenario,
            seeds,
            params,
            out: None,
        }
    }

    /// Parses a config; command-line `scenario` and `seeds` fill in or override the file.
    pub fn parse(text: &str, scenario: Option<Scenario>, seeds: Option<Vec<u64>>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig =
            serde_path_to_error::deserialize(de).map_err(|e| CliError::config(located("", e.path()), e.inner().to_string()))?;
        let scenario = match (raw.scenario, scenario) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::config(
                    "scenario",
                    format!("config names {} but the command line asks for {}", a.name(), b.name()),
                ))
            }
            (a, b) => b.or(a).ok_or_else(|| CliError::config("scenario", "missing scenario"))?,
        };
        let cfg = ExperimentConfig {
            scenario,
            seeds: seeds.or(raw.seeds).unwrap_or_default(),
            params: ScenarioParams::parse(scenario, raw.params)?,
            out: raw.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        let expected = ScenarioParams::defaults(self.scenario);
        if std::mem::discriminant(&expected) != std::mem::discriminant(&self.params) {
            return Err(CliError::config("params", format!("parameters do not belong to {}", self.scenario.name())));
        }
        crate::scenarios::validate(&self.params)
    }

    /// Canonical JSON without the output path, which does not affect results.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        v.to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
