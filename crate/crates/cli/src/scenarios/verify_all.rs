//! The oracle-backed checks in one run.

use serde::{Deserialize, Serialize};

use super::circulant::CirculantParams;
use super::clip::ClipParams;
use super::spectrum::SpectrumParams;
use crate::error::Result;
use crate::report::Section;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyAllParams {
    pub circulant: CirculantParams,
    pub spectrum: SpectrumParams,
    pub clip: ClipParams,
}

impl VerifyAllParams {
    pub fn validate(&self) -> Result<()> {
        self.circulant.validate()?;
        self.spectrum.validate()?;
        self.clip.validate()
    }
}

pub fn sections(p: &VerifyAllParams, seeds: &[u64]) -> Vec<Section> {
    vec![
        super::circulant::section(&p.circulant, seeds),
        super::spectrum::section(&p.spectrum, seeds),
        super::clip::section(&p.clip, seeds),
    ]
}
