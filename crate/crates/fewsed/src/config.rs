//! One TOML config file covering every stage, with the paper's defaults.
//! Unknown keys are rejected; CLI flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::features::FeatureConfig;
use crate::metrics::{MatchCriterion, PsdsConfig, SweepGrids};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub matching: MatchCriterion,
    pub psds: PsdsConfig,
    pub sweep: SweepGrids,
    pub synth: SyntheticSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.features.pcen.validate()?;
        if !(0.0..=1.0).contains(&self.matching.min_iou) || self.matching.min_iou == 0.0 {
            return Err(Error::Config(format!(
                "matching.min_iou must be in (0,1]: {}",
                self.matching.min_iou
            )));
        }
        Ok(())
    }

    /// Stable short hash of the effective configuration, recorded in run
    /// summaries so outputs can be traced to their settings.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies one global seed to every stage that draws randomness.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
        self.synth.seed = seed;
    }
}
