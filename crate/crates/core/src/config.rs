//! One structured-text (JSON) config file drives every module. Missing
//! fields fall back to the documented defaults, unknown fields are errors.
//!
//! ```json
//! {
//!   "generator":  { "scenes": 16, "agents_min": 1, "agents_max": 3, ... },
//!   "encoder":    { "d_model": 64, "heads": 4, "depth": 2, ... },
//!   "vq":         { "mode": "low_rank", "codewords": 16, "rank": 8, ... },
//!   "diffusion":  { "steps": 100, "final_mask": 0.99, ... },
//!   "train":      { "learning_rate": 0.0005, "beta1": 0.5, ... },
//!   "sampling":   { "n_guesses": 200, "k_predictions": 20, ... }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::diffusion::DiffusionConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplingConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub vq: VqSection,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
}

// The vq section is re-exported under its natural name; the alias keeps the
// serde derive local to this file.
pub use crate::vq::VqConfig as VqSection;

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.vq.validate(self.encoder.d_model)?;
        self.diffusion.validate()?;
        self.train.validate()?;
        self.sampling.validate()?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = Config::default();
        let json = cfg.to_json_pretty().unwrap();
        let parsed: Config = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"vq": {"mode": "static"}}"#).unwrap();
        assert_eq!(cfg.vq.mode, crate::vq::CodebookMode::Static);
        assert_eq!(cfg.encoder.d_model, 64);
        assert_eq!(cfg.sampling.n_guesses, 200);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"vq": {"style": "qq"}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"optimizer": {}}"#).is_err());
    }

    #[test]
    fn bad_mode_string_rejected() {
        let parsed = serde_json::from_str::<Config>(r#"{"vq": {"mode": "diagonal"}}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn documented_default_hyperparameters() {
        let cfg = Config::default();
        assert_eq!(cfg.vq.codewords, 16);
        assert_eq!(cfg.vq.rank, 8);
        assert_eq!(cfg.train.learning_rate, 5e-4);
        assert_eq!(cfg.train.beta1, 0.5);
        assert_eq!(cfg.train.beta2, 0.9);
        assert_eq!(cfg.train.theta_max_stage1, 180.0);
        assert_eq!(cfg.train.theta_max_stage2, 5.0);
        assert_eq!(cfg.sampling.n_guesses, 200);
        assert_eq!(cfg.sampling.k_predictions, 20);
    }
}
