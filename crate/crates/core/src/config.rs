//! The JSON run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DataConfig;
use crate::error::Result;
use crate::evalbench::SweepConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Environment variable that replaces every seed when set.
pub const SEED_ENV: &str = "OVV_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file and applies the seed override from the
    /// environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(seed) = seed_from_env()? {
            cfg.override_seeds(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed to `seed`; sweep seeds become `seed, seed + 1, ...`
    /// keeping their count.
    pub fn override_seeds(&mut self, seed: u64) {
        self.data.seed = seed;
        self.sampler.seed = seed;
        self.train.seed = seed;
        let n = self.sweep.seeds.len() as u64;
        self.sweep.seeds = (0..n).map(|i| seed.wrapping_add(i)).collect();
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.sampler.validate(self.model.depth)?;
        self.train.validate()?;
        if self.synth.t_frames < self.model.frames
            || (self.synth.height, self.synth.width) != (self.model.height, self.model.width)
            || self.synth.num_classes != self.model.num_classes
        {
            return Err(crate::Error::InvalidConfig(format!(
                "synth videos ({} frames, {}x{}, {} classes) do not fit the model ({} frames, {}x{}, {} classes)",
                self.synth.t_frames,
                self.synth.height,
                self.synth.width,
                self.synth.num_classes,
                self.model.frames,
                self.model.height,
                self.model.width,
                self.model.num_classes
            )));
        }
        Ok(())
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| crate::Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"model": {"depth": 2}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.model.depth, 2);
        assert_eq!(c.model.dim, ModelConfig::default().dim);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn seed_override_touches_every_seed() {
        let mut c = RunConfig::default();
        c.override_seeds(40);
        assert_eq!((c.data.seed, c.sampler.seed, c.train.seed), (40, 40, 40));
        assert_eq!(c.sweep.seeds, vec![40, 41, 42]);
    }
}
