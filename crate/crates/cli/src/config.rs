use std::path::{Path, PathBuf};

use iterlabel::crowdgate::CrowdConfig;
use iterlabel::detector::{SimDetectorConfig, WorldConfig};
use iterlabel::orchestrator::{LoopConfig, SimConfig};
use iterlabel::trainer::TrainConfig;
use iterlabel::workersim::PopulationConfig;
use serde::{Deserialize, Serialize};

/// The TOML run file. Every section is optional and falls back to its
/// defaults; unknown keys are errors.
///
/// ```toml
/// seed = 7
/// output_dir = "out"
///
/// [loop]
/// mode = "from_seed"
/// max_loops = 10
///
/// [crowd]
/// approval_threshold = 0.8
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Where `run-sim` writes its outputs unless `--out` is given.
    pub output_dir: Option<PathBuf>,
    /// A saved hidden world to use instead of generating one.
    pub world_file: Option<PathBuf>,
    pub world: WorldConfig,
    pub detector: SimDetectorConfig,
    pub trainer: TrainConfig,
    pub crowd: CrowdConfig,
    pub population: PopulationConfig,
    #[serde(rename = "loop")]
    pub run: LoopConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Resolves relative paths against `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.output_dir, &mut self.world_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            world: self.world.clone(),
            detector: self.detector.clone(),
            trainer: self.trainer.clone(),
            crowd: self.crowd.clone(),
            population: self.population.clone(),
            run: self.run.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use iterlabel::orchestrator::RunMode;

    #[test]
    fn sections_default_and_unknown_keys_fail() {
        let c = RunConfig::from_toml("seed = 3\n[loop]\nmode = \"legacy_dots\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.run.mode, RunMode::LegacyDots);
        assert_eq!(c.crowd, CrowdConfig::default());
        assert!(RunConfig::from_toml("seeed = 3").is_err());
        assert!(RunConfig::from_toml("[crowd]\nthreshold = 0.5").is_err());
    }

    #[test]
    fn empty_file_is_the_default_simulation() {
        assert_eq!(RunConfig::from_toml("").unwrap().sim(), SimConfig::default());
    }
}
