//! The run configuration: one TOML file covering every stage. Every section
//! and key is optional; missing values take the defaults, unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tal_core::evaluation::EvalConfig;
use tal_core::inference::InferenceConfig;
use tal_core::model::NetworkConfig;
use tal_core::synthetic::SyntheticSpec;
use tal_core::trainer::TrainConfig;
use tal_core::{Error, Result};

pub const THREADS_ENV: &str = "TAL_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; falls back to `TAL_THREADS`, then to one per core.
    pub threads: Option<usize>,
    pub synthetic: SyntheticSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{origin}: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be >= 1".into()));
        }
        self.synthetic.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.inference.soft_nms.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Thread count from the flag, the config, then the environment.
pub fn thread_count(flag: Option<usize>, config: &RunConfig) -> Result<Option<usize>> {
    if let Some(n) = flag.or(config.threads) {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}
