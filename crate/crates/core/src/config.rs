//! Resolved run configuration and worker-pool setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::featurize::VocabConfig;
use crate::pretrain::{BundleConfig, TrainConfig};
use crate::sequence::AblationFlags;
use crate::table::DEFAULT_POSITIONS;

pub const THREADS_ENV: &str = "TABBIN_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every knob of a command. Built from defaults, then a config file, then
/// flags; `resolve` pushes the top-level seed into each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub ablations: AblationFlags,
    pub eval: EvalConfig,
    pub corpus: CorpusSpec,
    pub vocab: VocabConfig,
    pub positions: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            train: TrainConfig::desk(),
            ablations: AblationFlags::none(),
            eval: EvalConfig::default(),
            corpus: CorpusSpec::default(),
            vocab: VocabConfig::default(),
            positions: DEFAULT_POSITIONS,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the seed and ablations, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.ablations = self.ablations;
        self.eval.seed = self.seed;
        self.corpus.seed = self.seed;
        self.encoder.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        if self.positions < 2 {
            return Err(Error::Config("positions must be at least 2".into()));
        }
        Ok(self)
    }

    pub fn bundle_config(&self) -> BundleConfig {
        BundleConfig {
            encoder: self.encoder,
            positions: self.positions,
            ablations: self.ablations,
            train: None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Sizes the global rayon pool from `TABBIN_THREADS` when set. Returns the
/// thread count in effect.
pub fn init_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool built earlier in the process wins; that is fine for tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_reaches_every_stage() {
        let c = RunConfig {
            seed: 42,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((c.train.seed, c.eval.seed, c.corpus.seed), (42, 42, 42));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        let c = RunConfig::from_json(r#"{"seed": 3, "encoder": {"hidden": 24}}"#).unwrap();
        assert_eq!(c.encoder.hidden, 24);
        assert_eq!(c.encoder.layers, EncoderConfig::default().layers);
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().to_string()).unwrap(), c);
    }
}
