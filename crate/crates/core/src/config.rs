//! Run configuration files: TOML with one section per component. Unknown
//! keys are rejected everywhere so a typo never silently falls back to a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{AdaptConfig, ArmConfig, ProtocolConfig, UpdateRule};
use crate::data::VAL_FRACTION;
use crate::error::{Error, Result};
use crate::model::{FfnKind, ModelConfig};
use crate::train::{EvalSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// UTF-8 domain A corpus.
    pub corpus: Option<PathBuf>,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            val_fraction: VAL_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    /// APN layer whose top-1 patch defines the loss decomposition.
    pub layer: usize,
    pub overlap_pairs: usize,
    /// Compare routing on domain A against synthesized domain B.
    pub cross_domain: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            layer: 0,
            overlap_pairs: 10_000,
            cross_domain: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every component seed when set.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// 32 or 64.
    pub precision: u32,
    /// Checkpoint consumed by adapt, eval and monitor.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub protocol: ProtocolConfig,
    pub monitor: MonitorConfig,
    /// Protocol arms; empty means the standard dense/global and
    /// APN/patch-local pair built from `model`, `train` and `adapt`.
    pub arms: Vec<ArmConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("runs/default"),
            precision: 32,
            checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            protocol: ProtocolConfig::default(),
            monitor: MonitorConfig::default(),
            arms: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors carry the line, column and offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.precision != 32 && cfg.precision != 64 {
            return Err(Error::Config(format!("precision: expected 32 or 64, got {}", cfg.precision)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Pushes the top-level seed into every component and clears it, so the
    /// echoed config states the seeds that were actually used.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed.take() {
            self.train.seed = s;
            self.adapt.seed = s;
            self.protocol.domain_b_seed = s;
            for arm in &mut self.arms {
                arm.train.seed = s;
                arm.adapt.seed = s;
            }
        }
    }

    pub fn corpus(&self) -> Result<&Path> {
        self.data
            .corpus
            .as_deref()
            .ok_or_else(|| Error::Config("data.corpus: no corpus path given".into()))
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("checkpoint: no checkpoint path given".into()))
    }

    pub fn eval_spec(&self) -> EvalSpec {
        self.train.eval_spec()
    }

    /// The configured arms, or the default comparison pair.
    pub fn protocol_arms(&self) -> Vec<ArmConfig> {
        if !self.arms.is_empty() {
            return self.arms.clone();
        }
        [("dense", FfnKind::Dense, UpdateRule::Global), ("apn", FfnKind::Apn, UpdateRule::PatchLocal)]
            .into_iter()
            .map(|(name, ffn, rule)| ArmConfig {
                name: name.into(),
                model: ModelConfig { ffn, ..self.model.clone() },
                train: self.train.clone(),
                adapt: AdaptConfig { rule, ..self.adapt.clone() },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.data.corpus = Some("data/x.txt".into());
        cfg.adapt.update_cap = Some(0.5);
        cfg.arms = cfg.protocol_arms();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = RunConfig::parse("[train]\nmax_iter = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(err.is_input_error());
        assert!(msg.contains("max_iter"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[model.apn]\npatchez = 3").is_err());
    }

    #[test]
    fn sparse_file_takes_defaults() {
        let cfg = RunConfig::parse("[data]\ncorpus = \"a.txt\"\n[model]\nd_model = 64\n").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.n_layers, ModelConfig::default().n_layers);
        assert_eq!(cfg.corpus().unwrap(), Path::new("a.txt"));
    }

    #[test]
    fn missing_corpus_names_field() {
        let err = RunConfig::default().corpus().unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains("data.corpus"));
    }

    #[test]
    fn seed_override_reaches_everything() {
        let mut cfg = RunConfig { seed: Some(9), ..Default::default() };
        cfg.arms = cfg.protocol_arms();
        cfg.resolve_seed();
        assert_eq!(cfg.seed, None);
        assert_eq!(cfg.train.seed, 9);
        assert!(cfg.arms.iter().all(|a| a.train.seed == 9 && a.adapt.seed == 9));
    }

    #[test]
    fn bad_precision() {
        assert!(RunConfig::parse("precision = 16").is_err());
    }
}
