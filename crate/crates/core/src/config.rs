//! Run configuration: every stage's settings plus paths, with a content
//! digest that excludes the paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Precision;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::openmax::OpenMaxConfig;
use crate::pretrain::PretrainConfig;
use crate::probe::ProbeConfig;
use crate::splits::ParetoConfig;
use crate::tsr::TsrConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub bank: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewshotConfig {
    pub way: usize,
    pub shot: usize,
    pub trials: usize,
    pub cway_trials: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            trials: 200,
            cway_trials: 10,
            train_classes: 64,
            val_classes: 12,
            test_classes: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenConfig {
    pub n_known: usize,
    pub thresholds: Vec<f64>,
}

impl Default for OpenConfig {
    fn default() -> Self {
        Self {
            n_known: 250,
            thresholds: vec![0.1, 0.2, 0.3, 0.5, 0.7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tsr: TsrConfig,
    pub head: HeadConfig,
    pub probe: ProbeConfig,
    pub openmax: OpenMaxConfig,
    pub pareto: ParetoConfig,
    pub fewshot: FewshotConfig,
    pub open: OpenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            paths: Paths::default(),
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tsr: TsrConfig::default(),
            head: HeadConfig::default(),
            probe: ProbeConfig::default(),
            openmax: OpenMaxConfig::default(),
            pareto: ParetoConfig::default(),
            fewshot: FewshotConfig::default(),
            open: OpenConfig::default(),
        };
        cfg.propagate();
        cfg
    }
}

/// Seed of a named stage derived from the global seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut cfg: Self = serde_json::from_slice(bytes)?;
        cfg.propagate();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Copies the global seed and precision into every stage.
    pub fn propagate(&mut self) {
        self.pretrain.seed = stage_seed(self.seed, "pretrain");
        self.tsr.seed = stage_seed(self.seed, "tsr");
        self.head.seed = stage_seed(self.seed, "head");
        self.pretrain.precision = self.precision;
        self.head.precision = self.precision;
    }

    /// Every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut model = self.model.clone();
        model.base_dim = model.base_dim.max(1);
        // Unresolved widths are taken from the bank later; check the rest.
        if model.dim == 0 {
            model.dim = model.heads.max(1);
        }
        for r in [
            model.validate(),
            self.pretrain.validate(),
            self.tsr.validate(),
            self.pareto.validate(),
        ] {
            if let Err(Error::Config(m)) = r {
                problems.push(m);
            }
        }
        if self.head.batch_size == 0 {
            problems.push("head batch_size must be positive".into());
        }
        if self.fewshot.way == 0 || self.fewshot.shot == 0 {
            problems.push("few-shot way and shot must be positive".into());
        }
        if self.openmax.tail < 2 {
            problems.push(format!("openmax tail {} below 2", self.openmax.tail));
        }
        if self.open.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            problems.push("open-set thresholds must lie in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Hex SHA-256 of the configuration with paths removed.
    pub fn digest(&self) -> String {
        let mut stripped = self.clone();
        stripped.paths = Paths::default();
        let bytes = serde_json::to_vec(&stripped).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
