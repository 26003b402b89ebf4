//! Experiment configuration: one TOML section per subsystem, per-dataset
//! presets, and a content hash stamped on every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{cartesian_grid, AnnealSchedule, CharLmConfig, Hyper, ModelKind};
use crate::error::{Error, Result};
use crate::lattice::RegConfig;
use crate::snlm::SnlmConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// A directory holding `train.txt`/`valid.txt`/`test.txt`, or one file
    /// split 80/10/10 by line order.
    pub corpus: Option<PathBuf>,
    pub strip_whitespace: bool,
    /// Per-sentence conditioning vectors (binary context file).
    pub context: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Longest segment `L`.
    pub max_len: usize,
    /// Minimum training frequency `F` for lexicon entries.
    pub min_freq: usize,
    /// `false` trains without the lexical memory.
    pub memory: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub iterations: usize,
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub p_end: Vec<f64>,
    pub p_continue: Vec<f64>,
    pub lm_embed_dim: usize,
    pub lm_hidden: usize,
    pub lm_dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub reg: RegConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub output: OutputConfig,
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 6] = ["br-text", "br-phono", "ptb", "ctb", "pku", "coco"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: DatasetConfig {
                name: "custom".into(),
                corpus: None,
                strip_whitespace: true,
                context: None,
            },
            model: ModelConfig {
                embed_dim: 512,
                hidden: 512,
                max_len: 10,
                min_freq: 10,
                memory: true,
                dropout: 0.5,
            },
            reg: RegConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig {
                iterations: AnnealSchedule::default().iterations,
                alpha0: vec![1.0, 10.0, 100.0, 1000.0],
                alpha1: vec![10.0, 100.0, 1000.0],
                p_end: vec![0.1, 0.3, 0.5],
                p_continue: vec![0.5, 0.7, 0.9],
                lm_embed_dim: 512,
                lm_hidden: 512,
                lm_dropout: 0.5,
            },
            output: OutputConfig {
                checkpoint_dir: "checkpoints".into(),
                output_dir: "out".into(),
            },
        }
    }
}

impl ExperimentConfig {
    /// Defaults for a named dataset: segment cap `L`, lexicon frequency `F`
    /// and penalty weight λ differ per corpus.
    pub fn preset(name: &str) -> Result<Self> {
        let (max_len, min_freq, lambda) = match name {
            "br-text" => (10, 10, 7.5e-4),
            "br-phono" => (10, 10, 9.5e-4),
            "ptb" => (10, 100, 5.0e-5),
            "ctb" => (5, 25, 1.0e-2),
            "pku" => (5, 25, 9.0e-3),
            "coco" => (10, 100, 2.0e-4),
            "custom" => return Ok(Self::default()),
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset preset {other:?}; expected one of {PRESETS:?} or \"custom\""
                )))
            }
        };
        let mut c = Self::default();
        c.dataset.name = name.into();
        c.model.max_len = max_len;
        c.model.min_freq = min_freq;
        c.reg.lambda = lambda;
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.embed_dim == 0 || m.hidden == 0 || m.max_len == 0 {
            return Err(Error::Config("model dimensions and max_len must be positive".into()));
        }
        if m.memory && (m.max_len < 2 || m.min_freq == 0) {
            return Err(Error::Config("memory needs max_len ≥ 2 and min_freq ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) || !(0.0..1.0).contains(&self.baseline.lm_dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        self.reg.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        Ok(())
    }

    /// SHA-256 over the serialized configuration, output locations excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig {
            checkpoint_dir: PathBuf::new(),
            output_dir: PathBuf::new(),
        };
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn snlm(&self, context_dim: Option<usize>) -> SnlmConfig {
        SnlmConfig {
            embed_dim: self.model.embed_dim,
            hidden: self.model.hidden,
            max_len: self.model.max_len,
            dropout: self.model.dropout,
            context_dim,
        }
    }

    pub fn char_lm(&self) -> CharLmConfig {
        CharLmConfig {
            embed_dim: self.baseline.lm_embed_dim,
            hidden: self.baseline.lm_hidden,
            dropout: self.baseline.lm_dropout,
        }
    }

    pub fn grid(&self, kind: ModelKind) -> Vec<Hyper> {
        let b = &self.baseline;
        cartesian_grid(kind, &b.alpha0, &b.alpha1, &b.p_end, &b.p_continue)
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            iterations: self.baseline.iterations,
        }
    }
}
