//! Run configuration, read from JSON.
//!
//! Every seed is an explicit field; nothing is drawn from the clock.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelShape, NegativePool};
use crate::rng::mix;
use crate::synthetic::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBlock {
    /// Pseudo-labeled training data.
    #[serde(rename = "virtual")]
    pub virtual_data: GeneratorConfig,
    /// Unlabeled data that positive pairs are mined from.
    pub real: GeneratorConfig,
    /// Identities in the held-out evaluation split of the real domain.
    pub test_identities: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Width of the optional tanh hidden layer; 0 disables it.
    #[serde(default)]
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate is divided by 10 from this epoch on.
    pub lr_drop_epoch: usize,
    pub total_epochs: usize,
    /// Classification-only epochs on virtual data; the remainder of
    /// `total_epochs` is fine-tuning.
    pub pretrain_epochs: usize,
    pub margin: f64,
    pub lambda: f64,
    /// Anchors per triplet batch (`N_r`).
    pub anchors_per_batch: usize,
    pub virtual_batch_size: usize,
    /// Neighborhood size for k-reciprocal mining.
    pub k: usize,
    #[serde(default = "yes")]
    pub exclude_same_camera: bool,
    #[serde(default)]
    pub negative_pool: NegativePool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Hyper-parameters of the original full-scale setup: SGD at 0.1 for
    /// 150 epochs with a drop after 100, 100 classification-only epochs,
    /// `N_r = 50`, `m = 0.3`, `k = 50`, `lambda = 1`.
    pub fn reference(seed: u64) -> Self {
        Self {
            lr: 0.1,
            lr_drop_epoch: 100,
            total_epochs: 150,
            pretrain_epochs: 100,
            margin: 0.3,
            lambda: 1.0,
            anchors_per_batch: 50,
            virtual_batch_size: 64,
            k: 50,
            exclude_same_camera: true,
            negative_pool: NegativePool::AnchorsAndPositives,
            seed,
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        self.total_epochs.saturating_sub(self.pretrain_epochs)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / 10.0
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("train.lr", "must be finite and >= 0"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::invalid("train.margin", "must be finite and >= 0"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("train.lambda", "must be finite and >= 0"));
        }
        if self.anchors_per_batch < 2 {
            return Err(Error::invalid(
                "train.anchors_per_batch",
                "must be at least 2",
            ));
        }
        if self.virtual_batch_size == 0 {
            return Err(Error::invalid(
                "train.virtual_batch_size",
                "must be at least 1",
            ));
        }
        if self.k == 0 {
            return Err(Error::invalid("train.k", "must be at least 1"));
        }
        if self.pretrain_epochs > self.total_epochs {
            return Err(Error::invalid(
                "train.pretrain_epochs",
                "cannot exceed train.total_epochs",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ranks: Vec<usize>,
    /// Evaluate the held-out split after every epoch, not just at the end.
    #[serde(default)]
    pub every_epoch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ranks: vec![1, 5, 10, 20],
            every_epoch: false,
        }
    }
}

/// Positive selection used during fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Collaborative-filtering argmax over `R_k(p)`.
    #[default]
    Cf,
    /// Uniform draw from `R_k(p)`.
    Random,
    /// No mining and no fine-tuning: the coarse model is final.
    None,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf" => Ok(Self::Cf),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            other => Err(Error::invalid(
                "ablation",
                format!("`{other}` is not one of cf, random, none"),
            )),
        }
    }
}

/// Optional pre-generated dataset files used instead of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    #[serde(rename = "virtual")]
    pub virtual_data: PathBuf,
    pub real: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorBlock,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datasets: Option<DatasetPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// The desk-scale benchmark: 100 virtual identities x 8 samples,
    /// 100 unlabeled real identities x 8 samples over 4 cameras, a held-out
    /// split of 100 real identities, 32-dimensional features.
    pub fn benchmark(seed: u64) -> Self {
        let real = GeneratorConfig {
            identities: 100,
            samples_per_identity: 8,
            cameras: 4,
            dim: 32,
            sigma_identity: 1.0,
            sigma_pose: 0.7,
            camera_strength: 0.6,
            camera_rotation: 0.25,
            seed: 0,
        };
        let virtual_data = GeneratorConfig {
            sigma_pose: 0.35,
            ..real.clone()
        };
        let cfg = Self {
            generator: GeneratorBlock {
                virtual_data,
                real,
                test_identities: 100,
            },
            model: ModelConfig {
                embed_dim: 32,
                hidden: 0,
            },
            train: TrainConfig {
                lr: 0.1,
                lr_drop_epoch: 30,
                total_epochs: 40,
                pretrain_epochs: 20,
                margin: 0.3,
                lambda: 1.0,
                anchors_per_batch: 16,
                virtual_batch_size: 32,
                k: 10,
                exclude_same_camera: true,
                negative_pool: NegativePool::AnchorsAndPositives,
                seed: 0,
            },
            eval: EvalConfig::default(),
            ablation: Ablation::Cf,
            datasets: None,
            output_dir: None,
        };
        cfg.with_seed(seed)
    }

    /// Re-derives every seed from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.virtual_data.seed = mix(seed, 1);
        self.generator.real.seed = mix(seed, 2);
        self.train.seed = mix(seed, 3);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            d_in: self.generator.real.dim,
            d_out: self.model.embed_dim,
            hidden: self.model.hidden,
            classes: self.generator.virtual_data.identities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        g.virtual_data.validate("generator.virtual")?;
        g.real.validate("generator.real")?;
        if g.virtual_data.dim != g.real.dim {
            return Err(Error::invalid(
                "generator.virtual.dim",
                "must equal generator.real.dim",
            ));
        }
        if g.test_identities == 0 {
            return Err(Error::invalid(
                "generator.test_identities",
                "must be at least 1",
            ));
        }
        if self.model.embed_dim == 0 {
            return Err(Error::invalid("model.embed_dim", "must be at least 1"));
        }
        self.train.validate()?;
        if self.train.k >= g.real.total_items() {
            return Err(Error::KTooLarge {
                k: self.train.k,
                n: g.real.total_items(),
            });
        }
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return Err(Error::invalid(
                "eval.ranks",
                "must be a non-empty list of ranks >= 1",
            ));
        }
        Ok(())
    }
}
