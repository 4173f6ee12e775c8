//! Run configuration: one TOML file describing corpus, model, losses,
//! optimizer schedule, augmentation and ablation switches.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::grouping_preset;
use crate::net::ModelConfig;
use crate::objectives::{LossConfig, LossHyperParams, PartTripletMode, Slot};
use crate::synthgen::CorpusConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Corpus directory; written by `generate`, read by `train`.
    pub root: PathBuf,
    #[serde(flatten)]
    pub spec: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("corpus"),
            spec: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: [usize; 3],
    pub strides: [usize; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128],
            strides: [2, 2, 1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub eps: f64,
    pub margin: f64,
    pub lambda_pa: f64,
    pub id_on: Vec<Slot>,
    pub tri_on: Vec<Slot>,
}

impl Default for LossSection {
    fn default() -> Self {
        let hp = LossHyperParams::default();
        let cfg = LossConfig::gilt();
        Self {
            eps: hp.eps,
            margin: hp.margin,
            lambda_pa: hp.lambda_pa,
            id_on: cfg.id_on,
            tri_on: cfg.tri_on,
        }
    }
}

/// Learning-rate schedule: linear warmup from a tenth of the base rate, then
/// step decays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub base_rate: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            base_rate: 3.5e-4,
            warmup_epochs: 3,
            decay_epochs: vec![10, 18],
            decay_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Identities per batch (P) and instances per identity (K).
    pub batch_p: usize,
    pub batch_k: usize,
    pub seed: u64,
    /// Visibility threshold λ_v.
    pub lambda_v: f64,
    /// Field-confidence threshold λ_t for parsing labels.
    pub lambda_t: f64,
    /// Checkpoint every N epochs (the final epoch is always written).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_p: 16,
            batch_k: 4,
            seed: 1,
            lambda_v: 0.4,
            lambda_t: 0.5,
            checkpoint_every: 10,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Padding before random crop back to the original size.
    pub pad: usize,
    pub erase_prob: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            pad: 3,
            erase_prob: 0.5,
        }
    }
}

/// Ablation switches mirroring the component study rows.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Replace learned attention by fixed field-derived maps.
    pub fixed_attention: bool,
    /// Ignore visibility scores at inference (all bits forced to 1).
    pub no_visibility: bool,
    /// Independent per-part triplets instead of the part-averaged distance.
    pub per_part_triplet: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The full-scale schedule of the original training recipe.
    pub fn with_paper_schedule(mut self) -> Self {
        self.optimizer = OptimizerSection {
            base_rate: 3.5e-4,
            warmup_epochs: 10,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
        };
        self.train.epochs = 120;
        self.augment.pad = 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        grouping_preset(self.corpus.spec.part_count)?;
        self.hyper_params().validate()?;
        self.loss_config().validate()?;
        if self.train.batch_p < 2 || self.train.batch_k < 2 {
            return Err(Error::InvalidConfig(
                "PK batches need at least 2 identities and 2 instances each".into(),
            ));
        }
        if self.train.epochs == 0 {
            return Err(Error::InvalidConfig("need at least one epoch".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.erase_prob) {
            return Err(Error::InvalidConfig(
                "erase probability must be in [0,1]".into(),
            ));
        }
        if self.optimizer.base_rate <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hyper_params(&self) -> LossHyperParams {
        LossHyperParams {
            eps: self.loss.eps,
            margin: self.loss.margin,
            lambda_pa: self.loss.lambda_pa,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            id_on: self.loss.id_on.clone(),
            tri_on: self.loss.tri_on.clone(),
            part_triplet_mode: if self.ablation.per_part_triplet {
                PartTripletMode::PerPart
            } else {
                PartTripletMode::Averaged
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_h: self.corpus.spec.height,
            input_w: self.corpus.spec.width,
            channels: self.model.channels,
            strides: self.model.strides,
            part_count: self.corpus.spec.part_count,
            num_train_ids: self.corpus.spec.train_ids,
        }
    }
}

/// Learning rate at the start of `epoch` (0-based): linear warmup from a
/// tenth of the base rate up to the base rate at `warmup_epochs`, then the
/// decay factor applied at each decay epoch.
pub fn lr_schedule(opt: &OptimizerSection, epoch: usize) -> f64 {
    let lo = opt.base_rate / 10.0;
    if epoch < opt.warmup_epochs {
        lo + (opt.base_rate - lo) * epoch as f64 / opt.warmup_epochs as f64
    } else {
        let decays = opt.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        opt.base_rate * opt.decay_factor.powi(decays as i32)
    }
}
