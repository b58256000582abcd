//! Run configuration. Defaults are the full-scale recipe; [`TrainConfig::desk`]
//! gives the small CPU-sized preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::ClusterConfig;
use crate::data::{AugmentConfig, DomainStyle, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::InferenceMode;
use crate::fusion::hidden_width;
use crate::losses::LossWeights;
use crate::model::EncoderConfig;
use crate::teacher::check_momentum;

/// Which target-stage objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fused views feed clustering and the part experts.
    #[default]
    Full,
    /// Parts of the teacher map are clustered directly; no fusion gate.
    NoFm,
    /// Global view only: no part terms (`gamma = 0`).
    Baseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFm => "no-fm",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-fm" => Ok(Variant::NoFm),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected full, no-fm or baseline)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Horizontal parts `K`.
    pub parts: usize,
    /// Hidden-width reduction of the fusion gate.
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), parts: 2, reduction: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Iterations per epoch; one sampler pass when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters_per_epoch: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    /// 0-based epochs at which the rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 80, iters_per_epoch: None, lr: 3.5e-4, weight_decay: 5e-4, milestones: vec![40, 70], lr_decay: 0.1 }
    }
}

impl PretrainConfig {
    /// Step schedule: `lr * lr_decay^(number of milestones <= epoch)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Teacher EMA momentum.
    pub ema_momentum: f64,
    /// Logit scale of the classifier rebuilt from cluster centroids each epoch.
    pub classifier_scale: f64,
    pub variant: Variant,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 80, iters_per_epoch: 400, lr: 3.5e-4, weight_decay: 5e-4, ema_momentum: 0.999, classifier_scale: 30.0, variant: Variant::Full }
    }
}

/// Dataset roots in the `bounding_box_train` / `query` / `bounding_box_test` layout.
/// When a root is unset the synthetic generator is used instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Identities in the source train split and in the target train split.
    pub train_ids: usize,
    /// Identities in the target query/gallery splits (disjoint from training).
    pub test_ids: usize,
    pub images_per_id: usize,
    /// Images per test identity that go to the query split.
    pub query_per_id: usize,
    pub source_style: String,
    pub target_style: String,
    pub cameras: usize,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_ids: 32,
            test_ids: 32,
            images_per_id: 40,
            query_per_id: 2,
            source_style: "A".into(),
            target_style: "B".into(),
            cameras: 4,
            noise_std: 0.03,
        }
    }
}

impl SyntheticConfig {
    pub fn style(name: &str) -> Result<DomainStyle> {
        DomainStyle::preset(name).ok_or_else(|| Error::Config(format!("unknown synthetic style {name:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub inference: InferenceMode,
}

/// Every hyperparameter of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub cluster: ClusterConfig,
    pub sampler: SamplerConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub eval: EvalConfig,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be non-negative, got {v}")))
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl TrainConfig {
    /// CPU-sized preset: a narrow encoder on `32 x 16` inputs, short schedules,
    /// `8 x 4` batches and one cluster per synthetic identity.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.encoder = EncoderConfig {
            channels: 64,
            input_height: 32,
            input_width: 16,
            block_widths: vec![16, 32, 64, 64],
            final_stride: 1,
        };
        cfg.pretrain.epochs = 20;
        cfg.pretrain.milestones = vec![10, 15];
        cfg.pretrain.lr = 3e-3;
        cfg.finetune.epochs = 10;
        cfg.finetune.iters_per_epoch = 300;
        cfg.finetune.lr = 1e-3;
        cfg.finetune.ema_momentum = 0.99;
        cfg.sampler.ids_per_batch = 8;
        cfg.sampler.imgs_per_id = 4;
        cfg.cluster.clusters = 32;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.encoder.validate(m.parts)?;
        if m.parts == 0 {
            return Err(Error::Config("parts must be at least 1".into()));
        }
        hidden_width(m.encoder.channels, m.reduction)?;
        self.loss.validate()?;
        self.cluster.validate()?;
        if self.cluster.clusters < 2 {
            return Err(Error::Config("at least 2 clusters are needed to train a classifier".into()));
        }
        self.sampler.validate()?;
        let p = &self.pretrain;
        positive("pretrain.lr", p.lr)?;
        non_negative("pretrain.weight_decay", p.weight_decay)?;
        positive("pretrain.lr_decay", p.lr_decay)?;
        if p.iters_per_epoch == Some(0) {
            return Err(Error::Config("pretrain.iters_per_epoch must be at least 1".into()));
        }
        let f = &self.finetune;
        positive("finetune.lr", f.lr)?;
        positive("finetune.classifier_scale", f.classifier_scale)?;
        non_negative("finetune.weight_decay", f.weight_decay)?;
        check_momentum(f.ema_momentum).map_err(|e| Error::Config(e.to_string()))?;
        if f.iters_per_epoch == 0 {
            return Err(Error::Config("finetune.iters_per_epoch must be at least 1".into()));
        }
        let a = &self.augment;
        probability("augment.flip_prob", a.flip_prob)?;
        probability("augment.erase_prob", a.erase_prob)?;
        let s = &self.synthetic;
        SyntheticConfig::style(&s.source_style)?;
        SyntheticConfig::style(&s.target_style)?;
        if s.train_ids < 2 || s.test_ids < 2 || s.images_per_id < 2 {
            return Err(Error::Config("synthetic splits need at least 2 identities with 2 images".into()));
        }
        if s.query_per_id == 0 || s.query_per_id >= s.images_per_id {
            return Err(Error::Config("synthetic.query_per_id must leave gallery images".into()));
        }
        if s.cameras == 0 {
            return Err(Error::Config("synthetic.cameras must be positive".into()));
        }
        non_negative("synthetic.noise_std", s.noise_std)?;
        Ok(())
    }

    /// Child seed for one randomness stream, so streams do not share state.
    pub fn derive_seed(&self, stream: &str, index: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stream.as_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}
