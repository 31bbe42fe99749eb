use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::StickFigureConfig;
use crate::error::{Error, Result};
use crate::geometry::AugRanges;
use crate::masking::MaskPolicy;
use crate::mixup::MixupConfig;
use crate::nn::{AdamConfig, BackboneConfig};

/// Which branches a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "supervised")]
    Supervised,
    /// Supervised warmup for half the epochs, then static pseudo-labels from
    /// a frozen copy of the network.
    #[serde(rename = "pseudo-pose")]
    PseudoPose,
    /// Keypoint masking with a uniformly random mask count.
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "adaptive")]
    Adaptive,
    #[serde(rename = "adaptive+mixup")]
    AdaptiveMixup,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Supervised,
        Method::PseudoPose,
        Method::Single,
        Method::Adaptive,
        Method::AdaptiveMixup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::PseudoPose => "pseudo-pose",
            Method::Single => "single",
            Method::Adaptive => "adaptive",
            Method::AdaptiveMixup => "adaptive+mixup",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Method::Supervised
    }

    /// Whether the student branch masks joints.
    pub fn masks(self) -> bool {
        matches!(self, Method::Single | Method::Adaptive | Method::AdaptiveMixup)
    }

    pub fn uses_mixup(self) -> bool {
        self == Method::AdaptiveMixup
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Stick figures generated in memory.
    Synthetic,
    /// A directory written by `synth-data`.
    Manifest,
    /// COCO-style keypoint annotations.
    Coco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub labeled_count: usize,
    pub split_seed: u64,
    /// Training records generated for the synthetic source.
    pub train_count: usize,
    pub val_count: usize,
    pub synth_seed: u64,
    pub val_seed: u64,
    pub generator: StickFigureConfig,
    pub dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            labeled_count: 50,
            split_seed: 0,
            train_count: 550,
            val_count: 200,
            synth_seed: 1,
            val_seed: 2,
            generator: StickFigureConfig::default(),
            dir: None,
            val_dir: None,
            annotations: None,
            images: None,
            val_annotations: None,
            val_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Gaussian width in heatmap cells.
    pub sigma: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { sigma: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub weak: AugRanges,
    pub strong: AugRanges,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            weak: AugRanges::weak(),
            strong: AugRanges::strong(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr_initial: f64,
    /// `(epoch, lr)`: from the epoch after `epoch` on, the rate is `lr`.
    pub lr_drops: Vec<(usize, f64)>,
    pub adam: AdamConfig,
    pub lambda_u: f64,
    /// Epochs over which the unsupervised weights ramp linearly from 0.
    pub rampup_epochs: f64,
    pub eval_every: usize,
    /// Continue from `ckpt-last` in the run directory when present.
    pub resume: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_labeled: 16,
            batch_unlabeled: 16,
            lr_initial: 1e-3,
            lr_drops: vec![(20, 1e-4), (25, 1e-5)],
            adam: AdamConfig::default(),
            lambda_u: 1.0,
            rampup_epochs: 2.0,
            eval_every: 1,
            resume: false,
        }
    }
}

impl ScheduleConfig {
    /// Learning rate used throughout 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|(e, _)| epoch > *e)
            .map(|&(_, lr)| lr)
            .last()
            .unwrap_or(self.lr_initial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Oks,
    Pck,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oks" => Ok(Protocol::Oks),
            "pck" => Ok(Protocol::Pck),
            _ => Err(Error::Config(format!("unknown protocol {s:?}, expected oks or pck"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Metric that selects `ckpt-best`.
    pub protocol: Protocol,
    pub pck_threshold: f64,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Pck,
            pck_threshold: 0.5,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub heatmap: HeatmapConfig,
    pub aug: AugConfig,
    pub mask: MaskPolicy,
    pub mixup: MixupConfig,
    pub train: ScheduleConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::AdaptiveMixup,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            heatmap: HeatmapConfig::default(),
            aug: AugConfig::default(),
            mask: MaskPolicy {
                size_range: (2, 6),
                ..MaskPolicy::default()
            },
            mixup: MixupConfig::default(),
            train: ScheduleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.backbone.validate()?;
        self.aug.weak.validate()?;
        self.aug.strong.validate()?;
        self.mask.validate()?;
        self.mixup.validate()?;
        self.data.generator.validate()?;
        if !(self.heatmap.sigma > 0.0) {
            return bad(format!("heatmap.sigma must be positive, got {}", self.heatmap.sigma));
        }
        let t = &self.train;
        if t.batch_labeled == 0 || t.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(t.lr_initial > 0.0) || t.lr_drops.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if t.lr_drops.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("train.lr_drops must be strictly increasing in epoch".into());
        }
        if t.lambda_u < 0.0 || t.rampup_epochs < 0.0 {
            return bad("lambda_u and rampup_epochs must be non-negative".into());
        }
        if t.eval_every == 0 {
            return bad("train.eval_every must be at least 1".into());
        }
        if self.data.labeled_count == 0 {
            return bad("data.labeled_count must be at least 1; purely unsupervised training is not supported".into());
        }
        if self.eval.batch == 0 || !(self.eval.pck_threshold > 0.0) {
            return bad("eval.batch and eval.pck_threshold must be positive".into());
        }
        if self.data.generator.image_size != self.backbone.input_size && self.data.source == DataSource::Synthetic {
            return bad(format!(
                "generator image size {:?} differs from backbone input {:?}",
                self.data.generator.image_size, self.backbone.input_size
            ));
        }
        Ok(())
    }
}
