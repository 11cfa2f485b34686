//! Declarative run configuration, loaded from TOML with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::global_prompt::{AttentionConfig, GpmConfig};
use crate::tokenizer::{ImagePatchConfig, LpmConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub serve: ServeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    /// Foreground categories; the background class gets index `num_classes`.
    pub num_classes: usize,
    /// Output channels of each stride-2 stage.
    pub backbone_channels: Vec<usize>,
    /// RoI features are pooled from these stage indices and concatenated.
    pub roi_stages: Vec<usize>,
    pub roi_size: usize,
    pub fuse_channels: usize,
    pub head_hidden: usize,
    pub mask_side: usize,
    pub use_lpm: bool,
    pub use_gpm: bool,
    pub use_area_loss: bool,
    pub area_eps: f64,
    pub lpm: LpmSettings,
    pub gpm: GpmSettings,
    pub rpn: RpnConfig,
    pub inference: InferenceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            num_classes: 3,
            backbone_channels: vec![8, 16, 32],
            roi_stages: vec![0, 1],
            roi_size: 7,
            fuse_channels: 16,
            head_hidden: 128,
            mask_side: 28,
            use_lpm: true,
            use_gpm: true,
            use_area_loss: true,
            area_eps: 1e-7,
            lpm: LpmSettings::default(),
            gpm: GpmSettings::default(),
            rpn: RpnConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpmSettings {
    /// Side every region crop is resized to before tokenization.
    pub roi_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for LpmSettings {
    fn default() -> Self {
        Self {
            roi_size: 28,
            patch_size: 8,
            stride: 4,
            embed_dim: 32,
            mlp_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpmSettings {
    pub embed_dim: usize,
    pub heads: usize,
    pub loops: usize,
    pub global_patch: usize,
}

impl Default for GpmSettings {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            loops: 2,
            global_patch: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    /// Anchor side as a multiple of the level stride.
    pub anchor_scale: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub nms_iou: f64,
    pub train_top_k: usize,
    pub test_top_k: usize,
    pub min_size: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            anchor_scale: 4.0,
            positive_iou: 0.5,
            negative_iou: 0.3,
            nms_iou: 0.7,
            train_top_k: 8,
            test_top_k: 20,
            min_size: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub mask_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            mask_threshold: 0.5,
        }
    }
}

/// Learning rate over training: fixed, or cosine-annealed from `lr` to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: Option<u64>,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: LrSchedule,
    /// Fraction of ground-truth boxes added as jittered prompts.
    pub frac_gt: f64,
    /// Jitter amplitude as a fraction of box side.
    pub jitter: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: None,
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: 10.0,
            schedule: LrSchedule::Constant,
            frac_gt: 0.5,
            jitter: 0.05,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub profile: String,
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            profile: "ssdd-like".into(),
            size: 64,
            count: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub max_sessions: usize,
    /// Largest accepted image side in pixels.
    pub max_image_side: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            max_sessions: 16,
            max_image_side: 1024,
        }
    }
}

impl ModelConfig {
    pub fn lpm_config(&self) -> LpmConfig {
        LpmConfig {
            roi_size: self.lpm.roi_size,
            patch: ImagePatchConfig {
                patch_size: self.lpm.patch_size,
                stride: self.lpm.stride,
                embed_dim: self.lpm.embed_dim,
            },
            mlp_hidden: self.lpm.mlp_hidden,
        }
    }

    /// Local tokens of the global encoder reuse the local encoder's crop and patch grid.
    pub fn gpm_config(&self) -> GpmConfig {
        GpmConfig {
            attention: AttentionConfig {
                embed_dim: self.gpm.embed_dim,
                heads: self.gpm.heads,
                loops: self.gpm.loops,
            },
            global_patch: self.gpm.global_patch,
            local_roi_size: self.lpm.roi_size,
            local_patch: self.lpm.patch_size,
            local_stride: self.lpm.stride,
        }
    }

    /// Cumulative stride of the deepest stage; image sides must be multiples of it.
    pub fn total_stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    /// Pixel multiple image sides are padded to.
    pub fn pad_multiple(&self) -> usize {
        let m = self.total_stride();
        if self.use_gpm {
            lcm(m, self.gpm.global_patch)
        } else {
            m
        }
    }

    /// Same model with both prompt encoders and the area loss switched off.
    pub fn baseline(&self) -> ModelConfig {
        ModelConfig {
            use_lpm: false,
            use_gpm: false,
            use_area_loss: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.backbone_channels.len() < 2 {
            return bad("the backbone needs at least two stages".into());
        }
        if self.roi_stages.is_empty() || self.roi_stages.iter().any(|s| *s >= self.backbone_channels.len()) {
            return bad(format!("roi_stages {:?} out of range", self.roi_stages));
        }
        if self.num_classes == 0 || self.channels == 0 || self.roi_size == 0 || self.mask_side < 2 {
            return bad("num_classes, channels, roi_size must be positive and mask_side >= 2".into());
        }
        if !(self.area_eps > 0.0) {
            return bad("area_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rpn.negative_iou) || self.rpn.negative_iou > self.rpn.positive_iou {
            return bad("rpn thresholds must satisfy 0 <= negative_iou <= positive_iou".into());
        }
        self.lpm_config().validate()?;
        if self.use_gpm {
            self.gpm_config().validate()?;
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    a / gcd(a, b) * b
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets a dotted key such as `model.gpm.loops` from its TOML literal text.
    /// Bare words that do not parse as TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("`{key}` is not a table path")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) && !(key == "train.seed") {
                    return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
                }
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?;
        }
        let updated: Config = root.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        updated.model.validate()?;
        *self = updated;
        Ok(())
    }
}
