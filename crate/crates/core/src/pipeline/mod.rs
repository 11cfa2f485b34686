//! Two-stage promptable segmentation model: backbone, dense proposals, RoI features fused
//! with box prompts, and class/box/mask heads.

pub mod backbone;
pub mod head;
pub mod infer;
pub mod loss;
pub mod roi;
pub mod rpn;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use boxprompt_autograd::{Graph, Params, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::geometry::{AnnotationFrame, BBox};
use crate::global_prompt::{gpm_local_graph, init_gpm};
use crate::image::Image;
use crate::local_prompt::{init_lpm, lpm_graph};
use crate::mask::BitMask;
use crate::tokenizer::crop_batch;
use crate::{Error, Result};

use backbone::BackboneConfig;
use head::{HeadVars, MaskPrompts};

/// Where a prompt box came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Proposal,
    GtJittered,
    Manual,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBatch {
    pub boxes: Vec<BBox>,
    pub provenance: Vec<Provenance>,
}

impl PromptBatch {
    pub fn manual(boxes: Vec<BBox>) -> Self {
        let provenance = vec![Provenance::Manual; boxes.len()];
        Self { boxes, provenance }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn push(&mut self, b: BBox, p: Provenance) {
        self.boxes.push(b);
        self.provenance.push(p);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    /// `mask_side x mask_side` grid over `bbox`.
    pub mask: BitMask,
    /// Set on results that an automatic run would have dropped: the background class
    /// won or the score fell below the threshold.
    pub below_threshold: bool,
    pub provenance: Provenance,
}

impl InstanceResult {
    /// Mask pasted into a full `width x height` frame.
    pub fn full_mask(&self, width: usize, height: usize) -> BitMask {
        self.mask.paste(&self.bbox, width, height)
    }
}

pub struct Model {
    config: ModelConfig,
    params: Params,
    backbone_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            backbone_calls: AtomicU64::new(self.backbone_invocations()),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

/// Graph nodes of the image-level features.
pub(crate) struct FeatureVars {
    pub stages: Vec<Var>,
    pub global: Vec<Var>,
}

impl Model {
    /// Freshly initialized model, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self::assemble(config, params))
    }

    /// Model from stored parameters; names and shapes must match the configuration.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Model> {
        config.validate()?;
        let reference = init_params(&config, 0);
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::ShapeMismatch(format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters stored, {} expected",
                params.len(),
                reference.len()
            )));
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Params) -> Model {
        Model {
            config,
            params,
            backbone_calls: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// How many times the backbone has run through this model.
    pub fn backbone_invocations(&self) -> u64 {
        self.backbone_calls.load(Ordering::SeqCst)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        backbone_config(&self.config)
    }

    pub(crate) fn note_backbone_call(&self) {
        self.backbone_calls.fetch_add(1, Ordering::SeqCst);
    }

    fn strides(&self) -> Vec<f64> {
        (0..self.config.backbone_channels.len()).map(|i| (1usize << (i + 1)) as f64).collect()
    }

    /// Head outputs for `boxes`, which must be non-empty and lie inside `frame`.
    pub(crate) fn head_for_boxes(
        &self,
        g: &mut Graph,
        feats: &FeatureVars,
        image: &Image,
        boxes: &[BBox],
    ) -> Result<HeadVars> {
        let cfg = &self.config;
        let strides = self.strides();
        let stages: Vec<(Var, f64)> = cfg.roi_stages.iter().map(|&s| (feats.stages[s], strides[s])).collect();
        let roi = roi::roi_features(g, &stages, boxes, cfg.roi_size)?;
        let mut pooled = Vec::new();
        let mut prompts = MaskPrompts::default();
        if cfg.use_lpm || cfg.use_gpm {
            let crops = crop_batch(image, boxes, cfg.lpm.roi_size)?;
            if cfg.use_lpm {
                let l = lpm_graph(g, &crops, &cfg.lpm_config(), "lpm");
                pooled.push(l.pooled);
                prompts.local = Some(l.tokens);
            }
            if cfg.use_gpm {
                let gl = gpm_local_graph(g, &crops, &feats.global, &cfg.gpm_config(), "gpm")?;
                pooled.push(gl.pooled);
                prompts.global = Some(gl.tokens);
            }
        }
        let cells = cfg.roi_size * cfg.roi_size;
        let fused = head::fuse_graph(g, roi, &pooled, cells);
        Ok(head::head_graph(g, fused, boxes.len(), prompts, cfg))
    }
}

pub fn backbone_config(cfg: &ModelConfig) -> BackboneConfig {
    BackboneConfig {
        in_channels: cfg.channels,
        channels: cfg.backbone_channels.clone(),
    }
}

/// Each module draws from its own stream of the seed, so models that differ only in
/// optional modules start from identical shared weights.
fn init_params(cfg: &ModelConfig, seed: u64) -> Params {
    let rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };
    let mut params = Params::new();
    backbone::init_backbone(&mut params, &backbone_config(cfg), &mut rng(0));
    rpn::init_rpn(&mut params, &cfg.backbone_channels, &mut rng(1));
    if cfg.use_lpm {
        init_lpm(&mut params, "lpm", &cfg.lpm_config(), cfg.channels, &mut rng(2));
    }
    if cfg.use_gpm {
        init_gpm(&mut params, "gpm", &cfg.gpm_config(), cfg.channels, &mut rng(3));
    }
    head::init_head(&mut params, cfg, &mut rng(4));
    params
}

/// Clamps a box to the frame and widens it to at least `min_side` pixels per axis.
pub fn sanitize_box(b: &BBox, frame: &AnnotationFrame, min_side: f64) -> BBox {
    let mut r = b.clamp_to(frame);
    for (lo, hi, limit) in [(&mut r.x_min, &mut r.x_max, frame.width), (&mut r.y_min, &mut r.y_max, frame.height)] {
        if *hi - *lo < min_side {
            let c = 0.5 * (*lo + *hi);
            *lo = (c - 0.5 * min_side).clamp(0.0, (limit - min_side).max(0.0));
            *hi = (*lo + min_side).min(limit);
        }
    }
    r
}
