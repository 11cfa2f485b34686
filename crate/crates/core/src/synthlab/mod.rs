//! Synthetic scenes with controlled foreground ratio, corpus statistics, the
//! information-budget calculator and mask/box AP evaluation.

mod budget;
mod eval;
mod generate;
pub mod io;
mod stats;

pub use budget::{information_budget, Budget, InformationBudgetParams, StageValue};
pub use eval::{evaluate_detections, evaluate_masks, iou_thresholds, ApReport, ApSummary, Detection, AREA_LARGE, AREA_SMALL, RECALL_POINTS};
pub use generate::{generate_scene, GeneratorProfile, Shape, BIN_TARGETS};
pub use stats::{foreground_ratio, foreground_ratio_stats, ratio_bin, RatioStats, BIN_EDGES};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::image::Image;
use crate::mask::BitMask;

/// Names of the fixed category set, indexed by category id.
pub const CATEGORIES: [&str; 3] = ["blob", "capsule", "polygon"];

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Tight box of `mask` in pixel-edge coordinates.
    pub bbox: BBox,
    /// Full-resolution mask.
    pub mask: BitMask,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub profile: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<Instance>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Union of all instance masks.
    pub fn foreground(&self) -> BitMask {
        let mut m = BitMask::new(self.width(), self.height());
        for i in &self.instances {
            m.union_with(&i.mask);
        }
        m
    }
}
