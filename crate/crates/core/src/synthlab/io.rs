//! Corpus layout on disk: `scene_NNNNN.png`, a `scene_NNNNN.json` sidecar per
//! scene and a `manifest.json` listing every scene.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Instance, Scene, SceneMeta, CATEGORIES};
use crate::geometry::BBox;
use crate::image::Image;
use crate::mask::{BitMask, Rle};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox: [f64; 4],
    pub category: usize,
    pub category_name: String,
    pub mask_rle: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub profile: String,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub profile: String,
    pub size: usize,
    pub scenes: Vec<ManifestEntry>,
}

impl Annotation {
    pub fn of_scene(scene: &Scene) -> Self {
        Self {
            width: scene.width(),
            height: scene.height(),
            seed: scene.meta.seed,
            profile: scene.meta.profile.clone(),
            instances: scene
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    bbox: i.bbox.to_array(),
                    category: i.category,
                    category_name: CATEGORIES[i.category].to_string(),
                    mask_rle: i.mask.to_rle(),
                })
                .collect(),
        }
    }

    pub fn into_scene(self, image: Image) -> Result<Scene> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "annotation is {}x{} but the image is {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        let instances = self
            .instances
            .into_iter()
            .map(|r| {
                if r.category >= CATEGORIES.len() {
                    return Err(Error::ShapeMismatch(format!("unknown category {}", r.category)));
                }
                let [x0, y0, x1, y1] = r.bbox;
                let bbox = BBox::try_new(x0, y0, x1, y1)
                    .ok_or_else(|| Error::ShapeMismatch(format!("invalid box {:?}", r.bbox)))?;
                let mask = BitMask::from_rle(&r.mask_rle)?;
                if mask.width() != self.width || mask.height() != self.height {
                    return Err(Error::ShapeMismatch("mask size differs from the image".into()));
                }
                Ok(Instance {
                    bbox,
                    mask,
                    category: r.category,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            image,
            instances,
            meta: SceneMeta {
                seed: self.seed,
                profile: self.profile,
            },
        })
    }
}

/// Writes every scene plus the manifest into `dir`, creating it if needed.
pub fn write_corpus(dir: &Path, scenes: &[Scene], profile: &str) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let image = format!("scene_{i:05}.png");
        let annotation = format!("scene_{i:05}.json");
        scene.image.save_png(&dir.join(&image))?;
        fs::write(dir.join(&annotation), serde_json::to_vec(&Annotation::of_scene(scene))?)?;
        entries.push(ManifestEntry {
            image,
            annotation,
            seed: scene.meta.seed,
        });
    }
    let manifest = CorpusManifest {
        profile: profile.to_string(),
        size: scenes.first().map_or(0, |s| s.width()),
        scenes: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Scene>> {
    read_manifest(dir)?
        .scenes
        .iter()
        .map(|e| {
            let image = Image::load(&dir.join(&e.image))?;
            let ann: Annotation = serde_json::from_slice(&fs::read(dir.join(&e.annotation))?)?;
            ann.into_scene(image)
        })
        .collect()
}
