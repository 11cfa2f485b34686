//! Encode-once inference: image features are computed a single time and every later
//! box prompt reuses them.

use boxprompt_autograd::{Graph, Tensor};
use sha2::{Digest, Sha256};

use crate::geometry::{nms, AnnotationFrame, BBox, ProposalSet};
use crate::global_prompt::global_states;
use crate::image::Image;
use crate::mask::BitMask;
use crate::pipeline::head::BOX_DELTA_STD;
use crate::pipeline::rpn::{self, anchors, decode_deltas};
use crate::pipeline::{backbone, sanitize_box, FeatureVars, InstanceResult, Model, PromptBatch, Provenance};
use crate::Result;

/// Cached image-level features of one encoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionFeatures {
    /// Input padded to the model's side multiple.
    pub image: Image,
    pub width: usize,
    pub height: usize,
    /// Backbone stage maps `[c, h, w]`.
    pub stages: Vec<Tensor>,
    /// Global token states per loop (empty without the global encoder).
    pub global: Vec<Tensor>,
}

impl SessionFeatures {
    pub fn frame(&self) -> AnnotationFrame {
        AnnotationFrame::of_size(self.width, self.height)
    }

    /// SHA-256 over the little-endian bytes of every cached tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.stages.iter().chain(&self.global) {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

struct RawHead {
    probs: Vec<f64>,
    deltas: [f64; 4],
    /// `[side * side, classes]` probabilities.
    masks: Vec<f64>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Model {
    /// Runs the backbone (and the image-only part of the global encoder) once.
    pub fn encode(&self, image: &Image) -> Result<SessionFeatures> {
        let cfg = self.config();
        let padded = image.pad_to_multiple(cfg.pad_multiple());
        let mut g = Graph::with_params(self.params());
        self.note_backbone_call();
        let stages = backbone::backbone_graph(&mut g, &padded, &self.backbone_config())?;
        let global = if cfg.use_gpm {
            global_states(&mut g, &padded, &cfg.gpm_config(), "gpm")?
        } else {
            Vec::new()
        };
        Ok(SessionFeatures {
            width: image.width(),
            height: image.height(),
            stages: stages.iter().map(|&v| g.value(v).clone()).collect(),
            global: global.iter().map(|&v| g.value(v).clone()).collect(),
            image: padded,
        })
    }

    fn run_head(&self, feats: &SessionFeatures, boxes: &[BBox]) -> Result<Vec<RawHead>> {
        let mut g = Graph::with_params(self.params());
        let fv = FeatureVars {
            stages: feats.stages.iter().map(|t| g.constant(t.clone())).collect(),
            global: feats.global.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let h = self.head_for_boxes(&mut g, &fv, &feats.image, boxes)?;
        let k = self.config().num_classes;
        let side2 = self.config().mask_side * self.config().mask_side;
        let cls = g.value(h.class_logits);
        let bd = g.value(h.box_deltas);
        let ml = g.value(h.mask_logits);
        Ok((0..boxes.len())
            .map(|i| RawHead {
                probs: softmax(cls.row(i)),
                deltas: [bd.row(i)[0], bd.row(i)[1], bd.row(i)[2], bd.row(i)[3]],
                masks: ml.data()[i * side2 * k..(i + 1) * side2 * k]
                    .iter()
                    .map(|v| 1.0 / (1.0 + (-v).exp()))
                    .collect(),
            })
            .collect())
    }

    /// One result per prompt: class and refined box from the prompt, then the mask on
    /// the refined box. Nothing is dropped; `below_threshold` marks weak results.
    fn decode_all(&self, feats: &SessionFeatures, prompts: &PromptBatch) -> Result<Vec<InstanceResult>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = self.config();
        let frame = feats.frame();
        let boxes: Vec<BBox> = prompts.boxes.iter().map(|b| sanitize_box(b, &frame, 1.0)).collect();
        let first = self.run_head(feats, &boxes)?;
        let k = cfg.num_classes;
        let refined: Vec<BBox> = boxes
            .iter()
            .zip(&first)
            .map(|(b, r)| {
                let d: Vec<f64> = r.deltas.iter().zip(BOX_DELTA_STD).map(|(d, s)| d * s).collect();
                sanitize_box(&decode_deltas(b, &d, &frame), &frame, 1.0)
            })
            .collect();
        let second = self.run_head(feats, &refined)?;
        let side = cfg.mask_side;
        let mut out = Vec::with_capacity(boxes.len());
        for i in 0..boxes.len() {
            let probs = &first[i].probs;
            let (category, score) = probs[..k]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, p)| if *p > acc.1 { (c, *p) } else { acc });
            let background = probs[k] >= score;
            let mask = BitMask::from_fn(side, side, |x, y| {
                second[i].masks[(y * side + x) * k + category] > cfg.inference.mask_threshold
            });
            out.push(InstanceResult {
                bbox: refined[i],
                category,
                score,
                mask,
                below_threshold: background || score < cfg.inference.score_threshold,
                provenance: prompts.provenance[i],
            });
        }
        Ok(out)
    }

    /// Decodes every prompt; results of non-manual prompts that are background or below
    /// the score threshold are dropped, manual ones are kept and flagged.
    pub fn decode_instances(&self, feats: &SessionFeatures, prompts: &PromptBatch) -> Result<Vec<InstanceResult>> {
        Ok(self
            .decode_all(feats, prompts)?
            .into_iter()
            .filter(|r| r.provenance == Provenance::Manual || !r.below_threshold)
            .collect())
    }

    /// Box-prompted segmentation on cached features; the backbone does not run.
    pub fn promptable_segment(&self, feats: &SessionFeatures, boxes: &[BBox]) -> Result<Vec<InstanceResult>> {
        self.decode_all(feats, &PromptBatch::manual(boxes.to_vec()))
    }

    pub fn proposals(&self, feats: &SessionFeatures, top_k: usize) -> ProposalSet {
        let mut g = Graph::with_params(self.params());
        let stages: Vec<_> = feats.stages.iter().map(|t| g.constant(t.clone())).collect();
        let out = rpn::rpn_graph(&mut g, &stages);
        let dims: Vec<(usize, usize)> = feats.stages.iter().map(|t| (t.shape()[1], t.shape()[2])).collect();
        let anchors = anchors(&dims, self.config().rpn.anchor_scale);
        let rc = &self.config().rpn;
        rpn::proposals_from_output(g.value(out), &anchors, &feats.frame(), top_k, rc.nms_iou, rc.min_size).0
    }

    /// Automatic instance segmentation from the model's own proposals.
    pub fn segment_features(&self, feats: &SessionFeatures) -> Result<Vec<InstanceResult>> {
        let cfg = self.config();
        let proposals = self.proposals(feats, cfg.rpn.test_top_k);
        let mut prompts = PromptBatch::default();
        for b in proposals.boxes() {
            prompts.push(*b, Provenance::Proposal);
        }
        let mut results = self.decode_instances(feats, &prompts)?;
        let mut order: Vec<usize> = (0..results.len()).collect();
        order.sort_by(|&a, &b| results[b].score.total_cmp(&results[a].score).then(a.cmp(&b)));
        let mut keep = Vec::new();
        for c in 0..cfg.num_classes {
            let idx: Vec<usize> = order.iter().copied().filter(|&i| results[i].category == c).collect();
            let boxes: Vec<BBox> = results.iter().map(|r| r.bbox).collect();
            keep.extend(nms(&boxes, &idx, cfg.inference.nms_iou));
        }
        keep.sort_by(|&a, &b| results[b].score.total_cmp(&results[a].score).then(a.cmp(&b)));
        keep.truncate(cfg.inference.max_detections);
        let mut taken: Vec<Option<InstanceResult>> = results.drain(..).map(Some).collect();
        Ok(keep.into_iter().map(|i| taken[i].take().expect("unique index")).collect())
    }

    pub fn segment(&self, image: &Image) -> Result<Vec<InstanceResult>> {
        let feats = self.encode(image)?;
        self.segment_features(&feats)
    }
}
