//! Prompt sampling, the training step and the optimizer.

use boxprompt_autograd::{Graph, Params, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LrSchedule, TrainConfig};
use crate::geometry::{box_area, jitter_box, match_with_iou, AnnotationFrame, BBox, ProposalSet};
use crate::pipeline::head::BOX_DELTA_STD;
use crate::pipeline::loss::{total_loss_graph, AreaTargets, HeadTargets, LossBundle, PredVars, Targets};
use crate::pipeline::rpn::{self, anchors, assign_anchors, encode_deltas};
use crate::pipeline::{backbone, sanitize_box, FeatureVars, Model, PromptBatch, Provenance};
use crate::synthlab::Scene;
use crate::global_prompt::global_states;
use crate::{Error, Result};

/// IoU a prompt needs with a ground truth to count as that object.
pub const HEAD_POSITIVE_IOU: f64 = 0.5;

/// All proposals plus a seeded `frac_gt` share of the ground truth, each jittered.
pub fn sample_training_prompts(
    proposals: &ProposalSet,
    gt: &[BBox],
    frac_gt: f64,
    jitter_amp: f64,
    seed: u64,
    frame: &AnnotationFrame,
) -> Result<PromptBatch> {
    if !(0.0..=1.0).contains(&frac_gt) {
        return Err(Error::InvalidConfig(format!("frac_gt {frac_gt} outside [0, 1]")));
    }
    let mut batch = PromptBatch::default();
    for b in proposals.boxes() {
        batch.push(*b, Provenance::Proposal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..gt.len()).collect();
    idx.shuffle(&mut rng);
    let take = (frac_gt * gt.len() as f64).round() as usize;
    let mut chosen = idx[..take].to_vec();
    chosen.sort_unstable();
    for i in chosen {
        let s: u64 = rng.random();
        batch.push(jitter_box(&gt[i], jitter_amp, frame, s), Provenance::GtJittered);
    }
    Ok(batch)
}

/// SGD with momentum, optional global gradient-norm clipping and a learning-rate
/// schedule over `cfg.steps` updates.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub schedule: LrSchedule,
    pub total_steps: usize,
    steps_taken: usize,
    velocity: Params,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            clip_norm: cfg.clip_norm,
            schedule: cfg.schedule,
            total_steps: cfg.steps,
            steps_taken: 0,
            velocity: Params::new(),
        }
    }

    /// Learning rate the next update uses.
    pub fn current_lr(&self) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let progress = (self.steps_taken as f64 / self.total_steps.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let lr = self.current_lr();
        self.steps_taken += 1;
        let norm = grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let v = self.velocity.get_mut(name).expect("inserted above");
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + scale * gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Loss bundle and parameter gradients of one scene.
pub fn loss_and_gradients(model: &Model, scene: &Scene, cfg: &TrainConfig, seed: u64) -> Result<(LossBundle, Params)> {
    let mc = model.config();
    let image = scene.image.pad_to_multiple(mc.pad_multiple());
    let frame = AnnotationFrame::of_size(scene.image.width(), scene.image.height());
    let gt: Vec<BBox> = scene.instances.iter().map(|i| i.bbox).collect();

    let mut g = Graph::with_params(model.params());
    let stages = backbone::backbone_graph(&mut g, &image, &model.backbone_config())?;
    let global = if mc.use_gpm {
        global_states(&mut g, &image, &mc.gpm_config(), "gpm")?
    } else {
        Vec::new()
    };
    let feats = FeatureVars { stages, global };

    let rpn_out = rpn::rpn_graph(&mut g, &feats.stages);
    let dims: Vec<(usize, usize)> = feats.stages.iter().map(|&s| (g.shape(s)[1], g.shape(s)[2])).collect();
    let anchors = anchors(&dims, mc.rpn.anchor_scale);
    let rpn_targets = assign_anchors(&anchors, &gt, &mc.rpn);
    let (proposals, rows) = rpn::proposals_from_output(
        g.value(rpn_out),
        &anchors,
        &frame,
        mc.rpn.train_top_k,
        mc.rpn.nms_iou,
        mc.rpn.min_size,
    );

    let area = (mc.use_area_loss && !gt.is_empty()).then(|| {
        let matches = match_with_iou(proposals.boxes(), &gt);
        AreaTargets {
            anchors: rows.iter().map(|&r| anchors[r]).collect(),
            rows: rows.clone(),
            gt_areas: matches.iter().map(|m| box_area(&gt[m.expect("gt non-empty").index])).collect(),
            frame,
            eps: mc.area_eps,
        }
    });

    let prompts = sample_training_prompts(&proposals, &gt, cfg.frac_gt, cfg.jitter, seed, &frame)?;
    let boxes: Vec<BBox> = prompts.boxes.iter().map(|b| sanitize_box(b, &frame, 1.0)).collect();

    let (head, head_targets) = if boxes.is_empty() {
        (None, None)
    } else {
        let h = model.head_for_boxes(&mut g, &feats, &image, &boxes)?;
        (Some(h), Some(head_targets(scene, &boxes, mc.num_classes, mc.mask_side)))
    };
    let pred = PredVars {
        rpn: rpn_out,
        class_logits: head.map(|h| h.class_logits),
        box_deltas: head.map(|h| h.box_deltas),
        mask_logits: head.map(|h| h.mask_logits),
    };
    let targets = Targets {
        rpn: rpn_targets,
        area,
        head: head_targets,
    };
    let loss = total_loss_graph(&mut g, &pred, &targets);
    let bundle = loss.bundle(&g);
    let grads = g.backward(loss.total).into_params();
    Ok((bundle, grads))
}

/// Class, refinement and mask targets of prompt boxes against the scene's instances.
pub fn head_targets(scene: &Scene, boxes: &[BBox], num_classes: usize, mask_side: usize) -> HeadTargets {
    let gt: Vec<BBox> = scene.instances.iter().map(|i| i.bbox).collect();
    let matches = match_with_iou(boxes, &gt);
    let b = boxes.len();
    let side2 = mask_side * mask_side;
    let mut classes = Vec::with_capacity(b);
    let mut deltas = vec![0.0; b * 4];
    let mut dw = vec![0.0; b * 4];
    let mut masks = vec![0.0; b * side2 * num_classes];
    let mut mw = vec![0.0; b * side2 * num_classes];
    let mut npos = 0;
    for (i, m) in matches.iter().enumerate() {
        match m {
            Some(m) if m.iou >= HEAD_POSITIVE_IOU => {
                npos += 1;
                let inst = &scene.instances[m.index];
                classes.push(inst.category);
                let d = encode_deltas(&boxes[i], &inst.bbox);
                for k in 0..4 {
                    deltas[i * 4 + k] = d[k] / BOX_DELTA_STD[k];
                    dw[i * 4 + k] = 1.0;
                }
                let grid = inst.mask.sample_in(&boxes[i], mask_side);
                for (p, bit) in grid.bits().iter().enumerate() {
                    let at = (i * side2 + p) * num_classes + inst.category;
                    masks[at] = if *bit { 1.0 } else { 0.0 };
                    mw[at] = 1.0;
                }
            }
            _ => classes.push(num_classes),
        }
    }
    HeadTargets {
        classes,
        deltas: Tensor::new(&[b, 4], deltas),
        delta_weights: Tensor::new(&[b, 4], dw),
        masks: Tensor::new(&[b * side2, num_classes], masks),
        mask_weights: Tensor::new(&[b * side2, num_classes], mw),
        num_positive: npos,
    }
}

/// One forward/backward pass on `scene` followed by an optimizer update.
pub fn train_step(model: &mut Model, scene: &Scene, opt: &mut Sgd, cfg: &TrainConfig, seed: u64) -> Result<LossBundle> {
    if scene.instances.is_empty() {
        return Err(Error::InvalidConfig("training scenes need at least one instance".into()));
    }
    let (bundle, grads) = loss_and_gradients(model, scene, cfg, seed)?;
    opt.step(model.params_mut(), &grads);
    Ok(bundle)
}

/// Runs `cfg.steps` steps over `scenes` in seeded shuffled epochs. `on_step` sees the
/// step index and its losses.
pub fn fit(
    model: &mut Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossBundle),
) -> Result<Vec<LossBundle>> {
    let usable: Vec<&Scene> = scenes.iter().filter(|s| !s.instances.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidConfig("no training scene has instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..usable.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let scene = usable[order.pop().expect("refilled")];
        let s: u64 = rng.random();
        let bundle = train_step(model, scene, &mut opt, cfg, s)?;
        on_step(step, &bundle);
        history.push(bundle);
    }
    Ok(history)
}
