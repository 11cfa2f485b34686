//! Dense objectness/box-delta head over every backbone stage and proposal selection.

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use rand::Rng;

use crate::config::RpnConfig;
use crate::geometry::{box_iou, nms, AnnotationFrame, BBox, ProposalSet};
use crate::nn;

/// Log-size deltas are clamped to this magnitude before exponentiation.
pub const DELTA_CLAMP: f64 = 4.0;

/// One square anchor per cell per stage, in (stage, y, x) raster order.
pub fn anchors(stage_dims: &[(usize, usize)], scale: f64) -> Vec<BBox> {
    let mut out = Vec::new();
    for (i, &(h, w)) in stage_dims.iter().enumerate() {
        let stride = (1usize << (i + 1)) as f64;
        let half = 0.5 * scale * stride;
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                out.push(BBox::new(cx - half, cy - half, cx + half, cy + half));
            }
        }
    }
    out
}

/// Deltas that move `reference` onto `target`.
pub fn encode_deltas(reference: &BBox, target: &BBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (tx - rx) / rw,
        (ty - ry) / rh,
        (target.width() / rw).ln(),
        (target.height() / rh).ln(),
    ]
}

/// Applies deltas to `reference` and clips the result to `frame`.
pub fn decode_deltas(reference: &BBox, d: &[f64], frame: &AnnotationFrame) -> BBox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = d[0] * rw + rx;
    let cy = d[1] * rh + ry;
    let w = rw * d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = rh * d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    BBox {
        x_min: (cx - w * 0.5).clamp(0.0, frame.width),
        y_min: (cy - h * 0.5).clamp(0.0, frame.height),
        x_max: (cx + w * 0.5).clamp(0.0, frame.width),
        y_max: (cy + h * 0.5).clamp(0.0, frame.height),
    }
}

pub fn init_rpn(params: &mut Params, channels: &[usize], rng: &mut impl Rng) {
    for (i, &c) in channels.iter().enumerate() {
        nn::init_conv(params, &format!("rpn.l{i}.conv"), c, c, 3, rng);
        nn::init_conv(params, &format!("rpn.l{i}.out"), c, 5, 1, rng);
        let w = params.get_mut(&format!("rpn.l{i}.out.w")).expect("just inserted");
        w.scale_assign(0.1);
    }
}

/// `[anchors, 5]`: objectness logit then four box deltas per anchor.
pub fn rpn_graph(g: &mut Graph, stages: &[Var]) -> Var {
    let mut levels = Vec::with_capacity(stages.len());
    for (i, &f) in stages.iter().enumerate() {
        let h = nn::conv(g, f, &format!("rpn.l{i}.conv"), 3, 1, 1);
        let h = g.gelu(h);
        let o = nn::conv(g, h, &format!("rpn.l{i}.out"), 1, 1, 0);
        let s = g.shape(o).to_vec();
        let flat = g.reshape(o, &[5, s[1] * s[2]]);
        levels.push(g.transpose(flat));
    }
    g.concat_rows(&levels)
}

/// Decoded boxes and objectness probabilities for every anchor.
pub fn decode_all(out: &Tensor, anchors: &[BBox], frame: &AnnotationFrame) -> (Vec<BBox>, Vec<f64>) {
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let row = out.row(i);
        boxes.push(decode_deltas(a, &row[1..5], frame));
        scores.push(1.0 / (1.0 + (-row[0]).exp()));
    }
    (boxes, scores)
}

/// Ranks by score (ties by index), drops boxes thinner than `min_size`, applies NMS and
/// keeps `top_k`. Returns anchor indices in ranking order.
pub fn select(boxes: &[BBox], scores: &[f64], top_k: usize, nms_iou: f64, min_size: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].width() >= min_size && boxes[i].height() >= min_size)
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = nms(boxes, &order, nms_iou);
    keep.truncate(top_k);
    keep
}

pub fn generate_proposals(
    features: &[Tensor],
    params: &Params,
    cfg: &RpnConfig,
    frame: &AnnotationFrame,
    top_k: usize,
    nms_iou: f64,
) -> ProposalSet {
    let mut g = Graph::with_params(params);
    let stages: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
    let out = rpn_graph(&mut g, &stages);
    let dims: Vec<(usize, usize)> = features.iter().map(|f| (f.shape()[1], f.shape()[2])).collect();
    let anchors = anchors(&dims, cfg.anchor_scale);
    proposals_from_output(g.value(out), &anchors, frame, top_k, nms_iou, cfg.min_size).0
}

/// Proposal set plus the anchor index of each proposal.
pub fn proposals_from_output(
    out: &Tensor,
    anchors: &[BBox],
    frame: &AnnotationFrame,
    top_k: usize,
    nms_iou: f64,
    min_size: f64,
) -> (ProposalSet, Vec<usize>) {
    let (boxes, scores) = decode_all(out, anchors, frame);
    let keep = select(&boxes, &scores, top_k, nms_iou, min_size);
    let set = ProposalSet::new(
        keep.iter().map(|&i| boxes[i]).collect(),
        keep.iter().map(|&i| scores[i]).collect(),
    )
    .expect("aligned");
    (set, keep)
}

/// Training targets for the dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    /// `[anchors, 1]` 0/1 objectness.
    pub objectness: Tensor,
    /// `[anchors, 1]`; positives weigh `1/npos`, negatives `1/nneg`, ignored anchors 0.
    pub objectness_weights: Tensor,
    /// `[anchors, 4]` deltas toward the matched ground truth.
    pub deltas: Tensor,
    /// `[anchors, 4]`, 1 on positive rows.
    pub delta_weights: Tensor,
    pub num_positive: usize,
}

/// Positive at IoU >= `positive_iou` or as the best anchor of some ground truth,
/// negative below `negative_iou`, ignored otherwise.
pub fn assign_anchors(anchors: &[BBox], gt: &[BBox], cfg: &RpnConfig) -> RpnTargets {
    let n = anchors.len();
    let mut label = vec![0i8; n];
    let mut matched = vec![0usize; n];
    if !gt.is_empty() {
        let mut best_for_gt = vec![(f64::NEG_INFINITY, 0usize); gt.len()];
        for (i, a) in anchors.iter().enumerate() {
            let mut best = (0.0, 0usize);
            for (j, b) in gt.iter().enumerate() {
                let iou = box_iou(a, b);
                if iou > best.0 {
                    best = (iou, j);
                }
                if iou > best_for_gt[j].0 {
                    best_for_gt[j] = (iou, i);
                }
            }
            matched[i] = best.1;
            label[i] = if best.0 >= cfg.positive_iou {
                1
            } else if best.0 < cfg.negative_iou {
                0
            } else {
                -1
            };
        }
        for (j, &(iou, i)) in best_for_gt.iter().enumerate() {
            if iou > 0.0 {
                label[i] = 1;
                matched[i] = j;
            }
        }
    }
    let npos = label.iter().filter(|l| **l == 1).count();
    let nneg = label.iter().filter(|l| **l == 0).count();
    let mut obj = vec![0.0; n];
    let mut ow = vec![0.0; n];
    let mut deltas = vec![0.0; n * 4];
    let mut dw = vec![0.0; n * 4];
    for i in 0..n {
        match label[i] {
            1 => {
                obj[i] = 1.0;
                ow[i] = 1.0 / npos as f64;
                deltas[i * 4..i * 4 + 4].copy_from_slice(&encode_deltas(&anchors[i], &gt[matched[i]]));
                dw[i * 4..i * 4 + 4].fill(1.0);
            }
            0 => ow[i] = 1.0 / nneg as f64,
            _ => {}
        }
    }
    RpnTargets {
        objectness: Tensor::new(&[n, 1], obj),
        objectness_weights: Tensor::new(&[n, 1], ow),
        deltas: Tensor::new(&[n, 4], deltas),
        delta_weights: Tensor::new(&[n, 4], dw),
        num_positive: npos,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_in_raster_order() {
        let a = anchors(&[(2, 2), (1, 1)], 4.0);
        assert_eq!(a.len(), 5);
        assert_eq!(a[0], BBox::new(-3.0, -3.0, 5.0, 5.0));
        assert_eq!(a[1], BBox::new(-1.0, -3.0, 7.0, 5.0));
        assert_eq!(a[4], BBox::new(-6.0, -6.0, 10.0, 10.0));
    }

    #[test]
    fn deltas_round_trip() {
        let frame = AnnotationFrame::of_size(100, 100);
        let a = BBox::new(10.0, 10.0, 30.0, 20.0);
        let t = BBox::new(12.0, 5.0, 50.0, 40.0);
        let d = encode_deltas(&a, &t);
        let back = decode_deltas(&a, &d, &frame);
        for (x, y) in back.to_array().iter().zip(t.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_scores_keep_raster_order() {
        let boxes: Vec<BBox> = (0..6).map(|i| BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0)).collect();
        assert_eq!(select(&boxes, &[0.5; 6], 3, 0.7, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn dominant_score_ranks_first() {
        let anchors = anchors(&[(4, 4)], 2.0);
        let mut out = Tensor::zeros(&[16, 5]);
        out.data_mut()[9 * 5] = 8.0;
        let frame = AnnotationFrame::of_size(8, 8);
        let (set, idx) = proposals_from_output(&out, &anchors, &frame, 5, 0.7, 1.0);
        assert_eq!(idx[0], 9);
        assert!(set.scores()[0] > set.scores()[1]);
        for b in set.boxes() {
            assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 8.0 && b.y_max <= 8.0);
        }
    }

    #[test]
    fn every_ground_truth_gets_a_positive() {
        let a = anchors(&[(8, 8)], 4.0);
        // Too small to reach the positive threshold with any anchor.
        let gt = [BBox::new(3.0, 3.0, 5.0, 5.0)];
        let t = assign_anchors(&a, &gt, &RpnConfig::default());
        assert_eq!(t.num_positive, 1);
        let w: f64 = t.objectness_weights.data().iter().zip(t.objectness.data()).filter(|(_, o)| **o == 0.0).map(|(w, _)| w).sum();
        assert!((w - 1.0).abs() < 1e-9);
    }
}
