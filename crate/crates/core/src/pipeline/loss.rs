//! The four-part training objective and its targets.

use boxprompt_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::geometry::{AnnotationFrame, BBox};
use crate::pipeline::rpn::{RpnTargets, DELTA_CLAMP};

/// Transition point of the smooth-L1 box losses.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_parea: f64,
    pub l_box: f64,
    pub l_class: f64,
    pub l_mask: f64,
    pub l_total: f64,
}

impl LossBundle {
    /// Bundle whose total is the plain sum of the four components.
    pub fn from_components(l_parea: f64, l_box: f64, l_class: f64, l_mask: f64) -> Self {
        Self {
            l_parea,
            l_box,
            l_class,
            l_mask,
            l_total: l_parea + l_box + l_class + l_mask,
        }
    }
}

/// Proposals entering the area loss, with the area of each one's max-IoU ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaTargets {
    /// Row of each proposal in the dense head output.
    pub rows: Vec<usize>,
    pub anchors: Vec<BBox>,
    pub gt_areas: Vec<f64>,
    pub frame: AnnotationFrame,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    /// Class per prompt; the background index is `num_classes`.
    pub classes: Vec<usize>,
    /// `[b, 4]` normalized refinement deltas.
    pub deltas: Tensor,
    /// `[b, 4]`, 1 on rows matched to a ground truth.
    pub delta_weights: Tensor,
    /// `[b * side * side, classes]`.
    pub masks: Tensor,
    pub mask_weights: Tensor,
    pub num_positive: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub rpn: RpnTargets,
    /// `None` turns the area term off.
    pub area: Option<AreaTargets>,
    /// `None` when there were no prompts.
    pub head: Option<HeadTargets>,
}

/// Graph nodes the objective reads.
#[derive(Clone, Copy, Debug)]
pub struct PredVars {
    /// `[anchors, 5]`.
    pub rpn: Var,
    pub class_logits: Option<Var>,
    pub box_deltas: Option<Var>,
    pub mask_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub parea: Var,
    pub box_: Var,
    pub class: Var,
    pub mask: Var,
    pub total: Var,
}

impl LossVars {
    pub fn bundle(&self, g: &Graph) -> LossBundle {
        let b = LossBundle::from_components(
            g.value(self.parea).item(),
            g.value(self.box_).item(),
            g.value(self.class).item(),
            g.value(self.mask).item(),
        );
        debug_assert_eq!(b.l_total.to_bits(), g.value(self.total).item().to_bits());
        b
    }
}

fn column(g: &mut Graph, values: impl Iterator<Item = f64>) -> Var {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    g.constant(Tensor::new(&[n, 1], v))
}

/// Area loss on proposals decoded from the dense head output, differentiable in the deltas.
pub fn area_loss_graph(g: &mut Graph, rpn: Var, t: &AreaTargets) -> Var {
    if t.rows.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let rows = g.gather_rows(rpn, &t.rows);
    let d = g.slice_cols(rows, 1, 4);
    let a = &t.anchors;
    let mut side = |axis: usize| -> (Var, Var) {
        let dc = g.slice_cols(d, axis, 1);
        let ds = g.slice_cols(d, axis + 2, 1);
        let size = column(g, a.iter().map(|b| if axis == 0 { b.width() } else { b.height() }));
        let center = column(g, a.iter().map(|b| if axis == 0 { b.center().0 } else { b.center().1 }));
        let c = g.mul(dc, size);
        let c = g.add(c, center);
        let ds = g.clamp(ds, -DELTA_CLAMP, DELTA_CLAMP);
        let e = g.exp(ds);
        let len = g.mul(size, e);
        let half = g.scale(len, 0.5);
        let limit = if axis == 0 { t.frame.width } else { t.frame.height };
        let lo = g.sub(c, half);
        let lo = g.clamp(lo, 0.0, limit);
        let hi = g.add(c, half);
        let hi = g.clamp(hi, 0.0, limit);
        (lo, hi)
    };
    let (x0, x1) = side(0);
    let (y0, y1) = side(1);
    let w = g.sub(x1, x0);
    let h = g.sub(y1, y0);
    let area = g.mul(w, h);
    let gt = column(g, t.gt_areas.iter().copied());
    let inv = column(g, t.gt_areas.iter().map(|ga| 1.0 / (ga + t.eps)));
    let err = g.sub(area, gt);
    let rel = g.mul(err, inv);
    let sq = g.square(rel);
    g.mean(sq)
}

pub fn total_loss_graph(g: &mut Graph, pred: &PredVars, t: &Targets) -> LossVars {
    let obj = g.slice_cols(pred.rpn, 0, 1);
    let rpn_class = g.bce_with_logits(obj, t.rpn.objectness.clone(), t.rpn.objectness_weights.clone(), 1.0);
    let deltas = g.slice_cols(pred.rpn, 1, 4);
    let rpn_box = g.smooth_l1(
        deltas,
        t.rpn.deltas.clone(),
        t.rpn.delta_weights.clone(),
        SMOOTH_L1_BETA,
        t.rpn.num_positive.max(1) as f64,
    );
    let parea = match &t.area {
        Some(a) => area_loss_graph(g, pred.rpn, a),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let (class, box_, mask) = match (&t.head, pred.class_logits, pred.box_deltas, pred.mask_logits) {
        (Some(h), Some(cl), Some(bd), Some(ml)) => {
            let ce = g.cross_entropy(cl, &h.classes);
            let norm = h.num_positive.max(1) as f64;
            let hb = g.smooth_l1(bd, h.deltas.clone(), h.delta_weights.clone(), SMOOTH_L1_BETA, norm);
            let side2 = h.masks.rows() / h.classes.len();
            let m = g.bce_with_logits(ml, h.masks.clone(), h.mask_weights.clone(), norm * side2 as f64);
            let class = g.add(rpn_class, ce);
            let box_ = g.add(rpn_box, hb);
            (class, box_, m)
        }
        _ => (rpn_class, rpn_box, g.constant(Tensor::scalar(0.0))),
    };
    let s = g.add(parea, box_);
    let s = g.add(s, class);
    let total = g.add(s, mask);
    LossVars {
        parea,
        box_,
        class,
        mask,
        total,
    }
}

/// Prediction tensors as produced by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub rpn: Tensor,
    pub class_logits: Option<Tensor>,
    pub box_deltas: Option<Tensor>,
    pub mask_logits: Option<Tensor>,
}

pub fn total_loss(pred: &Predictions, targets: &Targets) -> LossBundle {
    let mut g = Graph::new();
    let vars = PredVars {
        rpn: g.constant(pred.rpn.clone()),
        class_logits: pred.class_logits.clone().map(|t| g.constant(t)),
        box_deltas: pred.box_deltas.clone().map(|t| g.constant(t)),
        mask_logits: pred.mask_logits.clone().map(|t| g.constant(t)),
    };
    total_loss_graph(&mut g, &vars, targets).bundle(&g)
}
