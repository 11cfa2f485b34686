//! Axis-aligned boxes, overlap, proposal matching and the proposal area loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, corner representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box from two corners, reordering so that min <= max.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x_min: x0.min(x1),
            y_min: y0.min(y1),
            x_max: x0.max(x1),
            y_max: y0.max(y1),
        }
    }

    /// Strict constructor: rejects non-finite values and inverted corners.
    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.is_valid().then_some(b)
    }

    /// Converts from `(x_min, y_min, w, h)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        box_area(self)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Intersection with `[0, width] x [0, height]`; may have zero area.
    pub fn clamp_to(&self, frame: &AnnotationFrame) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, frame.width),
            y_min: self.y_min.clamp(0.0, frame.height),
            x_max: self.x_max.clamp(0.0, frame.width),
            y_max: self.y_max.clamp(0.0, frame.height),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }
}

/// Scored boxes in ranking order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    boxes: Vec<BBox>,
    scores: Vec<f64>,
}

impl ProposalSet {
    pub fn new(boxes: Vec<BBox>, scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} boxes but {} scores",
                boxes.len(),
                scores.len()
            )));
        }
        Ok(Self { boxes, scores })
    }

    /// Proposals with unit scores.
    pub fn from_boxes(boxes: Vec<BBox>) -> Self {
        let scores = vec![1.0; boxes.len()];
        Self { boxes, scores }
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Pixel extent of the coordinate frame a set of boxes is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFrame {
    pub width: f64,
    pub height: f64,
}

impl AnnotationFrame {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidFrame { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn of_size(width: usize, height: usize) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
        }
    }

    fn check(&self) -> Result<()> {
        Self::new(self.width, self.height).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaLossConfig {
    pub eps: f64,
}

impl Default for AreaLossConfig {
    fn default() -> Self {
        Self { eps: 1e-7 }
    }
}

impl AreaLossConfig {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("area loss eps must be positive, got {eps}")));
        }
        Ok(Self { eps })
    }
}

pub fn box_area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn rescale_to_frame(p: &ProposalSet, from: AnnotationFrame, to: AnnotationFrame) -> Result<ProposalSet> {
    from.check()?;
    to.check()?;
    let (sx, sy) = (to.width / from.width, to.height / from.height);
    Ok(ProposalSet {
        boxes: p.boxes.iter().map(|b| b.scale(sx, sy)).collect(),
        scores: p.scores.clone(),
    })
}

/// Max-IoU ground-truth match of one proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index: usize,
    pub iou: f64,
}

/// Matches every box to the ground truth of highest IoU, lowest index on ties.
///
/// A box overlapping nothing still matches its argmax (index 0 when all IoUs are 0).
pub fn match_with_iou(boxes: &[BBox], gt: &[BBox]) -> Vec<Option<Match>> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<Match> = None;
            for (i, g) in gt.iter().enumerate() {
                let iou = box_iou(b, g);
                if best.is_none_or(|m| iou > m.iou) {
                    best = Some(Match { index: i, iou });
                }
            }
            best
        })
        .collect()
}

pub fn match_by_max_iou(p: &ProposalSet, gt: &[BBox]) -> Vec<Option<usize>> {
    match_with_iou(&p.boxes, gt)
        .into_iter()
        .map(|m| m.map(|m| m.index))
        .collect()
}

/// Value of the proposal area loss with matching diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaLoss {
    pub value: f64,
    /// Set when there were no ground-truth boxes to match against.
    pub no_targets: bool,
    /// Proposals whose best match has zero overlap.
    pub zero_iou_matches: usize,
    pub matches: Vec<Option<Match>>,
}

/// Mean squared relative area error between each proposal and its max-IoU ground truth.
///
/// `frames` is `(proposal frame, ground-truth frame)`; proposals are rescaled into the
/// ground-truth frame before matching.
pub fn parea_loss(
    p: &ProposalSet,
    gt: &[BBox],
    frames: (AnnotationFrame, AnnotationFrame),
    cfg: &AreaLossConfig,
) -> Result<AreaLoss> {
    let scaled = rescale_to_frame(p, frames.0, frames.1)?;
    if gt.is_empty() || p.is_empty() {
        return Ok(AreaLoss {
            value: 0.0,
            no_targets: gt.is_empty(),
            zero_iou_matches: 0,
            matches: vec![None; p.len()],
        });
    }
    let matches = match_with_iou(&scaled.boxes, gt);
    let mut total = 0.0;
    let mut zero = 0;
    for (b, m) in scaled.boxes.iter().zip(&matches) {
        let m = m.expect("non-empty ground truth always matches");
        if m.iou == 0.0 {
            zero += 1;
        }
        let gt_area = box_area(&gt[m.index]);
        let err = (box_area(b) - gt_area).abs();
        let rel = err / (gt_area + cfg.eps);
        total += rel * rel;
    }
    Ok(AreaLoss {
        value: total / p.len() as f64,
        no_targets: false,
        zero_iou_matches: zero,
        matches,
    })
}

/// Perturbs each coordinate uniformly within `±amplitude * side`, then clamps to `bounds`.
pub fn jitter_box(b: &BBox, amplitude: f64, bounds: &AnnotationFrame, seed: u64) -> BBox {
    if amplitude <= 0.0 {
        return b.clamp_to(bounds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (b.width(), b.height());
    let mut shift = |side: f64| {
        let r = amplitude * side;
        if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        }
    };
    let x0 = b.x_min + shift(w);
    let y0 = b.y_min + shift(h);
    let x1 = b.x_max + shift(w);
    let y1 = b.y_max + shift(h);
    BBox::new(x0, y0, x1, y1).clamp_to(bounds)
}

/// Greedy non-maximum suppression; returns kept indices in input order of `order`.
pub fn nms(boxes: &[BBox], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for &i in order {
        if keep.iter().all(|&k| box_iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn area_examples() {
        assert_eq!(box_area(&b(0.0, 0.0, 2.0, 3.0)), 6.0);
        assert_eq!(box_area(&b(5.0, 5.0, 5.0, 9.0)), 0.0);
        assert_eq!(box_area(&b(10.0, 10.0, 14.0, 12.0)), 8.0);
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((box_iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // Two zero-area boxes have zero union.
        assert_eq!(box_iou(&b(1.0, 1.0, 1.0, 1.0), &b(1.0, 1.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn rescale_examples() {
        let p = ProposalSet::new(vec![b(80.0, 80.0, 160.0, 160.0)], vec![0.7]).unwrap();
        let f800 = AnnotationFrame::new(800.0, 800.0).unwrap();
        let f400 = AnnotationFrame::new(400.0, 400.0).unwrap();
        assert_eq!(rescale_to_frame(&p, f800, f800).unwrap(), p);
        let r = rescale_to_frame(&p, f800, f400).unwrap();
        assert_eq!(r.boxes()[0], b(40.0, 40.0, 80.0, 80.0));
        assert_eq!(r.scores(), &[0.7]);
        let bad = AnnotationFrame {
            width: 0.0,
            height: 400.0,
        };
        assert!(matches!(rescale_to_frame(&p, f800, bad), Err(Error::InvalidFrame { .. })));
        assert!(AnnotationFrame::new(0.0, 10.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let gt_a = b(0.0, 0.0, 10.0, 10.0);
        let p = ProposalSet::from_boxes(vec![gt_a]);
        assert_eq!(match_by_max_iou(&p, &[gt_a]), vec![Some(0)]);

        // IoU 0.5 against A, 0.2 against B.
        let prop = b(0.0, 0.0, 10.0, 5.0);
        let a = b(0.0, 0.0, 10.0, 10.0);
        let gb = b(0.0, 0.0, 10.0, 1.0);
        assert!((box_iou(&prop, &a) - 0.5).abs() < 1e-12);
        assert!((box_iou(&prop, &gb) - 0.2).abs() < 1e-12);
        assert_eq!(match_by_max_iou(&ProposalSet::from_boxes(vec![prop]), &[gb, a]), vec![Some(1)]);

        // Exact tie resolves to the lowest index.
        let tie = b(0.0, 0.0, 2.0, 1.0);
        let g0 = b(0.0, 0.0, 1.0, 1.0);
        let g1 = b(1.0, 0.0, 2.0, 1.0);
        assert_eq!(match_by_max_iou(&ProposalSet::from_boxes(vec![tie]), &[g0, g1]), vec![Some(0)]);
        assert_eq!(match_by_max_iou(&ProposalSet::from_boxes(vec![tie]), &[]), vec![None]);
    }

    #[test]
    fn area_loss_examples() {
        let frames = (AnnotationFrame::of_size(64, 64), AnnotationFrame::of_size(64, 64));
        let cfg = AreaLossConfig::default();
        let g = b(0.0, 0.0, 10.0, 10.0);
        let same = parea_loss(&ProposalSet::from_boxes(vec![g]), &[g], frames, &cfg).unwrap();
        assert_eq!(same.value, 0.0);

        let gt = b(0.0, 0.0, 10.0, 10.0);
        let p = b(0.0, 0.0, 20.0, 10.0);
        let l = parea_loss(&ProposalSet::from_boxes(vec![p]), &[gt], frames, &cfg).unwrap();
        let expected = (100.0f64 / (100.0 + 1e-7)).powi(2);
        assert!((l.value - expected).abs() < 1e-15);
        assert!((l.value - 1.0).abs() < 1e-8);

        let gt = b(0.0, 0.0, 20.0, 10.0);
        let p1 = b(0.0, 0.0, 10.0, 10.0);
        let p2 = b(0.0, 0.0, 30.0, 10.0);
        let l = parea_loss(&ProposalSet::from_boxes(vec![p1, p2]), &[gt], frames, &cfg).unwrap();
        assert!((l.value - 0.25).abs() < 1e-9);
    }

    #[test]
    fn area_loss_without_targets_is_flagged_zero() {
        let frames = (AnnotationFrame::of_size(64, 64), AnnotationFrame::of_size(64, 64));
        let p = ProposalSet::from_boxes(vec![b(0.0, 0.0, 3.0, 3.0)]);
        let l = parea_loss(&p, &[], frames, &AreaLossConfig::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.no_targets);
        let l = parea_loss(&ProposalSet::default(), &[b(0.0, 0.0, 1.0, 1.0)], frames, &AreaLossConfig::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(!l.no_targets);
    }

    #[test]
    fn zero_overlap_proposals_still_match() {
        let frames = (AnnotationFrame::of_size(64, 64), AnnotationFrame::of_size(64, 64));
        let p = ProposalSet::from_boxes(vec![b(50.0, 50.0, 60.0, 60.0)]);
        let l = parea_loss(&p, &[b(0.0, 0.0, 5.0, 5.0)], frames, &AreaLossConfig::default()).unwrap();
        assert_eq!(l.zero_iou_matches, 1);
        assert!((l.value - (75.0f64 / 25.0).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn jitter_zero_amplitude_is_identity() {
        let frame = AnnotationFrame::of_size(64, 64);
        let x = b(10.0, 10.0, 30.0, 30.0);
        assert_eq!(jitter_box(&x, 0.0, &frame, 5), x);
    }

    #[test]
    fn jitter_golden_fixture() {
        let frame = AnnotationFrame::of_size(64, 64);
        let j = jitter_box(&b(10.0, 10.0, 30.0, 30.0), 0.05, &frame, 0);
        let golden = JITTER_GOLDEN;
        for (v, g) in j.to_array().iter().zip(golden) {
            assert!((v - g).abs() < 1e-12, "{j:?}");
        }
        assert_eq!(j, jitter_box(&b(10.0, 10.0, 30.0, 30.0), 0.05, &frame, 0));
    }

    const JITTER_GOLDEN: [f64; 4] = [10.418150830853124, 9.93184344457922, 30.398286485349463, 29.120342331268343];

    #[test]
    fn nms_suppresses_overlaps_in_order() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 1.0, 11.0, 11.0), b(20.0, 20.0, 30.0, 30.0)];
        assert_eq!(nms(&boxes, &[1, 0, 2], 0.5), vec![1, 2]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let i1 = box_iou(&a, &c);
            let i2 = box_iou(&c, &a);
            prop_assert!((i1 - i2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&i1));
            if a.area() > 0.0 {
                prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn jitter_stays_valid_and_in_bounds(a in arb_box(), amp in 0.0..0.5f64, seed in any::<u64>()) {
            let frame = AnnotationFrame::of_size(120, 110);
            let j = jitter_box(&a, amp, &frame, seed);
            prop_assert!(j.is_valid());
            prop_assert!(j.x_min >= 0.0 && j.y_min >= 0.0 && j.x_max <= 120.0 && j.y_max <= 110.0);
        }

        #[test]
        fn area_loss_is_scale_free(
            props in prop::collection::vec(arb_box(), 1..8),
            gts in prop::collection::vec(arb_box(), 1..4),
            s in 0.25..4.0f64,
        ) {
            prop_assume!(gts.iter().all(|g| g.area() > 1.0));
            let cfg = AreaLossConfig::default();
            let f = AnnotationFrame::of_size(200, 200);
            let base = parea_loss(&ProposalSet::from_boxes(props.clone()), &gts, (f, f), &cfg).unwrap();
            let sp: Vec<BBox> = props.iter().map(|b| b.scale(s, s)).collect();
            let sg: Vec<BBox> = gts.iter().map(|b| b.scale(s, s)).collect();
            let fs = AnnotationFrame::new(200.0 * s, 200.0 * s).unwrap();
            let scaled = parea_loss(&ProposalSet::from_boxes(sp), &sg, (fs, fs), &cfg).unwrap();
            prop_assert!((base.value - scaled.value).abs() <= 1e-6 * base.value.max(1.0));
        }

        #[test]
        fn matching_is_stable_under_proposal_permutation(
            props in prop::collection::vec(arb_box(), 1..8),
            gts in prop::collection::vec(arb_box(), 0..5),
        ) {
            let forward = match_by_max_iou(&ProposalSet::from_boxes(props.clone()), &gts);
            let mut rev = props.clone();
            rev.reverse();
            let mut backward = match_by_max_iou(&ProposalSet::from_boxes(rev), &gts);
            backward.reverse();
            prop_assert_eq!(forward, backward);
        }
    }
}
