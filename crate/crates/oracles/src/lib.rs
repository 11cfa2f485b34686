//! Deliberately naive reference implementations. Nothing here shares code with the
//! library under test; they work on plain arrays and recompute everything directly.

/// Proposal area loss written as a literal loop over `(x, y, w, h)` boxes.
///
/// Boxes come in as corners and are converted first. `from`/`to` are the proposal and
/// ground-truth frame sizes.
pub fn area_loss(proposals: &[[f64; 4]], gt: &[[f64; 4]], from: (f64, f64), to: (f64, f64), eps: f64) -> f64 {
    if proposals.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let xywh = |b: &[f64; 4]| [b[0], b[1], b[2] - b[0], b[3] - b[1]];
    let (sx, sy) = (to.0 / from.0, to.1 / from.1);
    let gts: Vec<[f64; 4]> = gt.iter().map(xywh).collect();
    let mut losses = Vec::new();
    for p in proposals {
        let q = xywh(p);
        let q = [q[0] * sx, q[1] * sy, q[2] * sx, q[3] * sy];
        let ious: Vec<f64> = gts.iter().map(|g| iou_xywh(&q, g)).collect();
        let mut best = 0;
        for (i, v) in ious.iter().enumerate() {
            if *v > ious[best] {
                best = i;
            }
        }
        let g = gts[best];
        let area_p = q[2] * q[3];
        let area_g = g[2] * g[3];
        let l = (area_p - area_g).abs() / (area_g + eps);
        losses.push(l * l);
    }
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn iou_xywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = if ix > 0.0 && iy > 0.0 { ix * iy } else { 0.0 };
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// One object for the AP oracle: a category and a flat pixel mask.
#[derive(Clone, Debug)]
pub struct Object {
    pub category: usize,
    pub pixels: Vec<bool>,
}

/// Scored prediction for the AP oracle.
#[derive(Clone, Debug)]
pub struct Scored {
    pub object: Object,
    pub score: f64,
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over categories of AP at one IoU threshold, or `None` if no category has
/// ground truth. Assumes distinct scores.
///
/// Each image is matched greedily in score order, each prediction taking the free
/// ground truth of largest IoU (the later one on equal IoU). The precision envelope
/// comes from sweeping every score cutoff and reading off precision and recall.
pub fn mask_ap_at(images: &[(Vec<Object>, Vec<Scored>)], categories: usize, threshold: f64) -> Option<f64> {
    let mut per_category = Vec::new();
    for c in 0..categories {
        let mut hits: Vec<(f64, bool)> = Vec::new();
        let mut positives = 0;
        for (gt, preds) in images {
            let gt: Vec<&Object> = gt.iter().filter(|o| o.category == c).collect();
            positives += gt.len();
            let mut preds: Vec<&Scored> = preds.iter().filter(|p| p.object.category == c).collect();
            preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut taken = vec![false; gt.len()];
            for p in preds {
                let mut chosen: Option<(usize, f64)> = None;
                for (g, obj) in gt.iter().enumerate() {
                    if taken[g] {
                        continue;
                    }
                    let iou = mask_iou(&p.object.pixels, &obj.pixels);
                    if iou >= threshold && chosen.is_none_or(|(_, best)| iou >= best) {
                        chosen = Some((g, iou));
                    }
                }
                if let Some((g, _)) = chosen {
                    taken[g] = true;
                }
                hits.push((p.score, chosen.is_some()));
            }
        }
        if positives == 0 {
            continue;
        }
        // (recall, precision) at every cutoff.
        let mut points = Vec::new();
        for (cut, _) in &hits {
            let kept: Vec<&(f64, bool)> = hits.iter().filter(|(s, _)| s >= cut).collect();
            let tp = kept.iter().filter(|(_, h)| *h).count() as f64;
            points.push((tp / positives as f64, tp / kept.len() as f64));
        }
        let levels = 101;
        let mut sum = 0.0;
        for r in 0..levels {
            let level = r as f64 / (levels - 1) as f64;
            sum += points
                .iter()
                .filter(|(rec, _)| *rec >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
        }
        per_category.push(sum / levels as f64);
    }
    if per_category.is_empty() {
        None
    } else {
        Some(per_category.iter().sum::<f64>() / per_category.len() as f64)
    }
}

/// Mask AP averaged over thresholds 0.50:0.05:0.95.
pub fn mask_ap(images: &[(Vec<Object>, Vec<Scored>)], categories: usize) -> Option<f64> {
    let aps: Vec<f64> = (0..10)
        .filter_map(|i| mask_ap_at(images, categories, (10 + i) as f64 / 20.0))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}
