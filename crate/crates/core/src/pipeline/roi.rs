//! Fixed-size max pooling of box regions from stage feature maps.

use boxprompt_autograd::{Graph, Tensor, Var};

use crate::geometry::{AnnotationFrame, BBox};
use crate::{Error, Result};

fn feature_region(region: &BBox, stride: f64, height: usize, width: usize) -> Result<[f64; 4]> {
    let frame = AnnotationFrame::of_size(width, height);
    let r = region.scale(1.0 / stride, 1.0 / stride).clamp_to(&frame);
    if !(r.width() > 0.0 && r.height() > 0.0) {
        return Err(Error::DegenerateRegion(*region));
    }
    Ok(r.to_array())
}

/// Max-pools `region` (image pixels) from `features: [c, h, w]` of the given stride into
/// `[out, out, c]`.
pub fn roi_pool(features: &Tensor, stride: f64, region: &BBox, out: usize) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("feature map of shape {s:?}")));
    }
    let r = feature_region(region, stride, s[1], s[2])?;
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let y = g.roi_max_pool(f, &[r], out);
    Ok(g.value(y).clone().reshape(&[out, out, s[0]]))
}

/// Pools every box from each listed stage and concatenates channels:
/// `[boxes * out * out, sum(c)]`.
pub fn roi_features(g: &mut Graph, stages: &[(Var, f64)], boxes: &[BBox], out: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(stages.len());
    for &(f, stride) in stages {
        let s = g.shape(f).to_vec();
        let regions = boxes
            .iter()
            .map(|b| feature_region(b, stride, s[1], s[2]))
            .collect::<Result<Vec<_>>>()?;
        parts.push(g.roi_max_pool(f, &regions, out));
    }
    Ok(if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let f = Tensor::full(&[3, 8, 8], 0.4);
        let out = roi_pool(&f, 2.0, &BBox::new(1.0, 3.0, 9.0, 14.0), 7).unwrap();
        assert_eq!(out.shape(), &[7, 7, 3]);
        assert!(out.data().iter().all(|v| *v == 0.4));
    }

    #[test]
    fn quadrant_maxima() {
        let f = Tensor::new(&[1, 4, 4], (0..16).map(|i| ((i * 5) % 16) as f64).collect());
        // Rows: [0 5 10 15] [4 9 14 3] [8 13 2 7] [12 1 6 11]
        let out = roi_pool(&f, 1.0, &BBox::new(0.0, 0.0, 4.0, 4.0), 2).unwrap();
        assert_eq!(out.data(), &[9.0, 15.0, 13.0, 11.0]);
    }

    #[test]
    fn tiny_regions_still_pool() {
        let f = Tensor::from_fn(&[2, 4, 4], |i| i as f64);
        let out = roi_pool(&f, 4.0, &BBox::new(5.0, 5.0, 6.0, 6.0), 7).unwrap();
        assert!(out.data().chunks(2).all(|c| c == [5.0, 21.0]));
    }

    #[test]
    fn outside_region_is_degenerate() {
        let f = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            roi_pool(&f, 2.0, &BBox::new(9.0, 9.0, 12.0, 12.0), 7),
            Err(Error::DegenerateRegion(_))
        ));
    }
}
