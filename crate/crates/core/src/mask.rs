//! Binary masks and their run-length wire format.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

/// Row-major binary grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// Uncompressed row-major RLE; the first run counts zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u64>,
    pub width: usize,
    pub height: usize,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Tight box in pixel-edge coordinates: a single pixel `(x, y)` spans `[x, x+1]`.
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn intersection(&self, other: &BitMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn iou(&self, other: &BitMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn union_with(&mut self, other: &BitMask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Pastes a box-relative grid into a full frame, sampling the grid at each pixel center.
    pub fn paste(&self, region: &BBox, frame_width: usize, frame_height: usize) -> BitMask {
        let mut out = BitMask::new(frame_width, frame_height);
        let (w, h) = (region.width(), region.height());
        if w <= 0.0 || h <= 0.0 {
            return out;
        }
        let xs = region.x_min.floor().max(0.0) as usize;
        let ys = region.y_min.floor().max(0.0) as usize;
        let xe = (region.x_max.ceil() as usize).min(frame_width);
        let ye = (region.y_max.ceil() as usize).min(frame_height);
        for y in ys..ye {
            let v = ((y as f64 + 0.5 - region.y_min) / h * self.height as f64).floor();
            if v < 0.0 || v >= self.height as f64 {
                continue;
            }
            for x in xs..xe {
                let u = ((x as f64 + 0.5 - region.x_min) / w * self.width as f64).floor();
                if u < 0.0 || u >= self.width as f64 {
                    continue;
                }
                if self.get(u as usize, v as usize) {
                    out.set(x, y, true);
                }
            }
        }
        out
    }

    /// Samples a full-frame mask on a `side x side` grid of cell centers inside `region`.
    pub fn sample_in(&self, region: &BBox, side: usize) -> BitMask {
        let mut out = BitMask::new(side, side);
        for v in 0..side {
            let y = region.y_min + (v as f64 + 0.5) / side as f64 * region.height();
            for u in 0..side {
                let x = region.x_min + (u as f64 + 0.5) / side as f64 * region.width();
                let (px, py) = (x.floor(), y.floor());
                if px >= 0.0 && py >= 0.0 && (px as usize) < self.width && (py as usize) < self.height {
                    out.set(u, v, self.get(px as usize, py as usize));
                }
            }
        }
        out
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            counts,
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<BitMask> {
        let total: u64 = rle.counts.iter().sum();
        let expected = (rle.width * rle.height) as u64;
        if total != expected {
            return Err(Error::Rle(format!(
                "counts sum to {total} but the mask has {expected} cells"
            )));
        }
        let mut bits = Vec::with_capacity(expected as usize);
        let mut value = false;
        for &c in &rle.counts {
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Ok(BitMask {
            width: rle.width,
            height: rle.height,
            bits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rle(counts: &[u64], w: usize, h: usize) -> Rle {
        Rle {
            counts: counts.to_vec(),
            width: w,
            height: h,
        }
    }

    #[test]
    fn decode_examples() {
        assert_eq!(BitMask::from_rle(&rle(&[4], 2, 2)).unwrap().bits(), &[false; 4]);
        assert_eq!(BitMask::from_rle(&rle(&[0, 4], 2, 2)).unwrap().bits(), &[true; 4]);
        assert_eq!(
            BitMask::from_rle(&rle(&[1, 2, 1], 2, 2)).unwrap().bits(),
            &[false, true, true, false]
        );
        assert!(matches!(BitMask::from_rle(&rle(&[1, 2], 2, 2)), Err(Error::Rle(_))));
    }

    #[test]
    fn encode_starts_with_zero_run() {
        let m = BitMask::from_bits(2, 2, vec![true, true, false, true]).unwrap();
        assert_eq!(m.to_rle().counts, vec![0, 2, 1, 1]);
        assert_eq!(BitMask::new(3, 1).to_rle().counts, vec![3]);
    }

    #[test]
    fn tight_box_uses_pixel_edges() {
        let m = BitMask::from_fn(8, 6, |x, y| (2..5).contains(&x) && y == 3);
        assert_eq!(m.tight_box(), Some(BBox::new(2.0, 3.0, 5.0, 4.0)));
        assert_eq!(BitMask::new(3, 3).tight_box(), None);
    }

    #[test]
    fn sample_then_paste_recovers_aligned_mask() {
        let m = BitMask::from_fn(32, 32, |x, y| (4..12).contains(&x) && (8..16).contains(&y));
        let region = m.tight_box().unwrap();
        let grid = m.sample_in(&region, 8);
        assert_eq!(grid.count(), 64);
        assert_eq!(grid.paste(&region, 32, 32), m);
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let m = BitMask::from_fn(w, h, |x, y| (seed >> ((x * 7 + y * 3) % 64)) & 1 == 1);
            let r = m.to_rle();
            prop_assert_eq!(r.counts.iter().sum::<u64>(), (w * h) as u64);
            prop_assert_eq!(BitMask::from_rle(&r).unwrap(), m);
        }
    }
}
