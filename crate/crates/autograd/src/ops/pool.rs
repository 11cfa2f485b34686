//! Region max pooling over a CHW feature map.

/// Half-open cell range `[start, end)` covered by bin `i` of `bins` over `[lo, hi)`,
/// clamped to `[0, limit)` and never empty.
pub fn bin_range(lo: f64, hi: f64, i: usize, bins: usize, limit: usize) -> (usize, usize) {
    let size = (hi - lo) / bins as f64;
    let a = lo + size * i as f64;
    let b = lo + size * (i + 1) as f64;
    let limit_f = limit as f64;
    let start = a.floor().clamp(0.0, limit_f - 1.0) as usize;
    let end = (b.ceil().clamp(0.0, limit_f) as usize).max(start + 1);
    (start, end)
}

/// Pools each region (feature coordinates `[x0, y0, x1, y1]`) into `out x out` bins.
///
/// Output rows are `(region, bin_y, bin_x)`, columns are channels. Also returns the flat
/// feature index selected for every output element.
pub fn roi_max(
    feat: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    regions: &[[f64; 4]],
    out: usize,
) -> (Vec<f64>, Vec<usize>) {
    let n = regions.len() * out * out * channels;
    let mut values = vec![0.0; n];
    let mut argmax = vec![0usize; n];
    for (r, reg) in regions.iter().enumerate() {
        for by in 0..out {
            let (y0, y1) = bin_range(reg[1], reg[3], by, out, height);
            for bx in 0..out {
                let (x0, x1) = bin_range(reg[0], reg[2], bx, out, width);
                let row = (r * out + by) * out + bx;
                for c in 0..channels {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = (c * height + y) * width + x;
                            if feat[idx] > best {
                                best = feat[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    values[row * channels + c] = best;
                    argmax[row * channels + c] = best_idx;
                }
            }
        }
    }
    (values, argmax)
}
