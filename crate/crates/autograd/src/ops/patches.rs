//! Strided patch extraction from batched HWC images.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchGeom {
    pub fn grid_rows(&self) -> usize {
        (self.height - self.patch) / self.stride + 1
    }

    pub fn grid_cols(&self) -> usize {
        (self.width - self.patch) / self.stride + 1
    }

    pub fn tokens_per_item(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// `[batch * rows * cols, patch * patch * channels]`, patch entries ordered (py, px, c).
pub fn extract(x: &[f64], g: &PatchGeom) -> Vec<f64> {
    let (gr, gc, plen) = (g.grid_rows(), g.grid_cols(), g.patch_len());
    let mut out = vec![0.0; g.batch * gr * gc * plen];
    let row_len = g.patch * g.channels;
    let mut t = 0;
    for b in 0..g.batch {
        let img = &x[b * g.height * g.width * g.channels..];
        for ty in 0..gr {
            for tx in 0..gc {
                let dst = &mut out[t * plen..(t + 1) * plen];
                for py in 0..g.patch {
                    let y = ty * g.stride + py;
                    let src = &img[(y * g.width + tx * g.stride) * g.channels..][..row_len];
                    dst[py * row_len..(py + 1) * row_len].copy_from_slice(src);
                }
                t += 1;
            }
        }
    }
    out
}

pub fn scatter(dout: &[f64], g: &PatchGeom, dx: &mut [f64]) {
    let (gr, gc, plen) = (g.grid_rows(), g.grid_cols(), g.patch_len());
    let row_len = g.patch * g.channels;
    let mut t = 0;
    for b in 0..g.batch {
        let base = b * g.height * g.width * g.channels;
        for ty in 0..gr {
            for tx in 0..gc {
                let src = &dout[t * plen..(t + 1) * plen];
                for py in 0..g.patch {
                    let y = ty * g.stride + py;
                    let off = base + (y * g.width + tx * g.stride) * g.channels;
                    for (d, s) in dx[off..off + row_len]
                        .iter_mut()
                        .zip(&src[py * row_len..(py + 1) * row_len])
                    {
                        *d += s;
                    }
                }
                t += 1;
            }
        }
    }
}
