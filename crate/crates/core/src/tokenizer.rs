//! Region crops, patch tokens and 2-D sinusoidal positions shared by both prompt encoders.

use std::f64::consts::PI;

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::geometry::{AnnotationFrame, BBox};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

impl ImagePatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidConfig(format!(
                "patch stride {} must lie in 1..={}",
                self.stride, self.patch_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Token grid `(rows, cols)` over a `height x width` input.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.patch_size > height || self.patch_size > width {
            return Err(Error::PatchTooLarge {
                patch: self.patch_size,
                height,
                width,
            });
        }
        Ok((
            (height - self.patch_size) / self.stride + 1,
            (width - self.patch_size) / self.stride + 1,
        ))
    }

    /// Length of one flattened patch with `channels` channels.
    pub fn patch_len(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }
}

/// Settings of the local prompt encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LpmConfig {
    /// Side of the square crop every region is resized to.
    pub roi_size: usize,
    pub patch: ImagePatchConfig,
    pub mlp_hidden: usize,
}

impl LpmConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.roi_size < self.patch.patch_size {
            return Err(Error::PatchTooLarge {
                patch: self.patch.patch_size,
                height: self.roi_size,
                width: self.roi_size,
            });
        }
        if self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Part-token grid of one branch.
    pub fn grid(&self) -> (usize, usize) {
        self.patch.grid(self.roi_size, self.roi_size).expect("validated config")
    }

    /// Patch geometry used for a given crop side during the crop-size sweep:
    /// patch `min(8, side)`, stride half the patch.
    pub fn for_roi_size(side: usize, embed_dim: usize, mlp_hidden: usize) -> Self {
        let patch_size = side.min(8);
        LpmConfig {
            roi_size: side,
            patch: ImagePatchConfig {
                patch_size,
                stride: (patch_size / 2).max(1),
                embed_dim,
            },
            mlp_hidden,
        }
    }
}

/// Token sequence laid out on a 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[rows * cols, dim]`, row-major over the grid.
    pub tokens: Tensor,
    pub grid_shape: (usize, usize),
    pub origin_frame: AnnotationFrame,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_shape: (usize, usize), origin_frame: AnnotationFrame) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.rows() != grid_shape.0 * grid_shape.1 {
            return Err(Error::ShapeMismatch(format!(
                "tokens {:?} do not fill a {}x{} grid",
                tokens.shape(),
                grid_shape.0,
                grid_shape.1
            )));
        }
        Ok(Self {
            tokens,
            grid_shape,
            origin_frame,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Bilinear resample of `region` (clamped to the image) to `out_size x out_size`.
///
/// Corner aligned: the first and last output samples land on the centers of the first
/// and last pixels the region covers.
pub fn crop_resize(image: &Image, region: &BBox, out_size: usize) -> Result<Image> {
    let frame = AnnotationFrame::of_size(image.width(), image.height());
    let r = region.clamp_to(&frame);
    if !r.is_valid() || r.width() <= 0.0 || r.height() <= 0.0 || out_size == 0 {
        return Err(Error::DegenerateRegion(*region));
    }
    let xs = sample_positions(r.x_min, r.x_max, out_size, image.width());
    let ys = sample_positions(r.y_min, r.y_max, out_size, image.height());
    let c = image.channels();
    let mut data = Vec::with_capacity(out_size * out_size * c);
    for &y in &ys {
        let (y0, y1, ty) = lerp_index(y, image.height());
        for &x in &xs {
            let (x0, x1, tx) = lerp_index(x, image.width());
            for ch in 0..c {
                let top = image.get(y0, x0, ch) * (1.0 - tx) + image.get(y0, x1, ch) * tx;
                let bottom = image.get(y1, x0, ch) * (1.0 - tx) + image.get(y1, x1, ch) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Image::new(out_size, out_size, c, data)
}

/// Stacks crops of several regions into `[regions, out, out, channels]`.
pub fn crop_batch(image: &Image, regions: &[BBox], out_size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(regions.len() * out_size * out_size * image.channels());
    for r in regions {
        data.extend_from_slice(crop_resize(image, r, out_size)?.data());
    }
    Ok(Tensor::new(&[regions.len(), out_size, out_size, image.channels()], data))
}

fn sample_positions(lo: f64, hi: f64, n: usize, limit: usize) -> Vec<f64> {
    let first = lo;
    let last = (hi - 1.0).max(lo);
    let max = (limit - 1) as f64;
    (0..n)
        .map(|i| {
            let p = if n == 1 {
                0.5 * (first + last)
            } else {
                first + i as f64 * (last - first) / (n - 1) as f64
            };
            p.clamp(0.0, max)
        })
        .collect()
}

fn lerp_index(p: f64, limit: usize) -> (usize, usize, f64) {
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(limit - 1);
    (i0, i1, p - i0 as f64)
}

/// Patch tokens of `x: [batch, h, w, c]` projected with `{prefix}.w` / `{prefix}.b`.
pub fn patch_tokens(g: &mut Graph, x: Var, cfg: &ImagePatchConfig, prefix: &str) -> Var {
    let p = g.patches(x, cfg.patch_size, cfg.stride);
    crate::nn::dense(g, p, prefix)
}

/// Linear patch embedding of a single image with projection `weight: [patch_len, dim]`
/// and `bias: [dim]`.
pub fn patch_partition(image: &Image, cfg: &ImagePatchConfig, weight: &Tensor, bias: &Tensor) -> Result<TokenGrid> {
    cfg.validate()?;
    let grid = cfg.grid(image.height(), image.width())?;
    let expected = [cfg.patch_len(image.channels()), cfg.embed_dim];
    if weight.shape() != expected || bias.shape() != [cfg.embed_dim] {
        return Err(Error::ShapeMismatch(format!(
            "patch projection {:?} / {:?}, expected {expected:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut params = Params::new();
    params.insert("proj.w", weight.clone());
    params.insert("proj.b", bias.clone());
    let mut g = Graph::with_params(&params);
    let x = g.constant(image.to_hwc().reshape(&[1, image.height(), image.width(), image.channels()]));
    let t = patch_tokens(&mut g, x, cfg, "proj");
    TokenGrid::new(
        g.value(t).clone(),
        grid,
        AnnotationFrame::of_size(image.width(), image.height()),
    )
}

/// 2-D sinusoidal position codes `[rows * cols, dim]`.
///
/// The first half of the channels encodes the row, the second half the column. Each half
/// holds `(sin, cos)` pairs of `pi * (k + 1) * p` with `p = index / extent` in `[0, 1)`.
pub fn positional_encoding(grid: (usize, usize), dim: usize) -> Result<Tensor> {
    if dim < 4 || dim % 4 != 0 {
        return Err(Error::InvalidConfig(format!(
            "positional encoding needs a dimension divisible by 4, got {dim}"
        )));
    }
    let (rows, cols) = grid;
    let half = dim / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for (idx, extent) in [(r, rows), (c, cols)] {
                let p = idx as f64 / extent as f64;
                for k in 0..half / 2 {
                    let a = PI * (k + 1) as f64 * p;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    Ok(Tensor::new(&[rows * cols, dim], data))
}
