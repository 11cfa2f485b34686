//! Prompt fusion and the per-box classification, box-refinement and mask heads.

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::local_prompt::PromptEmbedding;
use crate::nn;
use crate::{Error, Result};

/// Refinement deltas are predicted divided by these.
pub const BOX_DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

pub fn roi_channels(cfg: &ModelConfig) -> usize {
    cfg.roi_stages.iter().map(|&s| cfg.backbone_channels[s]).sum()
}

fn prompt_dims(cfg: &ModelConfig) -> Vec<usize> {
    let mut d = Vec::new();
    if cfg.use_lpm {
        d.push(cfg.lpm.embed_dim);
    }
    if cfg.use_gpm {
        d.push(cfg.gpm.embed_dim);
    }
    d
}

/// Prompt-path weights start small, so an untrained model with prompt modules stays
/// close to one without them while gradients still reach the prompt modules. They are
/// drawn last so the shared weights match the prompt-free model exactly.
pub const PROMPT_INIT_GAIN: f64 = 0.01;

pub fn init_head(params: &mut Params, cfg: &ModelConfig, rng: &mut impl Rng) {
    let cells = cfg.roi_size * cfg.roi_size;
    let roi_in = roi_channels(cfg);
    let prompt_in = prompt_dims(cfg).iter().sum::<usize>();
    let k = cfg.num_classes;
    nn::init_dense(params, "fuse", roi_in, cfg.fuse_channels, 2f64.sqrt(), rng);
    nn::init_dense(params, "head.fc", cells * cfg.fuse_channels, cfg.head_hidden, 2f64.sqrt(), rng);
    nn::init_dense(params, "head.cls", cfg.head_hidden, k + 1, 0.1, rng);
    nn::init_dense(params, "head.box", cfg.head_hidden, 4, 0.1, rng);
    nn::init_dense(params, "head.mask_fc", cfg.head_hidden, cfg.mask_side * cfg.mask_side * k, 0.1, rng);
    params.insert("head.mask_spatial.w", nn::normal(&[cfg.fuse_channels, k], 0.1, rng));
    if prompt_in > 0 {
        let w = params.get("fuse.w").expect("just inserted");
        let mut data = w.data().to_vec();
        let rows = nn::normal(&[prompt_in, cfg.fuse_channels], PROMPT_INIT_GAIN / (prompt_in as f64).sqrt(), rng);
        data.extend_from_slice(rows.data());
        params.insert("fuse.w", Tensor::new(&[roi_in + prompt_in, cfg.fuse_channels], data));
    }
    if cfg.use_lpm {
        let p = TokenGeometry::of_lpm(cfg).patch;
        nn::init_dense(params, "head.mask_lpm", cfg.lpm.embed_dim, p * p * k, PROMPT_INIT_GAIN, rng);
    }
    if cfg.use_gpm {
        let p = TokenGeometry::of_gpm(cfg).patch;
        nn::init_dense(params, "head.mask_gpm", cfg.gpm.embed_dim, p * p * k, PROMPT_INIT_GAIN, rng);
    }
}

/// Channel concatenation of RoI features `[b * cells, c]` with each pooled prompt
/// `[b, d]` broadcast over the cells.
pub fn fuse_inputs(g: &mut Graph, roi: Var, pooled: &[Var], cells: usize) -> Var {
    if pooled.is_empty() {
        return roi;
    }
    let mut parts = vec![roi];
    for &p in pooled {
        parts.push(g.repeat_groups(p, cells));
    }
    g.concat_cols(&parts)
}

/// 1x1 mixing of the fused inputs to `fuse_channels`, followed by GELU.
pub fn fuse_graph(g: &mut Graph, roi: Var, pooled: &[Var], cells: usize) -> Var {
    let x = fuse_inputs(g, roi, pooled, cells);
    let y = nn::dense(g, x, "fuse");
    g.gelu(y)
}

/// Fusion of one RoI block `[side, side, c]` with a local and a global prompt.
pub fn fuse_prompts(
    roi_feat: &Tensor,
    local: &PromptEmbedding,
    global_local: &PromptEmbedding,
    params: &Params,
) -> Result<Tensor> {
    let s = roi_feat.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::ShapeMismatch(format!("RoI block of shape {s:?}")));
    }
    let w = params
        .get("fuse.w")
        .ok_or_else(|| Error::ShapeMismatch("missing fusion weights".into()))?;
    let expected = s[2] + local.pooled.len() + global_local.pooled.len();
    if w.rows() != expected {
        return Err(Error::ShapeMismatch(format!(
            "fusion expects {} input channels, got {expected}",
            w.rows()
        )));
    }
    let cells = s[0] * s[1];
    let mut g = Graph::with_params(params);
    let roi = g.constant(roi_feat.clone().reshape(&[cells, s[2]]));
    let lp = g.constant(Tensor::new(&[1, local.pooled.len()], local.pooled.clone()));
    let gp = g.constant(Tensor::new(&[1, global_local.pooled.len()], global_local.pooled.clone()));
    let y = fuse_graph(&mut g, roi, &[lp, gp], cells);
    let c = g.shape(y)[1];
    Ok(g.value(y).clone().reshape(&[s[0], s[1], c]))
}

/// Patch geometry on the prompt crop shared by the LPM and GPM token grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub crop: usize,
    pub patch: usize,
    pub stride: usize,
}

impl TokenGeometry {
    pub fn of_lpm(cfg: &ModelConfig) -> Self {
        let l = cfg.lpm_config();
        Self {
            crop: l.roi_size,
            patch: l.patch.patch_size,
            stride: l.patch.stride,
        }
    }

    pub fn of_gpm(cfg: &ModelConfig) -> Self {
        let g = cfg.gpm_config();
        Self {
            crop: g.local_roi_size,
            patch: g.local_patch,
            stride: g.local_stride,
        }
    }

    /// How many patches cover each crop pixel, row-major.
    pub fn coverage(&self) -> Vec<f64> {
        let n = (self.crop - self.patch) / self.stride + 1;
        let hits = |i: usize| (0..n).filter(|t| i >= t * self.stride && i < t * self.stride + self.patch).count();
        let mut out = Vec::with_capacity(self.crop * self.crop);
        for y in 0..self.crop {
            for x in 0..self.crop {
                out.push((hits(y) * hits(x)) as f64);
            }
        }
        out
    }
}

/// Maps folded crop logits `[b * crop^2, k]` onto the mask grid, averaging overlapping
/// patches. Pixels no patch covers get zero.
pub fn crop_to_mask(geom: &TokenGeometry, mask_side: usize) -> Tensor {
    let cover = geom.coverage();
    let inv: Vec<f64> = cover.iter().map(|c| if *c > 0.0 { 1.0 / c } else { 0.0 }).collect();
    if geom.crop == mask_side {
        let n = inv.len();
        return Tensor::from_fn(&[n, n], |i| if i / n == i % n { inv[i / n] } else { 0.0 });
    }
    let scale = mask_side as f64 / geom.crop as f64;
    let mut u = nn::bilinear_matrix(geom.crop, |i| (i as f64 + 0.5) * scale, mask_side);
    let cols = u.cols();
    for (i, v) in u.data_mut().iter_mut().enumerate() {
        *v *= inv[i % cols];
    }
    u
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[b, classes + 1]`, background last.
    pub class_logits: Var,
    /// `[b, 4]`, normalized by [`BOX_DELTA_STD`].
    pub box_deltas: Var,
    /// `[b * side * side, classes]`.
    pub mask_logits: Var,
}

/// Token prompts that feed the mask directly.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskPrompts {
    /// `[b * 2n, dim]` local encoder tokens.
    pub local: Option<Var>,
    /// `[b * n, dim]` global-to-local tokens.
    pub global: Option<Var>,
}

/// Decodes every token to a patch of per-class logits and folds the patches back onto
/// the crop. Each item holds `branches` consecutive token grids over the same crop, in
/// raster order of their patches.
fn token_mask(
    g: &mut Graph,
    tokens: Var,
    batch: usize,
    branches: usize,
    geom: &TokenGeometry,
    prefix: &str,
    cfg: &ModelConfig,
) -> Var {
    let k = cfg.num_classes;
    let per_patch = nn::dense(g, tokens, prefix);
    let folded = g.fold(per_patch, batch * branches, geom.crop, geom.crop, geom.patch, geom.stride);
    let plane = geom.crop * geom.crop * k;
    let flat = g.reshape(folded, &[batch, branches * plane]);
    let mut sum = g.slice_cols(flat, 0, plane);
    for b in 1..branches {
        let part = g.slice_cols(flat, b * plane, plane);
        sum = g.add(sum, part);
    }
    let per_pixel = g.reshape(sum, &[batch * geom.crop * geom.crop, k]);
    if geom.crop != cfg.mask_side {
        return g.group_matmul(per_pixel, crop_to_mask(geom, cfg.mask_side));
    }
    // Same grid: only the overlap average, without a dense resampling matrix.
    let cover = geom.coverage();
    let n = cover.len();
    let inv = Tensor::from_fn(&[batch * n, k], |i| {
        let c = cover[(i / k) % n];
        if c > 0.0 { 1.0 / c } else { 0.0 }
    });
    let inv = g.constant(inv);
    g.mul(per_pixel, inv)
}

/// Bilinear map from the RoI grid to the mask grid, applied per axis.
pub fn roi_upsampler(cfg: &ModelConfig) -> Tensor {
    let scale = cfg.mask_side as f64 / cfg.roi_size as f64;
    nn::bilinear_matrix(cfg.roi_size, |i| (i as f64 + 0.5) * scale, cfg.mask_side)
}

pub fn head_graph(g: &mut Graph, fused: Var, batch: usize, prompts: MaskPrompts, cfg: &ModelConfig) -> HeadVars {
    let cells = cfg.roi_size * cfg.roi_size;
    let side2 = cfg.mask_side * cfg.mask_side;
    let k = cfg.num_classes;
    let flat = g.reshape(fused, &[batch, cells * cfg.fuse_channels]);
    let h = nn::dense(g, flat, "head.fc");
    let h = g.gelu(h);
    let class_logits = nn::dense(g, h, "head.cls");
    let box_deltas = nn::dense(g, h, "head.box");

    let m = nn::dense(g, h, "head.mask_fc");
    let mut mask = g.reshape(m, &[batch * side2, k]);
    let ws = g.param("head.mask_spatial.w");
    let sp = g.matmul(fused, ws);
    let sp = g.group_matmul(sp, roi_upsampler(cfg));
    mask = g.add(mask, sp);
    if let Some(t) = prompts.local {
        let lp = token_mask(g, t, batch, 2, &TokenGeometry::of_lpm(cfg), "head.mask_lpm", cfg);
        mask = g.add(mask, lp);
    }
    if let Some(t) = prompts.global {
        let gp = token_mask(g, t, batch, 1, &TokenGeometry::of_gpm(cfg), "head.mask_gpm", cfg);
        mask = g.add(mask, gp);
    }
    HeadVars {
        class_logits,
        box_deltas,
        mask_logits: mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnnotationFrame;
    use crate::tokenizer::TokenGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prompt(v: Vec<f64>) -> PromptEmbedding {
        let d = v.len();
        PromptEmbedding {
            tokens: TokenGrid::new(Tensor::new(&[1, d], v.clone()), (1, 1), AnnotationFrame::of_size(1, 1)).unwrap(),
            pooled: v,
        }
    }

    #[test]
    fn zero_prompts_leave_roi_channels_in_place() {
        let mut g = Graph::new();
        let roi = Tensor::from_fn(&[2 * 4, 3], |i| i as f64);
        let r = g.constant(roi.clone());
        let p = g.constant(Tensor::zeros(&[2, 5]));
        let x = fuse_inputs(&mut g, r, &[p], 4);
        let v = g.value(x);
        assert_eq!(v.shape(), &[8, 8]);
        for row in 0..8 {
            assert_eq!(&v.row(row)[..3], roi.row(row));
            assert!(v.row(row)[3..].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn fused_block_shape_and_dim_check() {
        let cfg = ModelConfig::default();
        let mut params = Params::new();
        init_head(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let roi = Tensor::from_fn(&[7, 7, 24], |i| (i % 13) as f64 * 0.1);
        let out = fuse_prompts(&roi, &prompt(vec![0.1; 32]), &prompt(vec![0.2; 64]), &params).unwrap();
        assert_eq!(out.shape(), &[7, 7, 16]);
        let bad = fuse_prompts(&roi, &prompt(vec![0.1; 31]), &prompt(vec![0.2; 64]), &params);
        assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn upsamplers_preserve_constants() {
        let cfg = ModelConfig::default();
        let geom = TokenGeometry::of_lpm(&cfg);
        assert_eq!(geom.coverage()[0], 1.0);
        assert_eq!(geom.coverage()[5 * 28 + 5], 4.0);
        let m = crop_to_mask(&geom, 28);
        // Summing constant patches and dividing by coverage gives the constant back.
        let cover = geom.coverage();
        for r in 0..m.rows() {
            let v: f64 = m.row(r).iter().zip(&cover).map(|(a, c)| a * c).sum();
            assert!((v - 1.0).abs() < 1e-12);
        }
        let mut odd = cfg.clone();
        odd.lpm.roi_size = 21;
        let m = crop_to_mask(&TokenGeometry::of_lpm(&odd), 28);
        assert_eq!(m.shape(), &[784, 441]);
        let r7 = roi_upsampler(&cfg);
        assert_eq!(r7.shape(), &[784, 49]);
        for r in 0..r7.rows() {
            assert!((r7.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
