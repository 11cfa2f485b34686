//! Global-to-local prompt encoder: self-attention over global image tokens and over the
//! region's local tokens, then local tokens attend into the global ones, repeated.

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{AnnotationFrame, BBox};
use crate::image::Image;
use crate::local_prompt::PromptEmbedding;
use crate::nn;
use crate::tokenizer::{crop_batch, patch_tokens, positional_encoding, ImagePatchConfig, TokenGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Total token width; each head sees `embed_dim / heads` channels.
    pub embed_dim: usize,
    pub heads: usize,
    pub loops: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.loops == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention needs heads >= 1, loops >= 1 and embed_dim divisible by heads, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpmConfig {
    pub attention: AttentionConfig,
    /// Non-overlapping partition of the whole image.
    pub global_patch: usize,
    /// Side of the region crop the local tokens come from.
    pub local_roi_size: usize,
    pub local_patch: usize,
    pub local_stride: usize,
}

impl GpmConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.global_patch_config().validate()?;
        self.local_patch_config().validate()?;
        self.local_patch_config().grid(self.local_roi_size, self.local_roi_size)?;
        positional_encoding((1, 1), self.attention.embed_dim)?;
        Ok(())
    }

    pub fn global_patch_config(&self) -> ImagePatchConfig {
        ImagePatchConfig {
            patch_size: self.global_patch,
            stride: self.global_patch,
            embed_dim: self.attention.embed_dim,
        }
    }

    pub fn local_patch_config(&self) -> ImagePatchConfig {
        ImagePatchConfig {
            patch_size: self.local_patch,
            stride: self.local_stride,
            embed_dim: self.attention.embed_dim,
        }
    }

    pub fn local_grid(&self) -> (usize, usize) {
        self.local_patch_config()
            .grid(self.local_roi_size, self.local_roi_size)
            .expect("validated config")
    }
}

pub fn init_mhsa(params: &mut Params, prefix: &str, dim: usize, rng: &mut impl Rng) {
    nn::init_layer_norm(params, &format!("{prefix}.ln"), dim);
    for part in ["q", "k", "v", "o"] {
        nn::init_dense(params, &format!("{prefix}.{part}"), dim, dim, 1.0, rng);
    }
}

/// Pre-norm multi-head self-attention with output projection and residual, applied to
/// `batch` independent token sequences stacked in `x`.
pub fn mhsa_graph(g: &mut Graph, x: Var, batch: usize, heads: usize, prefix: &str) -> Var {
    let n = nn::layer_norm(g, x, &format!("{prefix}.ln"));
    let q = nn::dense(g, n, &format!("{prefix}.q"));
    let k = nn::dense(g, n, &format!("{prefix}.k"));
    let v = nn::dense(g, n, &format!("{prefix}.v"));
    let a = g.attention(q, k, v, batch, heads);
    let o = nn::dense(g, a, &format!("{prefix}.o"));
    g.add(x, o)
}

/// Self-attention over one token grid with parameters under `prefix`.
pub fn mhsa(tokens: &TokenGrid, cfg: &AttentionConfig, params: &Params, prefix: &str) -> Result<TokenGrid> {
    cfg.validate()?;
    if tokens.dim() != cfg.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "token width {} for embed_dim {}",
            tokens.dim(),
            cfg.embed_dim
        )));
    }
    let mut g = Graph::with_params(params);
    let x = g.constant(tokens.tokens.clone());
    let y = mhsa_graph(&mut g, x, 1, cfg.heads, prefix);
    TokenGrid::new(g.value(y).clone(), tokens.grid_shape, tokens.origin_frame)
}

/// `softmax(L G^T / sqrt(d_k)) G` per head, one output row per local token.
pub fn g2l_attention(global: &TokenGrid, local: &TokenGrid, cfg: &AttentionConfig) -> Result<TokenGrid> {
    cfg.validate()?;
    if global.is_empty() {
        return Err(Error::EmptyContext);
    }
    if global.dim() != local.dim() || local.dim() != cfg.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "global width {}, local width {}, embed_dim {}",
            global.dim(),
            local.dim(),
            cfg.embed_dim
        )));
    }
    let (out, _) = g2l_with_weights(&global.tokens, &local.tokens, cfg.heads);
    TokenGrid::new(out, local.grid_shape, local.origin_frame)
}

/// Output and `[heads, n_local, n_global]` weights of the global-to-local step.
pub fn g2l_with_weights(global: &Tensor, local: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let mut g = Graph::new();
    let gv = g.constant(global.clone());
    let lv = g.constant(local.clone());
    let y = g.attention_shared(lv, gv, gv, 1, heads);
    let w = g.attention_weights(y).expect("attention node").to_vec();
    (g.value(y).clone(), w)
}

/// Initial gain of the output norm; keeps prompt tokens on the scale of RoI features.
const OUT_GAIN: f64 = 0.1;

pub fn init_gpm(params: &mut Params, prefix: &str, cfg: &GpmConfig, channels: usize, rng: &mut impl Rng) {
    let d = cfg.attention.embed_dim;
    nn::init_dense(params, &format!("{prefix}.global_embed"), cfg.global_patch_config().patch_len(channels), d, 1.0, rng);
    nn::init_dense(params, &format!("{prefix}.local_embed"), cfg.local_patch_config().patch_len(channels), d, 1.0, rng);
    for l in 0..cfg.attention.loops {
        init_mhsa(params, &format!("{prefix}.loop{l}.global"), d, rng);
        init_mhsa(params, &format!("{prefix}.loop{l}.local"), d, rng);
    }
    nn::init_layer_norm(params, &format!("{prefix}.out_ln"), d);
    params.insert(format!("{prefix}.out_ln.gain"), Tensor::full(&[d], OUT_GAIN));
}

/// Global token states after each loop's self-attention, `[n_global, dim]` each.
///
/// They depend only on the image, so inference computes them once per image.
pub fn global_states(g: &mut Graph, image: &Image, cfg: &GpmConfig, prefix: &str) -> Result<Vec<Var>> {
    let pc = cfg.global_patch_config();
    let grid = pc.grid(image.height(), image.width())?;
    let x = g.constant(image.to_hwc().reshape(&[1, image.height(), image.width(), image.channels()]));
    let t = patch_tokens(g, x, &pc, &format!("{prefix}.global_embed"));
    let pe = g.constant(positional_encoding(grid, cfg.attention.embed_dim)?);
    let mut state = g.add(t, pe);
    let mut out = Vec::with_capacity(cfg.attention.loops);
    for l in 0..cfg.attention.loops {
        state = mhsa_graph(g, state, 1, cfg.attention.heads, &format!("{prefix}.loop{l}.global"));
        out.push(state);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct GpmVars {
    /// `[batch * n_local, dim]`.
    pub tokens: Var,
    /// `[batch, dim]`.
    pub pooled: Var,
}

/// Local branch over `crops: [batch, side, side, channels]` against precomputed global states.
pub fn gpm_local_graph(g: &mut Graph, crops: &Tensor, states: &[Var], cfg: &GpmConfig, prefix: &str) -> Result<GpmVars> {
    let batch = crops.shape()[0];
    let grid = cfg.local_grid();
    let n = grid.0 * grid.1;
    let x = g.constant(crops.clone());
    let t = patch_tokens(g, x, &cfg.local_patch_config(), &format!("{prefix}.local_embed"));
    let pe = positional_encoding(grid, cfg.attention.embed_dim)?;
    let mut tiled = Vec::with_capacity(batch * pe.len());
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = g.constant(Tensor::new(&[batch * n, cfg.attention.embed_dim], tiled));
    let mut local = g.add(t, pe);
    for (l, &gs) in states.iter().enumerate() {
        local = mhsa_graph(g, local, batch, cfg.attention.heads, &format!("{prefix}.loop{l}.local"));
        local = g.attention_shared(local, gs, gs, batch, cfg.attention.heads);
    }
    // Attended tokens are convex mixes of global states whose scale drifts in training.
    let local = nn::layer_norm(g, local, &format!("{prefix}.out_ln"));
    let pooled = g.group_mean(local, n);
    Ok(GpmVars { tokens: local, pooled })
}

/// Global-to-local prompt of one region; parameters are looked up under `gpm.`.
pub fn gpm_forward(image: &Image, region: &BBox, cfg: &GpmConfig, params: &Params) -> Result<PromptEmbedding> {
    cfg.validate()?;
    let crops = crop_batch(image, std::slice::from_ref(region), cfg.local_roi_size)?;
    let mut g = Graph::with_params(params);
    let states = global_states(&mut g, image, cfg, "gpm")?;
    let out = gpm_local_graph(&mut g, &crops, &states, cfg, "gpm")?;
    Ok(PromptEmbedding {
        tokens: TokenGrid::new(
            g.value(out.tokens).clone(),
            cfg.local_grid(),
            AnnotationFrame::of_size(cfg.local_roi_size, cfg.local_roi_size),
        )?,
        pooled: g.value(out.pooled).data().to_vec(),
    })
}
