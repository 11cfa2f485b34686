//! Local prompt encoder: part tokens of the resized region plus tokens of a learnably
//! filtered copy of it, mixed by a per-token MLP.

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use rand::Rng;

use crate::geometry::{AnnotationFrame, BBox};
use crate::image::Image;
use crate::nn;
use crate::tokenizer::{crop_batch, patch_tokens, LpmConfig, TokenGrid};
use crate::{Error, Result};

/// Additive frequency-domain parameters `[2, side, side, channels]` (real, imaginary).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEmbedding {
    values: Tensor,
}

impl SpectralEmbedding {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Self {
            values: Tensor::zeros(&[2, side, side, channels]),
        }
    }

    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[0] != 2 || s[1] != s[2] {
            return Err(Error::ShapeMismatch(format!("spectral embedding of shape {s:?}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }
}

/// Encoder output for one prompted region.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: TokenGrid,
    /// Mean of the tokens.
    pub pooled: Vec<f64>,
}

/// `Re(IFFT(FFT(crop) + emb))` per channel, inverse scaled by `1 / (side * side)`.
pub fn spectral_embed(crop: &Image, emb: &SpectralEmbedding) -> Result<Image> {
    let (h, w, c) = (crop.height(), crop.width(), crop.channels());
    if emb.values.shape() != [2, h, w, c] {
        return Err(Error::ShapeMismatch(format!(
            "spectral embedding {:?} for a {h}x{w}x{c} crop",
            emb.values.shape()
        )));
    }
    let mut g = Graph::new();
    let e = g.constant(emb.values.clone());
    let x = Tensor::new(&[1, h, w, c], crop.data().to_vec());
    let y = g.spectral(&x, e);
    Image::new(h, w, c, g.value(y).data().to_vec())
}

pub fn init_lpm(params: &mut Params, prefix: &str, cfg: &LpmConfig, channels: usize, rng: &mut impl Rng) {
    let s = cfg.roi_size;
    let d = cfg.patch.embed_dim;
    let plen = cfg.patch.patch_len(channels);
    params.insert(format!("{prefix}.spectral"), Tensor::zeros(&[2, s, s, channels]));
    nn::init_dense(params, &format!("{prefix}.part"), plen, d, 1.0, rng);
    nn::init_dense(params, &format!("{prefix}.freq"), plen, d, 1.0, rng);
    nn::init_dense(params, &format!("{prefix}.mlp1"), d, cfg.mlp_hidden, 2f64.sqrt(), rng);
    nn::init_dense(params, &format!("{prefix}.mlp2"), cfg.mlp_hidden, d, 1.0, rng);
}

/// Graph nodes produced by the local encoder for a batch of crops.
#[derive(Clone, Copy, Debug)]
pub struct LpmVars {
    /// Branch tokens before mixing, `[batch * 2 * n, dim]`: per item, part tokens then
    /// spectral tokens.
    pub pre_mlp: Var,
    /// Mixed tokens, same layout as `pre_mlp`.
    pub tokens: Var,
    /// `[batch, dim]`.
    pub pooled: Var,
}

/// Local encoder over `crops: [batch, side, side, channels]`.
pub fn lpm_graph(g: &mut Graph, crops: &Tensor, cfg: &LpmConfig, prefix: &str) -> LpmVars {
    let batch = crops.shape()[0];
    let (rows, cols) = cfg.grid();
    let n = rows * cols;
    let x = g.constant(crops.clone());
    let part = patch_tokens(g, x, &cfg.patch, &format!("{prefix}.part"));
    let emb = g.param(&format!("{prefix}.spectral"));
    let filtered = g.spectral(crops, emb);
    let freq = patch_tokens(g, filtered, &cfg.patch, &format!("{prefix}.freq"));
    let stacked = g.concat_rows(&[part, freq]);
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| (b * n..(b + 1) * n).chain(batch * n + b * n..batch * n + (b + 1) * n))
        .collect();
    let pre_mlp = g.gather_rows(stacked, &order);
    let h = nn::dense(g, pre_mlp, &format!("{prefix}.mlp1"));
    let h = g.gelu(h);
    let tokens = nn::dense(g, h, &format!("{prefix}.mlp2"));
    let pooled = g.group_mean(tokens, 2 * n);
    LpmVars { pre_mlp, tokens, pooled }
}

/// Local prompt of one region; parameters are looked up under `lpm.`.
pub fn lpm_forward(image: &Image, region: &BBox, cfg: &LpmConfig, params: &Params) -> Result<PromptEmbedding> {
    cfg.validate()?;
    let crops = crop_batch(image, std::slice::from_ref(region), cfg.roi_size)?;
    let mut g = Graph::with_params(params);
    let out = lpm_graph(&mut g, &crops, cfg, "lpm");
    let (rows, cols) = cfg.grid();
    let tokens = TokenGrid::new(
        g.value(out.tokens).clone(),
        (2 * rows, cols),
        AnnotationFrame::of_size(cfg.roi_size, cfg.roi_size),
    )?;
    Ok(PromptEmbedding {
        tokens,
        pooled: g.value(out.pooled).data().to_vec(),
    })
}
