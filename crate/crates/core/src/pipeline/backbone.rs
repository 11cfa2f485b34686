//! Stride-2 convolution stack producing one feature map per stage.

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::nn;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of each stage; stage `i` (0-based) has stride `2^(i+1)`.
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn stride(&self, stage: usize) -> usize {
        1 << (stage + 1)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if self.stages() < 2 {
            return Err(Error::InvalidConfig("the backbone needs at least two stages".into()));
        }
        let m = self.stride(self.stages() - 1);
        for side in [height, width] {
            if side == 0 || side % m != 0 {
                return Err(Error::Divisibility { side, divisor: m });
            }
        }
        Ok(())
    }
}

pub fn init_backbone(params: &mut Params, cfg: &BackboneConfig, rng: &mut impl Rng) {
    let mut cin = cfg.in_channels;
    for (i, &c) in cfg.channels.iter().enumerate() {
        nn::init_conv(params, &format!("backbone.s{i}"), cin, c, 3, rng);
        cin = c;
    }
}

/// Per-stage feature maps `[c_i, h / 2^(i+1), w / 2^(i+1)]`.
pub fn backbone_graph(g: &mut Graph, image: &Image, cfg: &BackboneConfig) -> Result<Vec<Var>> {
    cfg.check_input(image.height(), image.width())?;
    if image.channels() != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "{}-channel image for a {}-channel backbone",
            image.channels(),
            cfg.in_channels
        )));
    }
    let mut x = g.constant(image.to_chw());
    let mut out = Vec::with_capacity(cfg.stages());
    for i in 0..cfg.stages() {
        let y = nn::conv(g, x, &format!("backbone.s{i}"), 3, 2, 1);
        x = g.gelu(y);
        out.push(x);
    }
    Ok(out)
}

pub fn backbone_forward(image: &Image, cfg: &BackboneConfig, params: &Params) -> Result<Vec<Tensor>> {
    let mut g = Graph::with_params(params);
    let stages = backbone_graph(&mut g, image, cfg)?;
    Ok(stages.into_iter().map(|v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(channels: Vec<usize>) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            channels,
        }
    }

    #[test]
    fn stage_shapes_follow_config() {
        let c = cfg(vec![8, 16, 32]);
        let mut params = Params::new();
        init_backbone(&mut params, &c, &mut ChaCha8Rng::seed_from_u64(0));
        let img = Image::from_fn(64, 64, 3, |y, x, _| ((x ^ y) & 1) as f64);
        let f = backbone_forward(&img, &c, &params).unwrap();
        let shapes: Vec<&[usize]> = f.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[8, 32, 32][..], &[16, 16, 16], &[32, 8, 8]]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let c = cfg(vec![4, 4, 4]);
        let mut params = Params::new();
        init_backbone(&mut params, &c, &mut ChaCha8Rng::seed_from_u64(0));
        let img = Image::zeros(60, 64, 3);
        assert!(matches!(
            backbone_forward(&img, &c, &params),
            Err(Error::Divisibility { side: 60, divisor: 8 })
        ));
        assert!(cfg(vec![4]).check_input(8, 8).is_err());
    }
}
