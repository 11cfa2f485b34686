//! Parameter initialization and the small layer helpers shared by the model parts.

use boxprompt_autograd::{Graph, Params, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Inserts `{prefix}.w: [din, dout]` (scaled normal) and `{prefix}.b: [dout]` (zeros).
pub fn init_dense(params: &mut Params, prefix: &str, din: usize, dout: usize, gain: f64, rng: &mut impl Rng) {
    let std = gain / (din as f64).sqrt();
    params.insert(format!("{prefix}.w"), normal(&[din, dout], std, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

/// `x @ w + b` for `x: [n, din]`.
pub fn dense(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Inserts `{prefix}.w: [cout, cin*k*k]` and `{prefix}.b: [cout]`.
pub fn init_conv(params: &mut Params, prefix: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) {
    let fan_in = cin * kernel * kernel;
    let std = (2.0 / fan_in as f64).sqrt();
    params.insert(format!("{prefix}.w"), normal(&[cout, fan_in], std, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Convolution of `x: [cin, h, w]` plus a per-channel bias.
pub fn conv(g: &mut Graph, x: Var, prefix: &str, kernel: usize, stride: usize, pad: usize) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.conv2d(x, w, kernel, stride, pad);
    let s = g.shape(y).to_vec();
    let flat = g.reshape(y, &[s[0], s[1] * s[2]]);
    let flat = g.add_col(flat, b);
    g.reshape(flat, &s)
}

pub fn init_layer_norm(params: &mut Params, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let gain = g.param(&format!("{prefix}.gain"));
    let bias = g.param(&format!("{prefix}.bias"));
    let n = g.layer_norm(x, 1e-5);
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Row-stochastic `[out*out, src*src]` matrix that bilinearly resamples a `src x src` grid
/// whose cell `i` sits at `center(i)` in output pixel units onto an `out x out` grid of
/// unit cells. Samples outside the source centers clamp to the border.
pub fn bilinear_matrix(src: usize, center: impl Fn(usize) -> f64, out: usize) -> Tensor {
    let centers: Vec<f64> = (0..src).map(&center).collect();
    let weights_1d = |pos: f64| -> [(usize, f64); 2] {
        if src == 1 || pos <= centers[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if pos >= centers[src - 1] {
            return [(src - 1, 1.0), (src - 1, 0.0)];
        }
        let i = centers.iter().rposition(|c| *c <= pos).expect("pos above first center");
        let t = (pos - centers[i]) / (centers[i + 1] - centers[i]);
        [(i, 1.0 - t), (i + 1, t)]
    };
    let mut m = Tensor::zeros(&[out * out, src * src]);
    let data = m.data_mut();
    for v in 0..out {
        let wy = weights_1d(v as f64 + 0.5);
        for u in 0..out {
            let wx = weights_1d(u as f64 + 0.5);
            let row = v * out + u;
            for (iy, ay) in wy {
                for (ix, ax) in wx {
                    data[row * src * src + iy * src + ix] += ay * ax;
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_matrix(7, |i| 2.0 + 4.0 * i as f64, 28);
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_hits_source_at_centers() {
        // Source cell 1 is centered at output pixel center 6.5.
        let m = bilinear_matrix(3, |i| 2.5 + 4.0 * i as f64, 12);
        let row = 6 * 12 + 6;
        assert!((m.row(row)[4] - 1.0).abs() < 1e-12);
    }
}
