//! Per-channel 2-D FFT helpers for the additive spectral embedding.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place 2-D DFT of a row-major `height x width` plane.
pub fn fft2(plane: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in plane.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = plane[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            plane[y * width + x] = column[y];
        }
    }
}

/// `Re(IFFT(FFT(x) + E)) / (H*W)` per channel, for an `H x W x C` input and an
/// embedding stored as `[2, H, W, C]` (real plane, then imaginary plane).
pub fn forward(x: &[f64], emb: &[f64], height: usize, width: usize, channels: usize) -> Vec<f64> {
    let n = height * width;
    let norm = 1.0 / n as f64;
    let mut out = vec![0.0; n * channels];
    let mut plane = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..channels {
        for p in 0..n {
            plane[p] = Complex64::new(x[p * channels + c], 0.0);
        }
        fft2(&mut plane, height, width, false);
        for p in 0..n {
            plane[p] += Complex64::new(emb[p * channels + c], emb[(n + p) * channels + c]);
        }
        fft2(&mut plane, height, width, true);
        for p in 0..n {
            out[p * channels + c] = plane[p].re * norm;
        }
    }
    out
}

/// Gradient of `forward` with respect to the embedding, accumulated into `demb`.
pub fn backward_emb(dout: &[f64], height: usize, width: usize, channels: usize, demb: &mut [f64]) {
    let n = height * width;
    let norm = 1.0 / n as f64;
    let mut plane = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..channels {
        for p in 0..n {
            plane[p] = Complex64::new(dout[p * channels + c], 0.0);
        }
        fft2(&mut plane, height, width, false);
        for p in 0..n {
            demb[p * channels + c] += plane[p].re * norm;
            demb[(n + p) * channels + c] += plane[p].im * norm;
        }
    }
}
