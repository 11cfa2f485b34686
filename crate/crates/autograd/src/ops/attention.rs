//! Batched multi-head scaled dot-product attention without projections.
//!
//! Queries are `[batch * nq, dim]`; keys and values are `[kv_batch * nk, dim]`
//! where `kv_batch` is either `batch` or 1 (one context shared by every batch item).
//! Each head attends within its own `dim / heads` column slice.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
    pub kv_shared: bool,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn kv_offset(&self, b: usize) -> usize {
        if self.kv_shared {
            0
        } else {
            b * self.nk
        }
    }

    pub fn weights_len(&self) -> usize {
        self.batch * self.heads * self.nq * self.nk
    }
}

/// Returns `(output, weights)`; weights laid out `[batch, heads, nq, nk]`.
pub fn forward(q: &[f64], k: &[f64], v: &[f64], g: &AttnGeom) -> (Vec<f64>, Vec<f64>) {
    let dh = g.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; g.batch * g.nq * g.dim];
    let mut weights = vec![0.0; g.weights_len()];
    let mut scores = vec![0.0; g.nk];
    for b in 0..g.batch {
        let kv0 = g.kv_offset(b);
        for h in 0..g.heads {
            let c0 = h * dh;
            for i in 0..g.nq {
                let qi = &q[(b * g.nq + i) * g.dim + c0..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[(kv0 + j) * g.dim + c0..][..dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let wrow = &mut weights[((b * g.heads + h) * g.nq + i) * g.nk..][..g.nk];
                let orow = &mut out[(b * g.nq + i) * g.dim + c0..][..dh];
                for (j, w) in wrow.iter_mut().enumerate() {
                    *w = scores[j] / total;
                    let vj = &v[(kv0 + j) * g.dim + c0..][..dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += *w * x;
                    }
                }
            }
        }
    }
    (out, weights)
}

/// Accumulates gradients for whichever of `dq`, `dk`, `dv` are requested.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    dout: &[f64],
    g: &AttnGeom,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let dh = g.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dw = vec![0.0; g.nk];
    for b in 0..g.batch {
        let kv0 = g.kv_offset(b);
        for h in 0..g.heads {
            let c0 = h * dh;
            for i in 0..g.nq {
                let wrow = &weights[((b * g.heads + h) * g.nq + i) * g.nk..][..g.nk];
                let dorow = &dout[(b * g.nq + i) * g.dim + c0..][..dh];
                let mut dot = 0.0;
                for j in 0..g.nk {
                    let vj = &v[(kv0 + j) * g.dim + c0..][..dh];
                    dw[j] = dorow.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += wrow[j] * dw[j];
                    if let Some(dv) = dv.as_deref_mut() {
                        let dvj = &mut dv[(kv0 + j) * g.dim + c0..][..dh];
                        for (d, o) in dvj.iter_mut().zip(dorow) {
                            *d += wrow[j] * o;
                        }
                    }
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                let qi_off = (b * g.nq + i) * g.dim + c0;
                for j in 0..g.nk {
                    let ds = wrow[j] * (dw[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = (kv0 + j) * g.dim + c0;
                    if let Some(dq) = dq.as_deref_mut() {
                        for c in 0..dh {
                            dq[qi_off + c] += ds * k[kj_off + c];
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        for c in 0..dh {
                            dk[kj_off + c] += ds * q[qi_off + c];
                        }
                    }
                }
            }
        }
    }
}
