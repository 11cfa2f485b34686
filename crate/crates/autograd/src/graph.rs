//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node that stores its forward value and whatever it
//! needs for the backward pass. Nodes are topologically ordered by construction,
//! so the backward sweep simply walks the tape in reverse.

use std::collections::HashMap;

use crate::ops::attention::{self, AttnGeom};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::patches::{self, PatchGeom};
use crate::ops::{pool, spectral};
use crate::tensor::gemm;
use crate::{Params, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    LayerNorm { a: Var, rstd: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    RoiMaxPool { feat: Var, argmax: Vec<usize> },
    Patches { x: Var, geom: PatchGeom },
    Fold { x: Var, geom: PatchGeom },
    Spectral { emb: Var, batch: usize, height: usize, width: usize, channels: usize },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, weights: Vec<f64> },
    GroupMean { a: Var, group: usize },
    RepeatGroups { a: Var, group: usize },
    GroupMatMul { a: Var, m: Tensor, group: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Tensor, weights: Tensor, norm: f64 },
    SmoothL1 { pred: Var, target: Tensor, weights: Tensor, beta: f64, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p Params>,
    param_vars: HashMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    /// Graph whose [`Graph::param`] lookups resolve against `params`.
    pub fn with_params(params: &'p Params) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter leaf; repeated lookups of the same name share one node.
    ///
    /// Panics when the graph has no parameter store or the name is missing.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let params = self.params.expect("graph has no parameter store");
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.is_some_and(|p| p.contains(name))
    }

    // ---- linear algebra -------------------------------------------------

    fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices, got {sa:?} and {sb:?}");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {sa:?} x {sb:?}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.mm(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.mm(a, b, false, true)
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.mm(a, b, true, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `v` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (va, vv) = (self.value(a), self.value(v));
        let c = va.cols();
        assert_eq!(vv.len(), c, "row-vector length mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(vv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(v);
        self.push(t, Op::AddRow(a, v), rg)
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        let (va, vv) = (self.value(a), self.value(v));
        let c = va.cols();
        assert_eq!(vv.len(), c, "row-vector length mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(vv.data()) {
                *x *= b;
            }
        }
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(v);
        self.push(t, Op::MulRow(a, v), rg)
    }

    /// Adds `v[r]` to every entry of row `r` (rows = leading axis).
    pub fn add_col(&mut self, a: Var, v: Var) -> Var {
        let (va, vv) = (self.value(a), self.value(v));
        let r = va.shape()[0];
        assert_eq!(vv.len(), r, "column-vector length mismatch");
        let per = va.len() / r.max(1);
        let mut data = va.data().to_vec();
        for (i, row) in data.chunks_exact_mut(per.max(1)).enumerate() {
            for x in row.iter_mut() {
                *x += vv.data()[i];
            }
        }
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a) || self.rg(v);
        self.push(t, Op::AddCol(a, v), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    // ---- elementwise nonlinearities --------------------------------------

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu(x).0);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp { a, lo, hi }, rg)
    }

    /// Normalizes every row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        let mut rstd = Vec::with_capacity(va.rows());
        for row in data.chunks_exact_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm { a, rstd }, rg)
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose2();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[rows, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[rows, cols], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(start + len <= cols);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[rows, len], data), Op::SliceCols { a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[idx.len(), cols], data),
            Op::GatherRows { a, idx: idx.to_vec() },
            rg,
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// `[groups * group, d] -> [groups, d]` by averaging consecutive row blocks.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(group > 0 && rows % group == 0, "group_mean: {rows} rows not divisible by {group}");
        let groups = rows / group;
        let mut data = vec![0.0; groups * cols];
        for r in 0..rows {
            let dst = &mut data[(r / group) * cols..][..cols];
            for (d, s) in dst.iter_mut().zip(va.row(r)) {
                *d += s / group as f64;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[groups, cols], data), Op::GroupMean { a, group }, rg)
    }

    /// `[groups, d] -> [groups * group, d]` by repeating each row.
    pub fn repeat_groups(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(rows * group * cols);
        for r in 0..rows {
            for _ in 0..group {
                data.extend_from_slice(va.row(r));
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[rows * group, cols], data), Op::RepeatGroups { a, group }, rg)
    }

    /// Left-multiplies every `[group, k]` row block of `a` by the constant `m: [p, group]`.
    pub fn group_matmul(&mut self, a: Var, m: Tensor) -> Var {
        let va = self.value(a);
        let (rows, k) = (va.rows(), va.cols());
        assert_eq!(m.ndim(), 2);
        let (p, group) = (m.shape()[0], m.shape()[1]);
        assert!(rows % group == 0, "group_matmul: rows not divisible by group");
        let groups = rows / group;
        let mut data = vec![0.0; groups * p * k];
        for gi in 0..groups {
            gemm(
                p,
                group,
                k,
                m.data(),
                false,
                &va.data()[gi * group * k..],
                false,
                0.0,
                &mut data[gi * p * k..(gi + 1) * p * k],
            );
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[groups * p, k], data), Op::GroupMatMul { a, m, group }, rg)
    }

    // ---- structured operators ------------------------------------------

    /// 2-D convolution of a `[cin, h, w]` input with weights `[cout, cin*k*k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "conv2d expects [c, h, w]");
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 2);
        let geom = ConvGeom {
            cin: sx[0],
            height: sx[1],
            width: sx[2],
            cout: sw[0],
            kernel,
            stride,
            pad,
        };
        assert_eq!(sw[1], geom.cin * kernel * kernel, "conv2d weight shape mismatch");
        let cols = conv::im2col(self.value(x).data(), &geom);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut out = vec![0.0; geom.cout * ho * wo];
        gemm(
            geom.cout,
            sw[1],
            ho * wo,
            self.value(w).data(),
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        let cols = if rg { cols } else { Vec::new() };
        self.push(
            Tensor::new(&[geom.cout, ho, wo], out),
            Op::Conv2d { x, w, geom, cols },
            rg,
        )
    }

    /// Max-pools regions of a `[c, h, w]` map, given in feature-map coordinates.
    ///
    /// Output is `[regions * out * out, c]`.
    pub fn roi_max_pool(&mut self, feat: Var, regions: &[[f64; 4]], out: usize) -> Var {
        let s = self.shape(feat).to_vec();
        assert_eq!(s.len(), 3, "roi_max_pool expects [c, h, w]");
        let (values, argmax) = pool::roi_max(self.value(feat).data(), s[0], s[1], s[2], regions, out);
        let rg = self.rg(feat);
        self.push(
            Tensor::new(&[regions.len() * out * out, s[0]], values),
            Op::RoiMaxPool { feat, argmax },
            rg,
        )
    }

    /// Extracts patches from `[batch, h, w, c]` into `[batch * tokens, patch*patch*c]`.
    pub fn patches(&mut self, x: Var, patch: usize, stride: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "patches expects [b, h, w, c]");
        let geom = PatchGeom {
            batch: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            patch,
            stride,
        };
        assert!(patch <= s[1] && patch <= s[2] && stride >= 1);
        let data = patches::extract(self.value(x).data(), &geom);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[geom.batch * geom.tokens_per_item(), geom.patch_len()], data),
            Op::Patches { x, geom },
            rg,
        )
    }

    /// Adjoint of [`Graph::patches`]: sums `[batch * tokens, patch*patch*c]` patch rows
    /// back into `[batch, h, w, c]`, adding where patches overlap.
    pub fn fold(&mut self, x: Var, batch: usize, height: usize, width: usize, patch: usize, stride: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(patch <= height && patch <= width && stride >= 1);
        let channels = s[1] / (patch * patch);
        let geom = PatchGeom {
            batch,
            height,
            width,
            channels,
            patch,
            stride,
        };
        assert_eq!(
            s,
            [batch * geom.tokens_per_item(), geom.patch_len()],
            "fold input does not match the patch geometry"
        );
        let mut data = vec![0.0; batch * height * width * channels];
        patches::scatter(self.value(x).data(), &geom, &mut data);
        let rg = self.rg(x);
        self.push(Tensor::new(&[batch, height, width, channels], data), Op::Fold { x, geom }, rg)
    }

    /// `Re(IFFT(FFT(x) + emb))` per channel, with `x: [b, h, w, c]` held constant and a
    /// learnable `emb: [2, h, w, c]`.
    pub fn spectral(&mut self, x: &Tensor, emb: Var) -> Var {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "spectral expects [b, h, w, c]");
        let (batch, height, width, channels) = (s[0], s[1], s[2], s[3]);
        assert_eq!(self.shape(emb), &[2, height, width, channels], "spectral embedding shape mismatch");
        let per = height * width * channels;
        let mut data = Vec::with_capacity(batch * per);
        for b in 0..batch {
            data.extend(spectral::forward(
                &x.data()[b * per..(b + 1) * per],
                self.value(emb).data(),
                height,
                width,
                channels,
            ));
        }
        let rg = self.rg(emb);
        self.push(
            Tensor::new(&s, data),
            Op::Spectral {
                emb,
                batch,
                height,
                width,
                channels,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention with one key/value context per batch item.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        assert_eq!(self.shape(v), sk.as_slice(), "attention key/value shape mismatch");
        let dim = sq[1];
        assert_eq!(sk[1], dim, "attention query/key dim mismatch");
        assert!(heads >= 1 && dim % heads == 0);
        assert!(sq[0] % batch == 0 && sk[0] % batch == 0, "attention rows not divisible by batch");
        let geom = AttnGeom {
            batch,
            nq: sq[0] / batch,
            nk: sk[0] / batch,
            dim,
            heads,
            kv_shared: false,
        };
        self.attention_with(q, k, v, geom)
    }

    /// Attention where a single key/value context is shared by every batch item.
    pub fn attention_shared(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        let dim = sq[1];
        assert_eq!(sk[1], dim);
        assert!(heads >= 1 && dim % heads == 0 && sq[0] % batch == 0);
        let geom = AttnGeom {
            batch,
            nq: sq[0] / batch,
            nk: sk[0],
            dim,
            heads,
            kv_shared: true,
        };
        self.attention_with(q, k, v, geom)
    }

    fn attention_with(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom) -> Var {
        let (out, weights) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &geom,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(&[geom.batch * geom.nq, geom.dim], out),
            Op::Attention {
                q,
                k,
                v,
                geom,
                weights,
            },
            rg,
        )
    }

    /// Attention weights `[batch, heads, nq, nk]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ---- losses ---------------------------------------------------------

    /// Mean softmax cross-entropy of `[n, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let (n, k) = (vl.rows(), vl.cols());
        assert_eq!(targets.len(), n);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < k, "target class out of range");
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
        }
        let value = if n == 0 { 0.0 } else { loss / n as f64 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `sum(w * bce(logits, targets)) / norm`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor, weights: Tensor, norm: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), targets.len());
        assert_eq!(vl.len(), weights.len());
        let mut total = 0.0;
        for ((x, t), w) in vl.data().iter().zip(targets.data()).zip(weights.data()) {
            if *w != 0.0 {
                total += w * (softplus(*x) - t * x);
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / norm),
            Op::BceLogits {
                logits,
                targets,
                weights,
                norm,
            },
            rg,
        )
    }

    /// `sum(w * smooth_l1(pred - target)) / norm` with transition point `beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor, weights: Tensor, beta: f64, norm: f64) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.len(), target.len());
        assert_eq!(vp.len(), weights.len());
        let mut total = 0.0;
        for ((p, t), w) in vp.data().iter().zip(target.data()).zip(weights.data()) {
            let d = (p - t).abs();
            let l = if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            total += w * l;
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total / norm),
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
                norm,
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let param_names = self
            .param_vars
            .iter()
            .map(|(name, &v)| (name.clone(), v))
            .collect();
        Gradients {
            grads,
            param_vars: param_names,
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g.reshape(self.shape(v))),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *ta { va.shape()[0] } else { va.shape()[1] };
                if self.rg(*a) {
                    self.accum_with(grads, *a, |da| {
                        if !*ta {
                            gemm(m, n, k, gd, false, vb.data(), !*tb, 1.0, da);
                        } else {
                            gemm(k, n, m, vb.data(), *tb, gd, true, 1.0, da);
                        }
                    });
                }
                if self.rg(*b) {
                    self.accum_with(grads, *b, |db| {
                        if !*tb {
                            gemm(k, m, n, va.data(), !*ta, gd, false, 1.0, db);
                        } else {
                            gemm(n, m, k, gd, true, va.data(), *ta, 1.0, db);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(va.shape(), d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(vb.shape(), d));
                }
            }
            Op::AddRow(a, v) => {
                self.accum(grads, *a, g.clone());
                let c = node.value.cols();
                self.accum_with(grads, *v, |dv| {
                    for row in gd.chunks_exact(c) {
                        for (d, x) in dv.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                });
            }
            Op::MulRow(a, v) => {
                let (va, vv) = (self.value(*a), self.value(*v));
                let c = node.value.cols();
                if self.rg(*a) {
                    let mut d = gd.to_vec();
                    for row in d.chunks_exact_mut(c) {
                        for (x, s) in row.iter_mut().zip(vv.data()) {
                            *x *= s;
                        }
                    }
                    self.accum(grads, *a, Tensor::new(va.shape(), d));
                }
                self.accum_with(grads, *v, |dv| {
                    for (grow, arow) in gd.chunks_exact(c).zip(va.data().chunks_exact(c)) {
                        for ((d, x), y) in dv.iter_mut().zip(grow).zip(arow) {
                            *d += x * y;
                        }
                    }
                });
            }
            Op::AddCol(a, v) => {
                self.accum(grads, *a, g.clone());
                let r = node.value.shape()[0];
                let per = (node.value.len() / r.max(1)).max(1);
                self.accum_with(grads, *v, |dv| {
                    for (i, row) in gd.chunks_exact(per).enumerate() {
                        dv[i] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, k) => self.accum(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = gd.iter().zip(va.data()).map(|(x, y)| x * gelu(*y).1).collect();
                self.accum(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, s)| x * s * (1.0 - s))
                    .collect();
                self.accum(grads, *a, Tensor::new(node.value.shape(), d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(x, e)| x * e).collect();
                self.accum(grads, *a, Tensor::new(node.value.shape(), d));
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let d = gd.iter().zip(va.data()).map(|(x, y)| 2.0 * x * y).collect();
                self.accum(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::Clamp { a, lo, hi } => {
                let va = self.value(*a);
                let d = gd
                    .iter()
                    .zip(va.data())
                    .map(|(x, y)| if *y >= *lo && *y <= *hi { *x } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(va.shape(), d));
            }
            Op::LayerNorm { a, rstd } => {
                let c = node.value.cols();
                let mut d = vec![0.0; gd.len()];
                for (r, ((drow, grow), yrow)) in d
                    .chunks_exact_mut(c)
                    .zip(gd.chunks_exact(c))
                    .zip(node.value.data().chunks_exact(c))
                    .enumerate()
                {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / c as f64;
                    for i in 0..c {
                        drow[i] = rstd[r] * (grow[i] - mg - yrow[i] * mgy);
                    }
                }
                self.accum(grads, *a, Tensor::new(node.value.shape(), d));
            }
            Op::Reshape(a) => self.accum(grads, *a, g.clone().reshape(self.shape(*a))),
            Op::Transpose(a) => self.accum(grads, *a, g.transpose2()),
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        self.accum(grads, p, Tensor::new(&[rows, w], d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.accum(grads, p, Tensor::new(self.shape(p), gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SliceCols { a, start } => {
                let cols = self.value(*a).cols();
                let len = node.value.cols();
                self.accum_with(grads, *a, |da| {
                    for (r, row) in gd.chunks_exact(len).enumerate() {
                        for (d, x) in da[r * cols + start..r * cols + start + len].iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.cols();
                self.accum_with(grads, *a, |da| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, x) in da[i * cols..(i + 1) * cols].iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.accum(grads, *a, Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::GroupMean { a, group } => {
                let cols = node.value.cols();
                let rows = self.value(*a).rows();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let src = &gd[(r / group) * cols..][..cols];
                    for (x, s) in d[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *x = s / *group as f64;
                    }
                }
                self.accum(grads, *a, Tensor::new(self.shape(*a), d));
            }
            Op::RepeatGroups { a, group } => {
                let cols = node.value.cols();
                self.accum_with(grads, *a, |da| {
                    for (r, row) in gd.chunks_exact(cols).enumerate() {
                        for (d, x) in da[(r / group) * cols..][..cols].iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                });
            }
            Op::GroupMatMul { a, m, group } => {
                let k = node.value.cols();
                let p = m.shape()[0];
                let groups = node.value.rows() / p;
                self.accum_with(grads, *a, |da| {
                    for gi in 0..groups {
                        gemm(
                            *group,
                            p,
                            k,
                            m.data(),
                            true,
                            &gd[gi * p * k..],
                            false,
                            1.0,
                            &mut da[gi * group * k..(gi + 1) * group * k],
                        );
                    }
                });
            }
            Op::Conv2d { x, w, geom, cols } => {
                let npix = geom.out_height() * geom.out_width();
                let plen = geom.cin * geom.kernel * geom.kernel;
                if self.rg(*w) {
                    self.accum_with(grads, *w, |dw| {
                        gemm(geom.cout, npix, plen, gd, false, cols, true, 1.0, dw);
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; plen * npix];
                    gemm(plen, geom.cout, npix, self.value(*w).data(), true, gd, false, 0.0, &mut dcols);
                    self.accum_with(grads, *x, |dx| conv::col2im(&dcols, geom, dx));
                }
            }
            Op::RoiMaxPool { feat, argmax } => {
                self.accum_with(grads, *feat, |df| {
                    for (x, &i) in gd.iter().zip(argmax) {
                        df[i] += x;
                    }
                });
            }
            Op::Patches { x, geom } => {
                self.accum_with(grads, *x, |dx| patches::scatter(gd, geom, dx));
            }
            Op::Fold { x, geom } => {
                let rows = patches::extract(gd, geom);
                self.accum_with(grads, *x, |dx| {
                    for (d, r) in dx.iter_mut().zip(&rows) {
                        *d += r;
                    }
                });
            }
            Op::Spectral {
                emb,
                batch,
                height,
                width,
                channels,
            } => {
                let per = height * width * channels;
                self.accum_with(grads, *emb, |de| {
                    for b in 0..*batch {
                        spectral::backward_emb(&gd[b * per..(b + 1) * per], *height, *width, *channels, de);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                weights,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = self.rg(*q).then(|| vec![0.0; vq.len()]);
                let mut dk = self.rg(*k).then(|| vec![0.0; vk.len()]);
                let mut dv = self.rg(*v).then(|| vec![0.0; vv.len()]);
                attention::backward(
                    vq.data(),
                    vk.data(),
                    vv.data(),
                    weights,
                    gd,
                    geom,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(d) = dq {
                    self.accum(grads, *q, Tensor::new(vq.shape(), d));
                }
                if let Some(d) = dk {
                    self.accum(grads, *k, Tensor::new(vk.shape(), d));
                }
                if let Some(d) = dv {
                    self.accum(grads, *v, Tensor::new(vv.shape(), d));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.value(*logits).cols();
                let n = targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= 1.0;
                }
                for x in &mut d {
                    *x *= gd[0] / n;
                }
                self.accum(grads, *logits, Tensor::new(self.shape(*logits), d));
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
                norm,
            } => {
                let vl = self.value(*logits);
                let s = gd[0] / norm;
                let d = vl
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights.data())
                    .map(|((x, t), w)| if *w == 0.0 { 0.0 } else { s * w * (sigmoid(*x) - t) })
                    .collect();
                self.accum(grads, *logits, Tensor::new(vl.shape(), d));
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
                norm,
            } => {
                let vp = self.value(*pred);
                let s = gd[0] / norm;
                let d = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights.data())
                    .map(|((p, t), w)| {
                        let diff = p - t;
                        let dl = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        s * w * dl
                    })
                    .collect();
                self.accum(grads, *pred, Tensor::new(vp.shape(), d));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of any recorded node; `None` when no gradient reached it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_vars
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.of(*v))
    }

    /// Gradients for every named parameter that was used in the forward pass.
    pub fn into_params(mut self) -> Params {
        let mut out = Params::new();
        for (name, v) in self.param_vars.drain(..) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}
