//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its parents. Nodes are appended after their parents, so the tape is
//! already in topological order and [`Tape::backward`] only has to walk it
//! once in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used to update running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    ConvTemporal { x: usize, w: usize, pad: usize },
    DepthwiseSpatial { x: usize, w: usize },
    DepthwiseTemporal { x: usize, w: usize, pad: usize },
    Pointwise { x: usize, w: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Elu { x: usize },
    AvgPool { x: usize, size: usize },
    MaskScale { x: usize, mask: Vec<f64> },
    Reshape { x: usize },
    Dense { x: usize, w: usize, b: usize },
    Softmax { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    L2Normalize { x: usize, norms: Vec<f64> },
    GaussianSimilarity { a: usize, b: usize, sigma: f64 },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

/// Dot product with four independent accumulators; fixed summation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[t] += sum_k w[k] * xpad[t + k]` for `t < out.len()`.
#[inline]
fn correlate_into(w: &[f64], xpad: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (k, &wk) in w.iter().enumerate() {
        axpy(wk, &xpad[k..k + n], out);
    }
}

fn pad_row(row: &[f64], pad_left: usize, k: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.resize(row.len() + k - 1, 0.0);
    buf[pad_left..pad_left + row.len()].copy_from_slice(row);
}

/// Left padding of a "same" convolution with kernel length `k`.
pub fn same_padding(k: usize) -> usize {
    (k - 1) / 2
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Temporal "same" convolution applied to every channel with each of the
    /// `F` kernels: `x [B, C, T]`, `w [F, K]` → `[B, F, C, T]`.
    pub fn conv_temporal(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 2 {
            return Err(shape_err("conv_temporal", format!("x {xs:?}, w {ws:?}")));
        }
        let (b, c, t) = (xs[0], xs[1], xs[2]);
        let (f, k) = (ws[0], ws[1]);
        let pad = same_padding(k);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; b * f * c * t];
        let mut buf = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                pad_row(&xv[(bi * c + ci) * t..(bi * c + ci + 1) * t], pad, k, &mut buf);
                for fi in 0..f {
                    let o = ((bi * f + fi) * c + ci) * t;
                    correlate_into(&wv[fi * k..(fi + 1) * k], &buf, &mut out[o..o + t]);
                }
            }
        }
        let value = Tensor::new(&[b, f, c, t], out)?;
        Ok(self.push(value, Op::ConvTemporal { x: x.0, w: w.0, pad }, &[x.0, w.0]))
    }

    /// Spatial depthwise convolution spanning all channels, `D` outputs per
    /// input map: `x [B, F, C, T]`, `w [F*D, C]` → `[B, F*D, T]`.
    pub fn conv_depthwise_spatial(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[2] || ws[0] % xs[1] != 0 {
            return Err(shape_err("conv_depthwise_spatial", format!("x {xs:?}, w {ws:?}")));
        }
        let (b, f, c, t) = (xs[0], xs[1], xs[2], xs[3]);
        let g_total = ws[0];
        let depth = g_total / f;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; b * g_total * t];
        for bi in 0..b {
            for g in 0..g_total {
                let fi = g / depth;
                let o = (bi * g_total + g) * t;
                for ci in 0..c {
                    let xi = ((bi * f + fi) * c + ci) * t;
                    axpy(wv[g * c + ci], &xv[xi..xi + t], &mut out[o..o + t]);
                }
            }
        }
        let value = Tensor::new(&[b, g_total, t], out)?;
        Ok(self.push(value, Op::DepthwiseSpatial { x: x.0, w: w.0 }, &[x.0, w.0]))
    }

    /// Per-map temporal "same" convolution: `x [B, G, T]`, `w [G, K]` → `[B, G, T]`.
    pub fn conv_depthwise_temporal(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[1] {
            return Err(shape_err("conv_depthwise_temporal", format!("x {xs:?}, w {ws:?}")));
        }
        let (b, g, t) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        let pad = same_padding(k);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; b * g * t];
        let mut buf = Vec::new();
        for bi in 0..b {
            for gi in 0..g {
                let o = (bi * g + gi) * t;
                pad_row(&xv[o..o + t], pad, k, &mut buf);
                correlate_into(&wv[gi * k..(gi + 1) * k], &buf, &mut out[o..o + t]);
            }
        }
        let value = Tensor::new(&[b, g, t], out)?;
        Ok(self.push(value, Op::DepthwiseTemporal { x: x.0, w: w.0, pad }, &[x.0, w.0]))
    }

    /// 1×1 convolution mixing maps: `x [B, G, T]`, `w [H, G]` → `[B, H, T]`.
    pub fn conv_pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("conv_pointwise", format!("x {xs:?}, w {ws:?}")));
        }
        let (b, g, t) = (xs[0], xs[1], xs[2]);
        let h = ws[0];
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; b * h * t];
        for bi in 0..b {
            for hi in 0..h {
                let o = (bi * h + hi) * t;
                for gi in 0..g {
                    let xi = (bi * g + gi) * t;
                    axpy(wv[hi * g + gi], &xv[xi..xi + t], &mut out[o..o + t]);
                }
            }
        }
        let value = Tensor::new(&[b, h, t], out)?;
        Ok(self.push(value, Op::Pointwise { x: x.0, w: w.0 }, &[x.0, w.0]))
    }

    /// Batch normalization over axis 1 of a `[B, C, ...]` tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err(
                "batch_norm",
                format!("x {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let n = (b * inner) as f64;
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();

        let (mean, inv_std, stats) = match mode {
            BatchNormMode::Train => {
                if b < 2 {
                    return Err(Error::BatchTooSmall);
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let o = (bi * c + ci) * inner;
                        s += xv[o..o + inner].iter().sum::<f64>();
                    }
                    let m = s / n;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let o = (bi * c + ci) * inner;
                        ss += xv[o..o + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / n;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
                let unbiased = var.iter().map(|v| v * n / (n - 1.0).max(1.0)).collect();
                (mean.clone(), inv, Some(BatchStats { mean, var: unbiased }))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", format!("running stats for {c} channels")));
                }
                let inv = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
                (mean.to_vec(), inv, None)
            }
        };

        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let o = (bi * c + ci) * inner;
                for j in o..o + inner {
                    let h = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = gv[ci] * h + bv[ci];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            train: matches!(mode, BatchNormMode::Train),
        };
        Ok((self.push(value, op, &[x.0, gamma.0, beta.0]), stats))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { libm::expm1(v) })
            .collect();
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::Elu { x: x.0 }, &[x.0])
    }

    /// Non-overlapping average pooling along the last axis; trailing samples
    /// that do not fill a pool are dropped.
    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let t = *xs.last().ok_or_else(|| shape_err("avg_pool", "scalar input".into()))?;
        if size == 0 || t < size {
            return Err(shape_err("avg_pool", format!("pool {size} over length {t}")));
        }
        let out_t = t / size;
        let rows = self.nodes[x.0].value.len() / t;
        let xv = self.nodes[x.0].value.data();
        let scale = 1.0 / size as f64;
        let mut out = Vec::with_capacity(rows * out_t);
        for r in 0..rows {
            let row = &xv[r * t..(r + 1) * t];
            for p in 0..out_t {
                out.push(row[p * size..(p + 1) * size].iter().sum::<f64>() * scale);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = out_t;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::AvgPool { x: x.0, size }, &[x.0]))
    }

    /// Multiplies by a fixed mask (dropout with inverted scaling).
    pub fn mask_scale(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.len() {
            return Err(shape_err("mask_scale", format!("mask {} vs {}", mask.len(), xv.len())));
        }
        let out = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::MaskScale { x: x.0, mask }, &[x.0]))
    }

    /// Inverted dropout: each element is kept with probability `1 - rate`
    /// and scaled by `1 / (1 - rate)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        self.mask_scale(x, mask)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let b = xs[0];
        let rest = xs[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// `x [B, E] · w [E, K] + b [K]`.
    pub fn dense(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (b, e, k) = (xs[0], xs[1], ws[1]);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut out = Vec::with_capacity(b * k);
        for bi in 0..b {
            let mut acc = bv.to_vec();
            for ei in 0..e {
                axpy(xv[bi * e + ei], &wv[ei * k..(ei + 1) * k], &mut acc);
            }
            out.extend_from_slice(&acc);
        }
        let value = Tensor::new(&[b, k], out)?;
        Ok(self.push(value, Op::Dense { x: x.0, w: w.0, b: bias.0 }, &[x.0, w.0, bias.0]))
    }

    /// Row-wise softmax of a `[B, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("softmax", format!("{xs:?}")));
        }
        let out = softmax_rows(self.nodes[x.0].value.data(), xs[1]);
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0 }, &[x.0]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() || labels.iter().any(|&l| l >= xs[1]) {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {xs:?} with {} labels", labels.len()),
            ));
        }
        let k = xs[1];
        let probs = softmax_rows(self.nodes[logits.0].value.data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -libm::log(probs[i * k + l].max(f64::MIN_POSITIVE)))
            .sum::<f64>()
            / labels.len() as f64;
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    /// Divides each row of `[B, E]` by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("l2_normalize", format!("{xs:?}")));
        }
        let e = xs[1];
        let xv = self.nodes[x.0].value.data();
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = Vec::with_capacity(xv.len());
        for (row_idx, row) in xv.chunks_exact(e).enumerate() {
            let n = libm::sqrt(dot(row, row));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { row: row_idx });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::L2Normalize { x: x.0, norms }, &[x.0]))
    }

    /// `exp(-Σ_i ‖a_i − b_i‖² / (2σ²))` summed over the whole batch.
    pub fn gaussian_kernel_similarity(&mut self, a: Var, b: Var, sigma: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "gaussian_kernel_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let s = gaussian_similarity(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), sigma);
        let op = Op::GaussianSimilarity { a: a.0, b: b.0, sigma };
        Ok(self.push(Tensor::scalar(s), op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !av.same_shape(bv) {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !av.same_shape(bv) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::Scale { x: x.0, c }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, &[x.0])
    }

    /// Back-propagates from a scalar `loss` through every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n_loss = self.nodes[loss.0].value.len();
        if n_loss != 1 {
            return Err(Error::NonScalarLoss(n_loss));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g.data(), &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, delta: Vec<f64>) {
        match &mut grads[i] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[i].value.shape(), delta).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let shp = |i: usize| self.nodes[i].value.shape();
        match node.op {
            Op::Leaf => {}
            Op::ConvTemporal { x, w, pad } => {
                let (b, c, t) = (shp(x)[0], shp(x)[1], shp(x)[2]);
                let (f, k) = (shp(w)[0], shp(w)[1]);
                let (xv, wv) = (val(x), val(w));
                let mut gw = vec![0.0; f * k];
                let mut gx = if self.wants(x) { Some(vec![0.0; b * c * t]) } else { None };
                let mut buf = Vec::new();
                let mut gpad = vec![0.0; t + k - 1];
                for bi in 0..b {
                    for ci in 0..c {
                        let xo = (bi * c + ci) * t;
                        pad_row(&xv[xo..xo + t], pad, k, &mut buf);
                        if gx.is_some() {
                            gpad.iter_mut().for_each(|v| *v = 0.0);
                        }
                        for fi in 0..f {
                            let go = ((bi * f + fi) * c + ci) * t;
                            let grow = &g[go..go + t];
                            for ki in 0..k {
                                gw[fi * k + ki] += dot(grow, &buf[ki..ki + t]);
                            }
                            if gx.is_some() {
                                for ki in 0..k {
                                    axpy(wv[fi * k + ki], grow, &mut gpad[ki..ki + t]);
                                }
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[xo..xo + t].copy_from_slice(&gpad[pad..pad + t]);
                        }
                    }
                }
                if self.wants(w) {
                    self.accumulate(grads, w, gw);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, x, gx);
                }
            }
            Op::DepthwiseSpatial { x, w } => {
                let (b, f, c, t) = (shp(x)[0], shp(x)[1], shp(x)[2], shp(x)[3]);
                let g_total = shp(w)[0];
                let depth = g_total / f;
                let (xv, wv) = (val(x), val(w));
                let mut gw = vec![0.0; g_total * c];
                let mut gx = vec![0.0; b * f * c * t];
                for bi in 0..b {
                    for gi in 0..g_total {
                        let fi = gi / depth;
                        let go = (bi * g_total + gi) * t;
                        let grow = &g[go..go + t];
                        for ci in 0..c {
                            let xo = ((bi * f + fi) * c + ci) * t;
                            gw[gi * c + ci] += dot(grow, &xv[xo..xo + t]);
                            axpy(wv[gi * c + ci], grow, &mut gx[xo..xo + t]);
                        }
                    }
                }
                if self.wants(w) {
                    self.accumulate(grads, w, gw);
                }
                if self.wants(x) {
                    self.accumulate(grads, x, gx);
                }
            }
            Op::DepthwiseTemporal { x, w, pad } => {
                let (b, gn, t) = (shp(x)[0], shp(x)[1], shp(x)[2]);
                let k = shp(w)[1];
                let (xv, wv) = (val(x), val(w));
                let mut gw = vec![0.0; gn * k];
                let mut gx = vec![0.0; b * gn * t];
                let mut buf = Vec::new();
                let mut gpad = vec![0.0; t + k - 1];
                for bi in 0..b {
                    for gi in 0..gn {
                        let o = (bi * gn + gi) * t;
                        pad_row(&xv[o..o + t], pad, k, &mut buf);
                        gpad.iter_mut().for_each(|v| *v = 0.0);
                        let grow = &g[o..o + t];
                        for ki in 0..k {
                            gw[gi * k + ki] += dot(grow, &buf[ki..ki + t]);
                            axpy(wv[gi * k + ki], grow, &mut gpad[ki..ki + t]);
                        }
                        gx[o..o + t].copy_from_slice(&gpad[pad..pad + t]);
                    }
                }
                if self.wants(w) {
                    self.accumulate(grads, w, gw);
                }
                if self.wants(x) {
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Pointwise { x, w } => {
                let (b, gn, t) = (shp(x)[0], shp(x)[1], shp(x)[2]);
                let h = shp(w)[0];
                let (xv, wv) = (val(x), val(w));
                let mut gw = vec![0.0; h * gn];
                let mut gx = vec![0.0; b * gn * t];
                for bi in 0..b {
                    for hi in 0..h {
                        let go = (bi * h + hi) * t;
                        let grow = &g[go..go + t];
                        for gi in 0..gn {
                            let xo = (bi * gn + gi) * t;
                            gw[hi * gn + gi] += dot(grow, &xv[xo..xo + t]);
                            axpy(wv[hi * gn + gi], grow, &mut gx[xo..xo + t]);
                        }
                    }
                }
                if self.wants(w) {
                    self.accumulate(grads, w, gw);
                }
                if self.wants(x) {
                    self.accumulate(grads, x, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, ref xhat, ref inv_std, train } => {
                let xs = shp(x);
                let (b, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let n = (b * inner) as f64;
                let gv = val(gamma);
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for ci in 0..c {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        let o = (bi * c + ci) * inner;
                        sum_g += g[o..o + inner].iter().sum::<f64>();
                        sum_gx += dot(&g[o..o + inner], &xhat[o..o + inner]);
                    }
                    ggamma[ci] = sum_gx;
                    gbeta[ci] = sum_g;
                    let scale = gv[ci] * inv_std[ci];
                    for bi in 0..b {
                        let o = (bi * c + ci) * inner;
                        for j in o..o + inner {
                            gx[j] = if train {
                                scale * (g[j] - sum_g / n - xhat[j] * sum_gx / n)
                            } else {
                                scale * g[j]
                            };
                        }
                    }
                }
                if self.wants(gamma) {
                    self.accumulate(grads, gamma, ggamma);
                }
                if self.wants(beta) {
                    self.accumulate(grads, beta, gbeta);
                }
                if self.wants(x) {
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Elu { x } => {
                let delta = g
                    .iter()
                    .zip(val(x))
                    .zip(node.value.data())
                    .map(|((gi, &xi), &yi)| if xi > 0.0 { *gi } else { gi * (yi + 1.0) })
                    .collect();
                self.accumulate(grads, x, delta);
            }
            Op::AvgPool { x, size } => {
                let t = *shp(x).last().expect("rank >= 1");
                let out_t = t / size;
                let rows = val(x).len() / t;
                let scale = 1.0 / size as f64;
                let mut delta = vec![0.0; rows * t];
                for r in 0..rows {
                    for p in 0..out_t {
                        let gp = g[r * out_t + p] * scale;
                        for v in &mut delta[r * t + p * size..r * t + (p + 1) * size] {
                            *v = gp;
                        }
                    }
                }
                self.accumulate(grads, x, delta);
            }
            Op::MaskScale { x, ref mask } => {
                self.accumulate(grads, x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            Op::Reshape { x } => self.accumulate(grads, x, g.to_vec()),
            Op::Dense { x, w, b } => {
                let (bn, e) = (shp(x)[0], shp(x)[1]);
                let k = shp(w)[1];
                let (xv, wv) = (val(x), val(w));
                if self.wants(x) {
                    let mut gx = vec![0.0; bn * e];
                    for bi in 0..bn {
                        for ei in 0..e {
                            gx[bi * e + ei] = dot(&g[bi * k..(bi + 1) * k], &wv[ei * k..(ei + 1) * k]);
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; e * k];
                    for bi in 0..bn {
                        for ei in 0..e {
                            axpy(xv[bi * e + ei], &g[bi * k..(bi + 1) * k], &mut gw[ei * k..(ei + 1) * k]);
                        }
                    }
                    self.accumulate(grads, w, gw);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k];
                    for bi in 0..bn {
                        axpy(1.0, &g[bi * k..(bi + 1) * k], &mut gb);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Softmax { x } => {
                let k = shp(x)[1];
                let y = node.value.data();
                let mut delta = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks_exact(k).zip(g.chunks_exact(k)).enumerate() {
                    let s = dot(yr, gr);
                    for j in 0..k {
                        delta[r * k + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, x, delta);
            }
            Op::CrossEntropy { logits, ref labels, ref probs } => {
                let k = shp(logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut delta: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    delta[i * k + l] -= scale;
                }
                self.accumulate(grads, logits, delta);
            }
            Op::L2Normalize { x, ref norms } => {
                let e = shp(x)[1];
                let y = node.value.data();
                let mut delta = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * e..(r + 1) * e];
                    let gr = &g[r * e..(r + 1) * e];
                    let proj = dot(yr, gr);
                    for j in 0..e {
                        delta[r * e + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                self.accumulate(grads, x, delta);
            }
            Op::GaussianSimilarity { a, b, sigma } => {
                let s = node.value.item();
                let coef = g[0] * s / (sigma * sigma);
                let diff: Vec<f64> = val(a).iter().zip(val(b)).map(|(x, y)| x - y).collect();
                if self.wants(a) {
                    self.accumulate(grads, a, diff.iter().map(|d| -coef * d).collect());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, diff.iter().map(|d| coef * d).collect());
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, x, g.iter().map(|v| v * c).collect()),
            Op::Sum { x } => {
                let n = val(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
        }
    }
}

/// Numerically stable softmax of each length-`k` row.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| libm::exp(v - m)));
        let s: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= s;
        }
    }
    out
}

/// `exp(-Σ (a − b)² / (2σ²))` over flat buffers.
pub fn gaussian_similarity(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    libm::exp(-d / (2.0 * sigma * sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, -10.0, 2.0]));
        let y = tape.elu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!(v[1] > -1.0 && v[1] < -0.9999);
        assert_eq!(v[2], 2.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let z = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(tape.l2_normalize(z), Err(Error::ZeroNorm { row: 1 }));
    }

    #[test]
    fn l2_normalize_jacobian_matches_closed_form() {
        // J = I/‖v‖ − v vᵀ/‖v‖³ at v = (3, 4); probe with each basis cotangent.
        let v = [3.0, 4.0];
        let n = 5.0f64;
        for j in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1, 2], &v).with_grad());
            let y = tape.l2_normalize(x).unwrap();
            let mut e = [0.0, 0.0];
            e[j] = 1.0;
            let sel = tape.leaf(t(&[1, 2], &e));
            let picked = tape.mul(y, sel).unwrap();
            let loss = tape.sum(picked);
            let g = tape.backward(loss).unwrap();
            let g = g.get(x).unwrap().data();
            for i in 0..2 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let expected = delta / n - v[i] * v[j] / (n * n * n);
                assert!((g[i] - expected).abs() < 1e-15, "J[{j}][{i}]");
            }
        }
    }

    #[test]
    fn gaussian_similarity_of_identical_batches_is_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 1.0]));
        let s = tape.gaussian_kernel_similarity(a, a, 2.0).unwrap();
        assert_eq!(tape.value(s).item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert_eq!(tape.backward(a).unwrap_err(), Error::NonScalarLoss(2));
    }

    #[test]
    fn train_batch_norm_needs_two_samples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 3], &[1.0; 6]));
        let g = tape.leaf(t(&[2], &[1.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        assert_eq!(
            tape.batch_norm(x, g, b, BatchNormMode::Train).unwrap_err(),
            Error::BatchTooSmall
        );
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 10]));
        let w_bad = tape.leaf(Tensor::zeros(&[4, 5]));
        assert!(tape.conv_pointwise(x, w_bad).is_err());
        let d = tape.leaf(Tensor::zeros(&[2, 7]));
        let w = tape.leaf(Tensor::zeros(&[6, 2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.dense(d, w, b).is_err());
        assert!(tape.add(d, x).is_err());
    }

    #[test]
    fn same_padding_keeps_length() {
        let mut tape = Tape::new();
        for k in [1, 2, 5, 16, 64] {
            let x = tape.leaf(Tensor::full(&[1, 1, 20], 1.0));
            let w = tape.leaf(Tensor::full(&[1, k], 1.0));
            let y = tape.conv_depthwise_temporal(x, w).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, 1, 20]);
        }
    }
}
