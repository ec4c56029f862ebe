//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends one node to a [`Tape`]. Parameters enter the tape
//! borrowed (no copy); everything downstream is owned by the tape. Nodes whose
//! inputs never require a gradient are stored as constants, so frozen parts of
//! a network cost only their forward arithmetic.
//!
//! [`Tape::backward`] walks the nodes in reverse insertion order, which fixes
//! the gradient accumulation order for a given forward order.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Geometry of a strided patch extraction over a token-major `[H*W x C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

const PAD: u32 = u32::MAX;

#[derive(Debug)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddBias { a: Var, bias: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var },
    Gelu { x: Var },
    Mask { x: Var, mask: Vec<f64> },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    ConcatRows { parts: Vec<Var> },
    Gather { x: Var, index: Vec<u32> },
    Upsample { x: Var, channels: usize, in_hw: (usize, usize), ys: Vec<AxisTap>, xs: Vec<AxisTap> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<u16>, ignore_index: u16, count: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            AddBias { a, bias } => vec![*a, *bias],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Scale { a, .. } => vec![*a],
            Softmax { x }
            | Gelu { x }
            | Mask { x, .. }
            | Transpose { x, .. }
            | Reshape { x }
            | SliceCols { x, .. }
            | Gather { x, .. }
            | Upsample { x, .. }
            | Sum { x }
            | Mean { x } => vec![*x],
            ConcatCols { parts } => parts.iter().map(|(v, _)| *v).collect(),
            ConcatRows { parts } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a borrowed tensor. Gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Cow::Borrowed(tensor.data()),
            grad: None,
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned tensor.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(tensor.into_data()),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("tape node shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            grad: None,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().expect("shapes are non-empty")
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.is_empty()
            || shape.contains(&0)
            || shape.iter().product::<usize>() != self.value(x).len()
        {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x }))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, factor })
    }

    /// Adds a `[d]` bias to every position of a `[..., d]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.last_dim(a);
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias { a, bias }))
    }

    /// Sums a non-empty list of same-shaped tensors left to right.
    pub fn sum_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    // ---- normalization & activations ------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let src = self.value(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.last_dim(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x })
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x })
    }

    /// Inverted dropout. Eval mode and `p == 0` return `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        check_rate(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.apply_mask(x, mask))
    }

    /// Stochastic depth: drops whole slices along the leading (batch) axis.
    pub fn drop_path(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        check_rate(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let batch = self.shape(x)[0];
        let keep: Vec<bool> = (0..batch).map(|_| rng.random::<f64>() >= p).collect();
        self.drop_path_with_mask(x, &keep, p)
    }

    /// Stochastic depth with an explicit per-batch-element keep mask.
    pub fn drop_path_with_mask(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        check_rate(p)?;
        let batch = self.shape(x)[0];
        if keep.len() != batch {
            return Err(Error::shape("drop_path", self.shape(x), &[keep.len()]));
        }
        let per = self.value(x).len() / batch;
        let scale = 1.0 / (1.0 - p);
        let mask = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { scale } else { 0.0 }, per))
            .collect();
        Ok(self.apply_mask(x, mask))
    }

    fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(self.shape(x).to_vec(), out, Op::Mask { x, mask })
    }

    // ---- layout ---------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > cols {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.value(x);
        let out = (0..rows)
            .flat_map(|r| src[r * cols + start..r * cols + start + width].iter().copied())
            .collect();
        Ok(self.push(vec![rows, width], out, Op::SliceCols { x, start, cols }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: widths }))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            lead += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Extracts zero-padded `k x k` patches from a token-major `[H*W x C]`
    /// map. Output is `[Ho*Wo x k*k*C]`, columns ordered (ky, kx, c).
    pub fn patches(&mut self, x: Var, g: PatchGeometry) -> Result<Var> {
        if self.shape(x) != [g.height * g.width, g.channels]
            || g.kernel == 0
            || g.stride == 0
            || g.height + 2 * g.padding < g.kernel
            || g.width + 2 * g.padding < g.kernel
        {
            return Err(Error::shape(
                "patches",
                self.shape(x),
                &[g.height * g.width, g.channels, g.kernel, g.stride],
            ));
        }
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut index = Vec::with_capacity(oh * ow * g.patch_len());
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width;
                        for c in 0..g.channels {
                            index.push(if inside {
                                ((iy as usize * g.width + ix as usize) * g.channels + c) as u32
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
        let src = self.value(x);
        let out = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { src[i as usize] })
            .collect();
        Ok(self.push(vec![oh * ow, g.patch_len()], out, Op::Gather { x, index }))
    }

    /// Bilinear resize of a channel-major `[C x H x W]` map to a larger (or
    /// equal) size, half-pixel centers (align-corners off).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::shape("upsample_bilinear", s, &[out_h, out_w])),
        };
        if out_h < h || out_w < w {
            return Err(Error::InvalidArgument(format!(
                "upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}"
            )));
        }
        let ys = axis_taps(h, out_h);
        let xs = axis_taps(w, out_w);
        let src = self.value(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for ty in &ys {
                for tx in &xs {
                    let top = plane[ty.lo * w + tx.lo] * (1.0 - tx.frac) + plane[ty.lo * w + tx.hi] * tx.frac;
                    let bot = plane[ty.hi * w + tx.lo] * (1.0 - tx.frac) + plane[ty.hi * w + tx.hi] * tx.frac;
                    out.push(top * (1.0 - ty.frac) + bot * ty.frac);
                }
            }
        }
        Ok(self.push(
            vec![c, out_h, out_w],
            out,
            Op::Upsample { x, channels: c, in_hw: (h, w), ys, xs },
        ))
    }

    // ---- reductions & losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean { x })
    }

    /// Mean pixel cross-entropy of `[K x ...]` channel-major logits against
    /// one label per pixel. Ignored pixels contribute neither loss nor
    /// gradient; with no scored pixel the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u16], ignore_index: u16) -> Result<Var> {
        let k = self.shape(logits)[0];
        let total = self.value(logits).len();
        let pixels = total / k;
        if self.shape(logits).len() < 2 || labels.len() != pixels {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes (ignore index {ignore_index})"
            )));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; total];
        let mut column = vec![0.0; k];
        let mut loss = 0.0;
        let mut count = 0;
        for p in 0..pixels {
            for c in 0..k {
                column[c] = src[c * pixels + p];
            }
            softmax_in_place(&mut column);
            for c in 0..k {
                probs[c * pixels + p] = column[c];
            }
            let label = labels[p];
            if label != ignore_index {
                let l = label as usize;
                // log-softmax from the logits keeps precision when probs underflow
                let max = (0..k).map(|c| src[c * pixels + p]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (src[c * pixels + p] - max).exp()).sum::<f64>().ln();
                loss += lse - src[l * pixels + p];
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy { logits, probs, labels: labels.to_vec(), ignore_index, count },
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Leaf gradients accumulate across calls; intermediate gradients hold
    /// the most recent pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match (&node.op, &mut node.grad) {
                (Op::Leaf, Some(acc)) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                (_, slot) => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if target.requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += s * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor)),
            &Op::AddBias { a, bias } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(bias, &mut |gb| {
                    for row in g.chunks_exact(gb.len()) {
                        add_into(gb, row);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.last_dim(*x);
                let gv = self.value(*gamma);
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, s) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = grow[c] * gv[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, hrow) / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += s * (dxhat[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            &Op::Softmax { x } => {
                let n = self.last_dim(x);
                let y = &node.value;
                acc(x, &mut |gx| {
                    for ((grow, yrow), dst) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let inner = dot(grow, yrow);
                        for c in 0..n {
                            dst[c] += yrow[c] * (grow[c] - inner);
                        }
                    }
                });
            }
            &Op::Gelu { x } => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        let v = xv[i];
                        gx[i] += g[i] * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                });
            }
            Op::Mask { x, mask } => acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            &Op::Transpose { x, rows, cols } => acc(x, &mut |gx| {
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            &Op::Reshape { x } => acc(x, &mut |gx| add_into(gx, g)),
            &Op::SliceCols { x, start, cols } => {
                let width = node.shape[1];
                acc(x, &mut |gx| {
                    for (r, grow) in g.chunks_exact(width).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + width], grow);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let mut offset = 0;
                for &(p, c) in parts {
                    acc(p, &mut |gp| {
                        for (r, grow) in g.chunks_exact(total).enumerate() {
                            add_into(&mut gp[r * c..(r + 1) * c], &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (&i, &gv) in index.iter().zip(g) {
                    if i != PAD {
                        gx[i as usize] += gv;
                    }
                }
            }),
            Op::Upsample { x, channels, in_hw: (h, w), ys, xs } => acc(*x, &mut |gx| {
                let (out_h, out_w) = (ys.len(), xs.len());
                for ch in 0..*channels {
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    let gplane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    for (oy, ty) in ys.iter().enumerate() {
                        for (ox, tx) in xs.iter().enumerate() {
                            let gv = gplane[oy * out_w + ox];
                            let top = gv * (1.0 - ty.frac);
                            let bot = gv * ty.frac;
                            plane[ty.lo * w + tx.lo] += top * (1.0 - tx.frac);
                            plane[ty.lo * w + tx.hi] += top * tx.frac;
                            plane[ty.hi * w + tx.lo] += bot * (1.0 - tx.frac);
                            plane[ty.hi * w + tx.hi] += bot * tx.frac;
                        }
                    }
                }
            }),
            &Op::Sum { x } => acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { x } => {
                let n = self.value(x).len() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::CrossEntropy { logits, probs, labels, ignore_index, count } => {
                if *count == 0 {
                    return;
                }
                let pixels = labels.len();
                let k = probs.len() / pixels;
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (p, &label) in labels.iter().enumerate() {
                        if label == *ignore_index {
                            continue;
                        }
                        for c in 0..k {
                            let target = if c == label as usize { 1.0 } else { 0.0 };
                            gl[c * pixels + p] += scale * (probs[c * pixels + p] - target);
                        }
                    }
                });
            }
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("drop rate must lie in [0, 1), got {p}")))
    }
}

fn axis_taps(input: usize, output: usize) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            AxisTap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
