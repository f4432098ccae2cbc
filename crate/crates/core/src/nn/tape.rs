//! Reverse-mode differentiation over a recorded tape of layer ops.
//!
//! Ops are appended in execution order, so the tape is already a
//! topological order; [`Tape::backward`] walks it in reverse and
//! accumulates gradients into every parent that needs one.

use super::gemm::sgemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

/// Per-channel statistics of one training batch; `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of parameter leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Shape(format!(
            "expected [N, C] or [N, C, H, W], got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient (inputs, fixed data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims()?;
        let [k, wc, kh, kw] = self.value(weight).dims()?;
        if wc != c || kh != 3 || kw != 3 {
            return Err(Error::Shape(format!(
                "conv2d weight [{k}, {wc}, {kh}, {kw}] does not fit input channels {c} (3x3 kernels only)"
            )));
        }
        let hw = h * w;
        let c9 = c * 9;
        let mut out = vec![0f32; n * k * hw];
        let mut cols = vec![0f32; c9 * hw];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            for s in 0..n {
                im2col(&x[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                sgemm(
                    k,
                    c9,
                    hw,
                    1.0,
                    wt,
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut out[s * k * hw..(s + 1) * k * hw],
                );
            }
        }
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(
            Tensor::new(&[n, k, h, w], out)?,
            Op::Conv2d { input, weight },
            needs,
        ))
    }

    /// Per-channel batch normalization over `[N, C]` or `[N, C, H, W]` input.
    /// Returns the batch statistics in train mode so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, sp) = spatial_dims(&shape)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm affine parameters must have shape [{c}]"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let count = n * sp;
        let mut mean = vec![0f32; c];
        let mut var = vec![0f32; c];
        let mut stats = None;
        match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch_norm in train mode needs a batch of at least 2, got {n}"
                    )));
                }
                let mut unbiased = vec![0f32; c];
                for ch in 0..c {
                    let planes = (0..n).map(|i| &x[(i * c + ch) * sp..(i * c + ch + 1) * sp]);
                    let s: f64 = planes.clone().flatten().map(|&v| v as f64).sum();
                    let m = s / count as f64;
                    let sq: f64 = planes.flatten().map(|&v| (v as f64 - m).powi(2)).sum();
                    let v = sq / count as f64;
                    mean[ch] = m as f32;
                    var[ch] = v as f32;
                    unbiased[ch] = (v * count as f64 / (count - 1) as f64) as f32;
                }
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Shape(format!(
                        "running statistics must have {c} channels"
                    )));
                }
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0f32; x.len()];
        let mut out = vec![0f32; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * sp;
                for j in base..base + sp {
                    let xh = (x[j] - mean[ch]) * inv_std[ch];
                    x_hat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let var_out = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: matches!(mode, BnMode::Train),
            },
            needs,
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let shape = src.shape().to_vec();
        let out: Vec<f32> = src.data().iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(input);
        self.push(
            Tensor::new(&shape, out).expect("shape preserved"),
            Op::Relu { input },
            needs,
        )
    }

    /// 2x2 max pooling with stride 2; odd extents are floored. Ties pick the first maximum.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "max_pool2 input {h}x{w} is too small"
            )));
        }
        let x = self.value(input).data();
        let mut out = vec![0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * r + dr) * w + 2 * col + dc;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    let o = plane * oh * ow + r * ow + col;
                    out[o] = x[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::MaxPool2 { input, argmax },
            needs,
        ))
    }

    /// Mean over the spatial extent: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims()?;
        let sp = h * w;
        let x = self.value(input).data();
        let out: Vec<f32> = x
            .chunks_exact(sp)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / sp as f64) as f32)
            .collect();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(&[n, c], out)?,
            Op::GlobalAvgPool { input },
            needs,
        ))
    }

    /// `x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, fin] = self.value(input).dims()?;
        let [fout, win] = self.value(weight).dims()?;
        if win != fin || self.value(bias).shape() != [fout] {
            return Err(Error::Shape(format!(
                "linear weight [{fout}, {win}] / bias {:?} do not fit input [{n}, {fin}]",
                self.value(bias).shape()
            )));
        }
        let mut out = vec![0f32; n * fout];
        sgemm(
            n,
            fin,
            fout,
            1.0,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            0.0,
            &mut out,
        );
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(fout) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(&[n, fout], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Back-propagates the given output gradients and returns the gradients
    /// of every parameter leaf reached.
    pub fn backward(&self, seeds: &[(Var, &[f32])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::Shape(format!(
                    "seed gradient has {} values for a tensor of shape {:?}",
                    g.len(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads, v, g.to_vec());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out[idx] = Some(Tensor::new(node.value.shape(), dy)?);
                }
                Op::Conv2d { input, weight } => {
                    self.conv2d_backward(*input, *weight, &dy, &mut grads);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    batch_stats,
                } => {
                    self.batch_norm_backward(
                        *input,
                        *gamma,
                        *beta,
                        x_hat,
                        inv_std,
                        *batch_stats,
                        &dy,
                        &mut grads,
                    );
                }
                Op::Relu { input } => {
                    if self.needs(*input) {
                        let g: Vec<f32> = dy
                            .iter()
                            .zip(node.value.data())
                            .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    if self.needs(*input) {
                        let mut g = vec![0f32; self.value(*input).len()];
                        for (&src, &d) in argmax.iter().zip(&dy) {
                            g[src as usize] += d;
                        }
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::GlobalAvgPool { input } => {
                    if self.needs(*input) {
                        let [_, _, h, w] = self.value(*input).dims()?;
                        let sp = h * w;
                        let scale = 1.0 / sp as f32;
                        let mut g = vec![0f32; self.value(*input).len()];
                        for (plane, &d) in g.chunks_exact_mut(sp).zip(&dy) {
                            plane.fill(d * scale);
                        }
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let [n, fin] = self.value(*input).dims()?;
                    let fout = self.value(*bias).len();
                    if self.needs(*input) {
                        let mut g = vec![0f32; n * fin];
                        sgemm(
                            n,
                            fout,
                            fin,
                            1.0,
                            &dy,
                            false,
                            self.value(*weight).data(),
                            false,
                            0.0,
                            &mut g,
                        );
                        accumulate(&mut grads, *input, g);
                    }
                    if self.needs(*weight) {
                        let mut g = vec![0f32; fout * fin];
                        sgemm(
                            fout,
                            n,
                            fin,
                            1.0,
                            &dy,
                            true,
                            self.value(*input).data(),
                            false,
                            0.0,
                            &mut g,
                        );
                        accumulate(&mut grads, *weight, g);
                    }
                    if self.needs(*bias) {
                        let mut g = vec![0f32; fout];
                        for row in dy.chunks_exact(fout) {
                            for (acc, v) in g.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *bias, g);
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn conv2d_backward(&self, input: Var, weight: Var, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let [n, c, h, w] = self.value(input).dims().expect("checked in forward");
        let k = self.value(weight).shape()[0];
        let hw = h * w;
        let c9 = c * 9;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let want_dx = self.needs(input);
        let want_dw = self.needs(weight);
        let mut dw = if want_dw {
            vec![0f32; k * c9]
        } else {
            Vec::new()
        };
        let mut dx = if want_dx {
            vec![0f32; x.len()]
        } else {
            Vec::new()
        };
        let mut cols = vec![0f32; c9 * hw];
        for s in 0..n {
            let dy_s = &dy[s * k * hw..(s + 1) * k * hw];
            if want_dw {
                im2col(&x[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                sgemm(k, hw, c9, 1.0, dy_s, false, &cols, true, 1.0, &mut dw);
            }
            if want_dx {
                sgemm(c9, k, hw, 1.0, wt, true, dy_s, false, 0.0, &mut cols);
                col2im(&cols, c, h, w, &mut dx[s * c * hw..(s + 1) * c * hw]);
            }
        }
        if want_dw {
            accumulate(grads, weight, dw);
        }
        if want_dx {
            accumulate(grads, input, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: &[f32],
        inv_std: &[f32],
        batch_stats: bool,
        dy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let shape = self.value(input).shape();
        let (n, c, sp) = spatial_dims(shape).expect("checked in forward");
        let count = (n * sp) as f64;
        let mut sum_dy = vec![0f64; c];
        let mut sum_dy_xh = vec![0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * sp;
                for j in base..base + sp {
                    sum_dy[ch] += dy[j] as f64;
                    sum_dy_xh[ch] += dy[j] as f64 * x_hat[j] as f64;
                }
            }
        }
        if self.needs(gamma) {
            accumulate(grads, gamma, sum_dy_xh.iter().map(|&v| v as f32).collect());
        }
        if self.needs(beta) {
            accumulate(grads, beta, sum_dy.iter().map(|&v| v as f32).collect());
        }
        if self.needs(input) {
            let g = self.value(gamma).data();
            let mut dx = vec![0f32; dy.len()];
            for i in 0..n {
                for ch in 0..c {
                    let scale = g[ch] * inv_std[ch];
                    let base = (i * c + ch) * sp;
                    if batch_stats {
                        let mean_dy = (sum_dy[ch] / count) as f32;
                        let mean_dy_xh = (sum_dy_xh[ch] / count) as f32;
                        for j in base..base + sp {
                            dx[j] = scale * (dy[j] - mean_dy - x_hat[j] * mean_dy_xh);
                        }
                    } else {
                        for j in base..base + sp {
                            dx[j] = scale * dy[j];
                        }
                    }
                }
            }
            accumulate(grads, input, dx);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Unfolds one `[C, H, W]` sample into `[C * 9, H * W]` patch columns (3x3, pad 1).
fn im2col(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1).saturating_sub(kx).min(w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < 1 || sy > h || x_lo >= x_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..sy * w];
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    dst[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - 1..x_hi + kx - 1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h || x_lo >= x_hi {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[(sy - 1) * w..sy * w];
                    for xx in x_lo..x_hi {
                        dst[xx + kx - 1] += src[xx];
                    }
                }
            }
        }
    }
}
