//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves created with
//! `requires_grad = false` (inputs, frozen networks, detached values) never
//! receive gradients, and operations whose inputs are all such leaves are not
//! differentiated through.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PlaneStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: PlaneStats,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    GlobalAvgPool(Var),
    GlobalMaxPool(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Concat(Var, Var),
    MaxPool2(Var, Vec<usize>),
    MseTo(Var, f64),
    MeanAbsDiff(Var, Var),
    BceWithLogits(Var, Tensor),
    Scale(Var, f64),
    Mean(Var),
    DotConst(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    t.dims4().expect("rank-4 tensor")
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution with zero padding. `w: (Co, Ci, k, k)`, `b: (Co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d: input has {ci} channels, weight is {:?}",
                self.value(w).shape()
            )));
        }
        let out_h = kernels::conv_out_len(h, k, stride, pad);
        let out_w = kernels::conv_out_len(wd, k, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape(format!(
                "conv2d: {h}x{wd} input too small for kernel {k} with padding {pad}"
            )));
        };
        let geom = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), batch, &geom, self.value(w).data(), co, bias);
        let value = Tensor::new(&[batch, co, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution. `w: (Ci, Co, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (batch, ci, h, wd) = self.value(x).dims4()?;
        let (wci, co, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {ci} channels, weight is {:?}",
                self.value(w).shape()
            )));
        }
        if output_pad >= stride.max(1) {
            return Err(Error::InvalidArgument(
                "output padding must be smaller than the stride".into(),
            ));
        }
        let out_h = kernels::conv_transpose_out_len(h, k, stride, pad, output_pad);
        let out_w = kernels::conv_transpose_out_len(wd, k, stride, pad, output_pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape("conv_transpose2d: empty output".into()));
        };
        let geom = ConvGeom {
            channels: co,
            height: out_h,
            width: out_w,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            batch,
            ci,
            &geom,
            self.value(w).data(),
            bias,
        );
        let value = Tensor::new(&[batch, co, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Per-sample, per-channel normalization followed by a channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!(
                "instance_norm: {c} channels but affine params of length {}",
                self.value(gamma).len()
            )));
        }
        let (out, stats) = kernels::instance_norm_forward(
            self.value(x).data(),
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64 + Sync + Send, op: Op) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), kernels::map(src.data(), f)).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, move |v| v * s, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "add")?;
        let data = kernels::zip_map(self.value(a).data(), self.value(b).data(), |u, v| u + v);
        let value = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product where `b` broadcasts over unit axes of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let strides = broadcast_strides(self.value(a).shape(), self.value(b).shape())?;
        let (av, bv) = (self.value(a), self.value(b));
        let shape = av.shape().to_vec();
        let mut out = vec![0.0; av.len()];
        for_each_index(&shape, &strides, |i, j| out[i] = av.data()[i] * bv.data()[j]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `(B, C, H, W) -> (B, C, 1, 1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[b, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `(B, C, H, W) -> (B, C, 1, 1)` spatial max.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let (data, arg): (Vec<f64>, Vec<usize>) = self
            .value(x)
            .data()
            .chunks(plane)
            .enumerate()
            .map(|(p, vals)| {
                let (i, v) = argmax(vals.iter().copied());
                (v, p * plane + i)
            })
            .unzip();
        let value = Tensor::new(&[b, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalMaxPool(x, arg), &[x]))
    }

    /// `(B, C, H, W) -> (B, 1, H, W)` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * plane];
        for n in 0..b {
            for ch in 0..c {
                let src = &xs[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                for (o, v) in out[n * plane..(n + 1) * plane].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let value = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(value, Op::ChannelMean(x), &[x]))
    }

    /// `(B, C, H, W) -> (B, 1, H, W)` max over channels.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * plane];
        let mut arg = vec![0usize; b * plane];
        for n in 0..b {
            for p in 0..plane {
                let (i, v) = argmax((0..c).map(|ch| xs[(n * c + ch) * plane + p]));
                out[n * plane + p] = v;
                arg[n * plane + p] = (n * c + i) * plane + p;
            }
        }
        let value = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(value, Op::ChannelMax(x, arg), &[x]))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// 2x2 max pooling, stride 2. Spatial sizes must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2: odd spatial size {h}x{w}")));
        }
        let (out, arg) = kernels::max_pool2_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2(x, arg), &[x]))
    }

    /// `mean((x - target)^2)` as a scalar.
    pub fn mse_to(&mut self, x: Var, target: f64) -> Var {
        let xs = self.value(x);
        let v = xs.data().iter().map(|v| (v - target) * (v - target)).sum::<f64>() / xs.len() as f64;
        self.push(Tensor::scalar(v), Op::MseTo(x, target), &[x])
    }

    /// `mean(|a - b|)` as a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "mean_abs_diff")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let v = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of logistic(`logits`) against `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        self.value(logits).ensure_same_shape(target, "bce_with_logits")?;
        let z = self.value(logits).data();
        let v = z
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        Ok(self.push(
            Tensor::scalar(v),
            Op::BceWithLogits(logits, target.clone()),
            &[logits],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        self.push(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        self.value(x).ensure_same_shape(weights, "dot_const")?;
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst(x, weights.clone()), &[x]))
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let batch = val(*x).shape()[0];
                let co = val(*w).shape()[0];
                let g = kernels::conv2d_backward(
                    val(*x).data(),
                    batch,
                    geom,
                    val(*w).data(),
                    co,
                    dy,
                    (rg(*x), rg(*w), b.is_some_and(rg)),
                );
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = g.dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (batch, ci, _, _) = dims4(val(*x));
                let g = kernels::conv_transpose2d_backward(
                    val(*x).data(),
                    batch,
                    ci,
                    geom,
                    val(*w).data(),
                    dy,
                    (rg(*x), rg(*w), b.is_some_and(rg)),
                );
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = g.dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (_, c, h, w) = dims4(val(*x));
                let g = kernels::instance_norm_backward(
                    val(*x).data(),
                    c,
                    h * w,
                    val(*gamma).data(),
                    stats,
                    dy,
                    rg(*x),
                );
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if rg(*gamma) {
                    accumulate(&mut grads[gamma.0], g.dgamma);
                }
                if rg(*beta) {
                    accumulate(&mut grads[beta.0], g.dbeta);
                }
            }
            Op::Relu(x) => {
                let g = kernels::zip_map(val(*x).data(), dy, |v, d| if v > 0.0 { d } else { 0.0 });
                accumulate(&mut grads[x.0], g);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let g = kernels::zip_map(val(*x).data(), dy, move |v, d| if v > 0.0 { d } else { s * d });
                accumulate(&mut grads[x.0], g);
            }
            Op::Tanh(x) => {
                let g = kernels::zip_map(node.value.data(), dy, |y, d| d * (1.0 - y * y));
                accumulate(&mut grads[x.0], g);
            }
            Op::Sigmoid(x) => {
                let g = kernels::zip_map(node.value.data(), dy, |y, d| d * y * (1.0 - y));
                accumulate(&mut grads[x.0], g);
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(&mut grads[x.0], kernels::map(dy, move |d| d * s));
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], dy.to_vec());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], dy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let shape = val(*a).shape();
                let strides = broadcast_strides(shape, val(*b).shape()).expect("checked in forward");
                let (av, bv) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let mut da = vec![0.0; av.len()];
                    for_each_index(shape, &strides, |i, j| da[i] = dy[i] * bv[j]);
                    accumulate(&mut grads[a.0], da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for_each_index(shape, &strides, |i, j| db[j] += dy[i] * av[i]);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(val(*x));
                let plane = h * w;
                let mut g = vec![0.0; val(*x).len()];
                for (p, chunk) in g.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = dy[p] / plane as f64);
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::GlobalMaxPool(x, arg) | Op::ChannelMax(x, arg) | Op::MaxPool2(x, arg) => {
                let mut g = vec![0.0; val(*x).len()];
                for (o, &i) in arg.iter().enumerate() {
                    g[i] += dy[o];
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::ChannelMean(x) => {
                let (b, c, h, w) = dims4(val(*x));
                let plane = h * w;
                let mut g = vec![0.0; val(*x).len()];
                for n in 0..b {
                    for ch in 0..c {
                        let dst = &mut g[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                        for (d, s) in dst.iter_mut().zip(&dy[n * plane..(n + 1) * plane]) {
                            *d = s / c as f64;
                        }
                    }
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = dims4(val(*a));
                let cb = val(*b).shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                if rg(*a) {
                    let g = (0..n)
                        .flat_map(|i| dy[i * (la + lb)..i * (la + lb) + la].iter().copied())
                        .collect();
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    let g = (0..n)
                        .flat_map(|i| dy[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied())
                        .collect();
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::MseTo(x, t) => {
                let n = val(*x).len() as f64;
                let (d, t) = (dy[0], *t);
                let g = kernels::map(val(*x).data(), move |v| d * 2.0 * (v - t) / n);
                accumulate(&mut grads[x.0], g);
            }
            Op::MeanAbsDiff(a, b) => {
                let n = val(*a).len() as f64;
                let d = dy[0];
                let sign = kernels::zip_map(val(*a).data(), val(*b).data(), move |u, v| {
                    let s = if u > v {
                        1.0
                    } else if u < v {
                        -1.0
                    } else {
                        0.0
                    };
                    d * s / n
                });
                if rg(*b) {
                    accumulate(&mut grads[b.0], sign.iter().map(|v| -v).collect());
                }
                if rg(*a) {
                    accumulate(&mut grads[a.0], sign);
                }
            }
            Op::BceWithLogits(z, target) => {
                let n = val(*z).len() as f64;
                let d = dy[0];
                let g = kernels::zip_map(val(*z).data(), target.data(), move |z, y| {
                    d * (sigmoid(z) - y) / n
                });
                accumulate(&mut grads[z.0], g);
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                accumulate(&mut grads[x.0], vec![dy[0] / n; val(*x).len()]);
            }
            Op::DotConst(x, w) => {
                let d = dy[0];
                accumulate(&mut grads[x.0], w.data().iter().map(|v| v * d).collect());
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// First maximal element (index, value).
fn argmax(it: impl Iterator<Item = f64>) -> (usize, f64) {
    it.enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        },
    )
}

/// Strides into `b` for every axis of `a`, zero on broadcast axes.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot broadcast {b:?} onto {a:?}")));
    }
    let mut strides = vec![0; a.len()];
    let mut acc = 1;
    for axis in (0..a.len()).rev() {
        if b[axis] == a[axis] {
            strides[axis] = if b[axis] == 1 { 0 } else { acc };
        } else if b[axis] != 1 {
            return Err(Error::Shape(format!("cannot broadcast {b:?} onto {a:?}")));
        }
        acc *= b[axis];
    }
    Ok(strides)
}

/// Visit every flat index `i` of `shape` together with the broadcast index `j`.
fn for_each_index(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    let mut coord = vec![0usize; shape.len()];
    let mut j = 0usize;
    for i in 0..total {
        f(i, j);
        for axis in (0..shape.len()).rev() {
            coord[axis] += 1;
            j += strides[axis];
            if coord[axis] < shape[axis] {
                break;
            }
            j -= strides[axis] * shape[axis];
            coord[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_channel_and_spatial() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let c = t.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 10.0]).unwrap());
        let s = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ac = t.mul(a, c).unwrap();
        assert_eq!(t.value(ac).data(), &[0.0, 1.0, 2.0, 3.0, 40.0, 50.0, 60.0, 70.0]);
        let asp = t.mul(a, s).unwrap();
        assert_eq!(t.value(asp).data(), &[0.0, 2.0, 6.0, 12.0, 4.0, 10.0, 18.0, 28.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = t.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 1, 2, 2], 2.0), true);
        let k = t.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let y = t.mul(x, k).unwrap();
        let l = t.mean(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[0.75; 4]);
        assert_eq!(g.get(k).data(), &[0.0; 4]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::new(&[2], vec![800.0, -800.0]).unwrap(), true);
        let y = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let l = t.bce_with_logits(z, &y).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
    }
}
