//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::conv::{
    batch_to_channel_major, channel_major_to_batch, col2im, gemm, im2col, ConvGeometry, MatRef,
    Planes,
};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch norm, per channel.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        col: Vec<f64>,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        in_mat: Vec<f64>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Square(Var),
    Mean(Var),
    Sum(Var),
    RowNorms(Var),
    WeightedSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input; `requires_grad` decides whether its gradient is kept.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Record a leaf carrying the tensor's own `requires_grad` flag.
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad;
        self.leaf(value, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copy of the node value with its gradient channel filled in.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("gradient has node shape");
        }
        t
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        let s = self.value(v).shape();
        ensure!(
            s.len() == 4,
            Dimension,
            "{what} expects a 4D tensor, got {:?}",
            s
        );
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[O,C,k,k]` weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "conv2d input")?;
        let [o, wc, kh, kw] = self.dims4(weight, "conv2d weight")?;
        ensure!(
            wc == c,
            Dimension,
            "conv2d input has {c} channels but weight expects {wc}"
        );
        ensure!(
            kh == geom.kernel && kw == geom.kernel,
            Dimension,
            "weight kernel {kh}x{kw} differs from geometry kernel {}",
            geom.kernel
        );
        if let Some(b) = bias {
            ensure!(
                self.value(b).len() == o,
                Dimension,
                "conv2d bias length mismatch"
            );
        }
        let (oh, ow) = (geom.conv_out(h)?, geom.conv_out(w)?);
        let planes = Planes { n, c, h, w };
        let col = im2col(self.value(input).data(), planes, geom, oh, ow);
        let kk = c * geom.kernel * geom.kernel;
        let np = n * oh * ow;
        let mut out_cm = vec![0.0; o * np];
        gemm(
            MatRef::new(self.value(weight).data(), o, kk),
            MatRef::new(&col, kk, np),
            0.0,
            &mut out_cm,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (oc, row) in out_cm.chunks_mut(np).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[oc]);
            }
        }
        let out = channel_major_to_batch(&out_cm, n, o, oh * ow);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                col,
            },
            rg,
        ))
    }

    /// Transposed convolution of `[N,Cin,H,W]` with `[Cin,Cout,k,k]` weight;
    /// the adjoint of [`Tape::conv2d`] with the same weight.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "conv_transpose2d input")?;
        let [wc, o, kh, kw] = self.dims4(weight, "conv_transpose2d weight")?;
        ensure!(
            wc == c,
            Dimension,
            "conv_transpose2d input has {c} channels but weight expects {wc}"
        );
        ensure!(
            kh == geom.kernel && kw == geom.kernel,
            Dimension,
            "weight kernel {kh}x{kw} differs from geometry kernel {}",
            geom.kernel
        );
        if let Some(b) = bias {
            ensure!(
                self.value(b).len() == o,
                Dimension,
                "conv_transpose2d bias length mismatch"
            );
        }
        let (oh, ow) = (geom.transpose_out(h)?, geom.transpose_out(w)?);
        let kk = o * geom.kernel * geom.kernel;
        let np = n * h * w;
        let in_mat = batch_to_channel_major(self.value(input).data(), n, c, h * w);
        let mut col = vec![0.0; kk * np];
        gemm(
            MatRef::new(self.value(weight).data(), c, kk).t(),
            MatRef::new(&in_mat, c, np),
            0.0,
            &mut col,
        );
        let mut out = col2im(
            &col,
            Planes {
                n,
                c: o,
                h: oh,
                w: ow,
            },
            geom,
            h,
            w,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, plane) in out.chunks_mut(oh * ow).enumerate() {
                let bc = bv[i % o];
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_mat,
            },
            rg,
        ))
    }

    fn channel_view(&self, input: Var) -> Result<(usize, usize, usize)> {
        let s = self.value(input).shape();
        ensure!(
            s.len() >= 2,
            Dimension,
            "batch norm expects [N, C, ...], got {:?}",
            s
        );
        let plane: usize = s[2..].iter().product();
        Ok((s[0], s[1], plane))
    }

    /// Batch norm using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, plane) = self.channel_view(input)?;
        ensure!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            Dimension,
            "batch norm affine parameters must have {c} entries"
        );
        let count = n * plane;
        ensure!(
            count >= 2,
            Dimension,
            "training-mode batch norm needs at least 2 values per channel, got {count}"
        );
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for i in 0..n {
            for ch in 0..c {
                let s = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for j in r {
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.value(input).shape(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, plane) = self.channel_view(input)?;
        ensure!(
            self.value(gamma).len() == c
                && self.value(beta).len() == c
                && mean.len() == c
                && var.len() == c,
            Dimension,
            "batch norm parameters must have {c} entries"
        );
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.value(input).shape(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let value = self
            .value(input)
            .map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(input);
        self.push(value, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f64::tanh);
        let rg = self.rg(input);
        self.push(value, Op::Tanh(input), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            Dimension,
            "{what}: shapes {:?} and {:?} differ",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        ensure!(
            !self.value(a).is_empty(),
            Dimension,
            "mean of an empty tensor"
        );
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// `sum(weights * a)`, a fixed linear functional of `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        ensure!(
            weights.len() == self.value(a).len(),
            Dimension,
            "weighted_sum: {} weights for {} values",
            weights.len(),
            self.value(a).len()
        );
        let value = Tensor::scalar(
            self.value(a)
                .data()
                .iter()
                .zip(&weights)
                .map(|(x, w)| x * w)
                .sum(),
        );
        let rg = self.rg(a);
        Ok(self.push(value, Op::WeightedSum(a, weights), rg))
    }

    /// Euclidean norm of each item along the leading axis; output `[N]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        ensure!(
            t.ndim() >= 1 && t.shape()[0] > 0,
            Dimension,
            "row_norms of an empty batch"
        );
        let n = t.shape()[0];
        let inner = t.len() / n;
        let norms = t
            .data()
            .chunks(inner.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(&[n], norms)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowNorms(a), rg))
    }

    /// Reverse sweep from the scalar `root`; gradients land on every node that
    /// requires one and are readable through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(
            self.value(root).len() == 1,
            Dimension,
            "backward needs a scalar root, got shape {:?}",
            self.value(root).shape()
        );
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                for (target, contrib) in self.local_grads(i, &g)? {
                    match &mut self.grads[target.0] {
                        Some(acc) => add_into(acc, &contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&mut self.grads) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                col,
            } => {
                let [n, c, h, w] = self.dims4(*input, "conv2d input")?;
                let s = node.value.shape();
                let (o, oh, ow) = (s[1], s[2], s[3]);
                let kk = c * geom.kernel * geom.kernel;
                let np = n * oh * ow;
                let g_cm = batch_to_channel_major(g, n, o, oh * ow);
                if self.rg(*weight) {
                    let mut dw = vec![0.0; o * kk];
                    gemm(
                        MatRef::new(&g_cm, o, np),
                        MatRef::new(col, kk, np).t(),
                        0.0,
                        &mut dw,
                    );
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    out.push((b, g_cm.chunks(np).map(|r| r.iter().sum()).collect()));
                }
                if self.rg(*input) {
                    let mut dcol = vec![0.0; kk * np];
                    gemm(
                        MatRef::new(self.value(*weight).data(), o, kk).t(),
                        MatRef::new(&g_cm, o, np),
                        0.0,
                        &mut dcol,
                    );
                    out.push((*input, col2im(&dcol, Planes { n, c, h, w }, *geom, oh, ow)));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_mat,
            } => {
                let [n, c, h, w] = self.dims4(*input, "conv_transpose2d input")?;
                let s = node.value.shape();
                let (o, oh, ow) = (s[1], s[2], s[3]);
                let kk = o * geom.kernel * geom.kernel;
                let np = n * h * w;
                let dcol = im2col(
                    g,
                    Planes {
                        n,
                        c: o,
                        h: oh,
                        w: ow,
                    },
                    *geom,
                    h,
                    w,
                );
                if self.rg(*weight) {
                    let mut dw = vec![0.0; c * kk];
                    gemm(
                        MatRef::new(in_mat, c, np),
                        MatRef::new(&dcol, kk, np).t(),
                        0.0,
                        &mut dw,
                    );
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let mut db = vec![0.0; o];
                    for (idx, plane) in g.chunks(oh * ow).enumerate() {
                        db[idx % o] += plane.iter().sum::<f64>();
                    }
                    out.push((b, db));
                }
                if self.rg(*input) {
                    let mut din = vec![0.0; c * np];
                    gemm(
                        MatRef::new(self.value(*weight).data(), c, kk),
                        MatRef::new(&dcol, kk, np),
                        0.0,
                        &mut din,
                    );
                    out.push((*input, channel_major_to_batch(&din, n, c, h * w)));
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, plane) = self.channel_view(*input)?;
                let count = (n * plane) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*input) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch] / count;
                            for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                                dx[j] = k * (count * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.rg(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, plane) = self.channel_view(*input)?;
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                            dx[j] = g[j] * gm[ch] * inv_std[ch];
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*input) {
                    out.push((*input, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.rg(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                out.push((
                    *input,
                    x.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v >= 0.0 { d } else { slope * d })
                        .collect(),
                ));
            }
            Op::Tanh(input) => {
                let y = node.value.data();
                out.push((
                    *input,
                    y.iter().zip(g).map(|(t, d)| d * (1.0 - t * t)).collect(),
                ));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().map(|d| -d).collect()));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::Scale(a, c) => out.push((*a, g.iter().map(|d| d * c).collect())),
            Op::Square(a) => {
                let x = self.value(*a).data();
                out.push((*a, x.iter().zip(g).map(|(v, d)| 2.0 * v * d).collect()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::WeightedSum(a, weights) => {
                out.push((*a, weights.iter().map(|w| w * g[0]).collect()));
            }
            Op::RowNorms(a) => {
                let x = self.value(*a).data();
                let norms = node.value.data();
                let inner = x.len() / norms.len();
                let mut dx = vec![0.0; x.len()];
                for (r, (&nrm, &d)) in norms.iter().zip(g).enumerate() {
                    // subgradient 0 at the origin
                    if nrm > 0.0 {
                        for j in r * inner..(r + 1) * inner {
                            dx[j] = d * x[j] / nrm;
                        }
                    }
                }
                out.push((*a, dx));
            }
        }
        Ok(out)
    }

    /// Error naming the first node whose value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(Error::NonFinite(format!(
                    "tape node {i} ({:?})",
                    op_name(&n.op)
                )));
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::BatchNormTrain { .. } => "batch_norm",
        Op::BatchNormEval { .. } => "batch_norm_eval",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Tanh(_) => "tanh",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::AddScalar(_) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::Square(_) => "square",
        Op::Mean(_) => "mean",
        Op::Sum(_) => "sum",
        Op::RowNorms(_) => "row_norms",
        Op::WeightedSum(..) => "weighted_sum",
    }
}
