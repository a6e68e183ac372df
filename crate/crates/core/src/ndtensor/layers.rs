//! Layer parameter containers and tape-free forward helpers.

use serde::{Deserialize, Serialize};

use super::autograd::{BatchStats, Tape, Var};
use super::conv::ConvGeometry;
use super::tensor::Tensor;
use crate::error::{ensure, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Conv,
    ConvTranspose,
}

/// Convolution weights. `Conv` weights are `[out, in, k, k]`; `ConvTranspose`
/// weights are `[in, out, k, k]`, matching the conv whose adjoint they are.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        match self.kind {
            ConvKind::Conv => self.weight.shape()[1],
            ConvKind::ConvTranspose => self.weight.shape()[0],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            ConvKind::Conv => self.weight.shape()[0],
            ConvKind::ConvTranspose => self.weight.shape()[1],
        }
    }

    pub fn zero(kind: ConvKind, in_ch: usize, out_ch: usize, geom: ConvGeometry) -> Self {
        let k = geom.kernel;
        let shape = match kind {
            ConvKind::Conv => [out_ch, in_ch, k, k],
            ConvKind::ConvTranspose => [in_ch, out_ch, k, k],
        };
        Self {
            kind,
            weight: Tensor::zeros(&shape),
            bias: Tensor::zeros(&[out_ch]),
            geom,
        }
    }

    /// Record this layer on `tape` with weights as leaves.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        train_params: bool,
    ) -> Result<(Var, [Var; 2])> {
        let w = tape.leaf(self.weight.clone(), train_params);
        let b = tape.leaf(self.bias.clone(), train_params);
        let out = match self.kind {
            ConvKind::Conv => tape.conv2d(input, w, Some(b), self.geom)?,
            ConvKind::ConvTranspose => tape.conv_transpose2d(input, w, Some(b), self.geom)?,
        };
        Ok((out, [w, b]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    /// Fold batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let rm = self.running_mean.data_mut();
        for (r, m) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = self.running_var.data_mut();
        for (r, v) in rv.iter_mut().zip(&stats.var) {
            *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias).max(f64::MIN_POSITIVE);
        }
    }

    /// Record on `tape`. In training mode the batch statistics are returned
    /// so the caller can decide whether to fold them into the running stats.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        training: bool,
        train_params: bool,
    ) -> Result<(Var, [Var; 2], Option<BatchStats>)> {
        let g = tape.leaf(self.gamma.clone(), train_params);
        let b = tape.leaf(self.beta.clone(), train_params);
        if training {
            let (out, stats) = tape.batch_norm_train(input, g, b, BN_EPS)?;
            Ok((out, [g, b], Some(stats)))
        } else {
            let out = tape.batch_norm_eval(
                input,
                g,
                b,
                self.running_mean.data(),
                self.running_var.data(),
                BN_EPS,
            )?;
            Ok((out, [g, b], None))
        }
    }
}

fn eval_unary(input: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    ensure!(
        layer.kind == ConvKind::Conv,
        Config,
        "conv2d needs a Conv layer"
    );
    eval_unary(input, |t, x| layer.record(t, x, false).map(|r| r.0))
}

pub fn conv_transpose2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    ensure!(
        layer.kind == ConvKind::ConvTranspose,
        Config,
        "conv_transpose2d needs a ConvTranspose layer"
    );
    eval_unary(input, |t, x| layer.record(t, x, false).map(|r| r.0))
}

/// Batch norm over `[N, C, ...]`; training mode updates the running stats.
pub fn batch_norm(input: &Tensor, layer: &mut BatchNormLayer, training: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let (y, _, stats) = layer.record(&mut tape, x, training, false)?;
    if let Some(s) = stats {
        layer.update_running(&s);
    }
    Ok(tape.value(y).clone())
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn tanh_activation(input: &Tensor) -> Tensor {
    input.map(f64::tanh)
}
