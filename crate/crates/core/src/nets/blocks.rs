use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ndtensor::{
    glorot_uniform, BatchNormLayer, BatchStats, ConvGeometry, ConvKind, ConvLayer, Tape, Tensor,
    Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Identity,
}

/// How a forward pass is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch norm uses batch statistics (true) or running statistics.
    pub training: bool,
    /// Parameters are recorded as gradient-carrying leaves.
    pub train_params: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        training: true,
        train_params: true,
    };
    /// Batch statistics, but parameters held fixed.
    pub const FROZEN: Mode = Mode {
        training: true,
        train_params: false,
    };
    pub const INFERENCE: Mode = Mode {
        training: false,
        train_params: false,
    };
}

/// Everything a recorded forward pass produced besides its output.
#[derive(Debug, Default)]
pub struct Trace {
    /// Parameter leaves in [`super::Network::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer, in layer order (training mode).
    pub bn_stats: Vec<BatchStats>,
}

/// Convolution, optional batch norm, activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: Option<BatchNormLayer>,
    pub activation: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn glorot(
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // conv: H -> H / s; transpose: (H - 1)s - (k - s) + k = sH
        let geom = ConvGeometry::same(kernel, stride);
        let mut conv = ConvLayer::zero(kind, in_ch, out_ch, geom);
        let kk = kernel * kernel;
        conv.weight = glorot_uniform(conv.weight.shape(), in_ch * kk, out_ch * kk, rng);
        Self {
            conv,
            norm: norm.then(|| BatchNormLayer::new(out_ch)),
            activation,
        }
    }

    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        trace: &mut Trace,
    ) -> Result<Var> {
        let (mut x, [w, b]) = self.conv.record(tape, input, mode.train_params)?;
        trace.params.extend([w, b]);
        if let Some(bn) = &self.norm {
            let (y, [g, be], stats) = bn.record(tape, x, mode.training, mode.train_params)?;
            trace.params.extend([g, be]);
            trace.bn_stats.extend(stats);
            x = y;
        }
        Ok(match self.activation {
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.conv.weight, &self.conv.bias];
        if let Some(bn) = &self.norm {
            v.extend([&bn.gamma, &bn.beta]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.conv.weight, &mut self.conv.bias];
        if let Some(bn) = &mut self.norm {
            v.extend([&mut bn.gamma, &mut bn.beta]);
        }
        v
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut v = vec![format!("{prefix}.weight"), format!("{prefix}.bias")];
        if self.norm.is_some() {
            v.extend([format!("{prefix}.bn_gamma"), format!("{prefix}.bn_beta")]);
        }
        v
    }

    /// Parameters plus batch-norm running statistics, named.
    pub fn state(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self
            .param_names(prefix)
            .into_iter()
            .zip(self.params())
            .collect();
        if let Some(bn) = &self.norm {
            v.push((format!("{prefix}.bn_running_mean"), &bn.running_mean));
            v.push((format!("{prefix}.bn_running_var"), &bn.running_var));
        }
        v
    }

    pub fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            (format!("{prefix}.weight"), &mut self.conv.weight),
            (format!("{prefix}.bias"), &mut self.conv.bias),
        ];
        if let Some(bn) = &mut self.norm {
            v.push((format!("{prefix}.bn_gamma"), &mut bn.gamma));
            v.push((format!("{prefix}.bn_beta"), &mut bn.beta));
            v.push((format!("{prefix}.bn_running_mean"), &mut bn.running_mean));
            v.push((format!("{prefix}.bn_running_var"), &mut bn.running_var));
        }
        v
    }

    pub fn norm_mut(&mut self) -> Option<&mut BatchNormLayer> {
        self.norm.as_mut()
    }
}

/// Two stride-1 conv blocks whose output is added to the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl ResidualBlock {
    pub fn glorot(channels: usize, kernel: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: ConvBlock::glorot(
                ConvKind::Conv,
                channels,
                channels,
                kernel,
                1,
                true,
                Activation::LeakyRelu(slope),
                rng,
            ),
            second: ConvBlock::glorot(
                ConvKind::Conv,
                channels,
                channels,
                kernel,
                1,
                true,
                Activation::Identity,
                rng,
            ),
        }
    }

    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        trace: &mut Trace,
    ) -> Result<Var> {
        let h = self.first.record(tape, input, mode, trace)?;
        let h = self.second.record(tape, h, mode, trace)?;
        tape.add(h, input)
    }

    pub fn blocks(&self) -> [&ConvBlock; 2] {
        [&self.first, &self.second]
    }

    pub fn blocks_mut(&mut self) -> [&mut ConvBlock; 2] {
        [&mut self.first, &mut self.second]
    }
}
