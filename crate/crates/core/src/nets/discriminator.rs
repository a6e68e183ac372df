use serde::{Deserialize, Serialize};

use super::blocks::{Activation, ConvBlock, Mode, Trace};
use super::Network;
use crate::error::{ensure, Result};
use crate::ndtensor::{ConvKind, Tape, Var, LEAKY_SLOPE};
use crate::rng::{derive_indexed, rng_from};

/// Fully convolutional patch discriminator. The last layer has no batch norm
/// and no activation, so it emits raw patch scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            filters: vec![32, 64, 128, 128, 128, 1],
            strides: vec![2, 2, 2, 1, 1, 1],
            kernel_sizes: vec![4; 6],
            slope: LEAKY_SLOPE,
        }
    }
}

impl DiscriminatorConfig {
    /// Default layout with every hidden width divided by `div`.
    pub fn narrow(div: usize) -> Self {
        let mut c = Self::default();
        let n = c.filters.len();
        for f in &mut c.filters[..n - 1] {
            *f = (*f / div).max(1);
        }
        c
    }

    pub fn n_layers(&self) -> usize {
        self.filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filters.len();
        ensure!(n >= 1, Config, "discriminator needs at least one layer");
        ensure!(
            self.strides.len() == n && self.kernel_sizes.len() == n,
            Config,
            "filters, strides and kernel_sizes must have equal length"
        );
        ensure!(
            self.filters[n - 1] == 1,
            Config,
            "last discriminator layer must have one filter"
        );
        ensure!(
            self.strides
                .iter()
                .chain(&self.kernel_sizes)
                .all(|&v| v >= 1),
            Config,
            "strides and kernel sizes must be positive"
        );
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Input extent seen by one output unit: `r_in = (r_out - 1) * stride + k`,
/// composed from the last layer back to the first.
pub fn receptive_field(config: &DiscriminatorConfig) -> usize {
    config
        .kernel_sizes
        .iter()
        .zip(&config.strides)
        .rev()
        .fold(1, |r, (&k, &s)| (r - 1) * s + k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub layers: Vec<ConvBlock>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.n_layers();
        let mut in_ch = config.in_channels;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let last = i + 1 == n;
            let activation = if last {
                Activation::Identity
            } else {
                Activation::LeakyRelu(config.slope)
            };
            layers.push(ConvBlock::glorot(
                ConvKind::Conv,
                in_ch,
                config.filters[i],
                config.kernel_sizes[i],
                config.strides[i],
                i > 0 && !last,
                activation,
                &mut rng_from(derive_indexed(seed, "discriminator-layer", i as u64)),
            ));
            in_ch = config.filters[i];
        }
        Ok(Self { config, layers })
    }
}

impl Network for Discriminator {
    fn blocks(&self) -> Vec<(String, &ConvBlock)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("layer{i}"), b))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut ConvBlock)> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("layer{i}"), b))
            .collect()
    }

    fn record(&self, tape: &mut Tape, input: Var, mode: Mode) -> Result<(Var, Trace)> {
        let s = tape.value(input).shape().to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.config.in_channels,
            Dimension,
            "discriminator expects [N, {}, H, W], got {:?}",
            self.config.in_channels,
            s
        );
        let stride = self.config.total_stride();
        ensure!(
            s[2] >= stride && s[3] >= stride,
            Dimension,
            "discriminator input {}x{} is smaller than its total stride {stride}",
            s[2],
            s[3]
        );
        let mut trace = Trace::default();
        let mut x = input;
        for b in &self.layers {
            x = b.record(tape, x, mode, &mut trace)?;
        }
        Ok((x, trace))
    }
}
