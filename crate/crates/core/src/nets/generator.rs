use serde::{Deserialize, Serialize};

use super::blocks::{Activation, ConvBlock, Mode, ResidualBlock, Trace};
use super::Network;
use crate::error::{ensure, Result};
use crate::ndtensor::{ConvKind, Tape, Var, LEAKY_SLOPE};
use crate::rng::{derive_indexed, rng_from};

/// Encoder (stem conv + two strided convs), residual trunk, two transposed
/// convs, and a tanh output conv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub n_residual_blocks: usize,
    /// Strides of the three encoder convolutions.
    pub encoder_strides: [usize; 3],
    /// Kernel of the stem and output convolutions.
    pub outer_kernel: usize,
    /// Kernel of the strided encoder convolutions and residual blocks.
    pub inner_kernel: usize,
    /// Kernel of the two stride-2 transposed convolutions.
    pub upsample_kernel: usize,
    pub slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_filters: 32,
            n_residual_blocks: 6,
            encoder_strides: [1, 2, 2],
            outer_kernel: 7,
            inner_kernel: 3,
            upsample_kernel: 4,
            slope: LEAKY_SLOPE,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels > 0 && self.base_filters > 0,
            Config,
            "channel counts must be positive"
        );
        ensure!(
            self.encoder_strides.iter().product::<usize>() == 4,
            Config,
            "encoder strides {:?} must downsample by 4 to match the two stride-2 upsampling layers",
            self.encoder_strides
        );
        ensure!(
            self.outer_kernel > 0 && self.inner_kernel > 0 && self.upsample_kernel >= 2,
            Config,
            "kernel sizes must be positive (upsampling kernel at least 2)"
        );
        ensure!(
            self.slope > 0.0 && self.slope < 1.0,
            Config,
            "leaky slope must be in (0, 1)"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub encoder: Vec<ConvBlock>,
    pub trunk: Vec<ResidualBlock>,
    pub decoder: Vec<ConvBlock>,
    pub head: ConvBlock,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let lrelu = Activation::LeakyRelu(c.slope);
        let f = c.base_filters;
        let mut layer = 0u64;
        let mut next_rng = || {
            layer += 1;
            rng_from(derive_indexed(seed, "generator-layer", layer))
        };
        let widths = [f, 2 * f, 4 * f];
        let mut encoder = Vec::new();
        let mut in_ch = c.in_channels;
        for (i, (&w, &s)) in widths.iter().zip(&c.encoder_strides).enumerate() {
            let k = if i == 0 {
                c.outer_kernel
            } else {
                c.inner_kernel
            };
            encoder.push(ConvBlock::glorot(
                ConvKind::Conv,
                in_ch,
                w,
                k,
                s,
                i > 0,
                lrelu,
                &mut next_rng(),
            ));
            in_ch = w;
        }
        let trunk = (0..c.n_residual_blocks)
            .map(|_| ResidualBlock::glorot(4 * f, c.inner_kernel, c.slope, &mut next_rng()))
            .collect();
        let decoder = vec![
            ConvBlock::glorot(
                ConvKind::ConvTranspose,
                4 * f,
                2 * f,
                c.upsample_kernel,
                2,
                true,
                lrelu,
                &mut next_rng(),
            ),
            ConvBlock::glorot(
                ConvKind::ConvTranspose,
                2 * f,
                f,
                c.upsample_kernel,
                2,
                true,
                lrelu,
                &mut next_rng(),
            ),
        ];
        let head = ConvBlock::glorot(
            ConvKind::Conv,
            f,
            c.in_channels,
            c.outer_kernel,
            1,
            false,
            Activation::Tanh,
            &mut next_rng(),
        );
        Ok(Self {
            config,
            encoder,
            trunk,
            decoder,
            head,
        })
    }
}

impl Network for Generator {
    fn blocks(&self) -> Vec<(String, &ConvBlock)> {
        let mut v = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            v.push((format!("encoder{i}"), b));
        }
        for (i, r) in self.trunk.iter().enumerate() {
            let [a, b] = r.blocks();
            v.push((format!("res{i}.a"), a));
            v.push((format!("res{i}.b"), b));
        }
        for (i, b) in self.decoder.iter().enumerate() {
            v.push((format!("decoder{i}"), b));
        }
        v.push(("head".into(), &self.head));
        v
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut ConvBlock)> {
        let mut v = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            v.push((format!("encoder{i}"), b));
        }
        for (i, r) in self.trunk.iter_mut().enumerate() {
            let [a, b] = r.blocks_mut();
            v.push((format!("res{i}.a"), a));
            v.push((format!("res{i}.b"), b));
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            v.push((format!("decoder{i}"), b));
        }
        v.push(("head".into(), &mut self.head));
        v
    }

    fn record(&self, tape: &mut Tape, input: Var, mode: Mode) -> Result<(Var, Trace)> {
        let s = tape.value(input).shape().to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.config.in_channels,
            Dimension,
            "generator expects [N, {}, H, W], got {:?}",
            self.config.in_channels,
            s
        );
        ensure!(
            s[2].is_multiple_of(4) && s[3].is_multiple_of(4),
            Dimension,
            "generator input {}x{} is not divisible by 4",
            s[2],
            s[3]
        );
        let mut trace = Trace::default();
        let mut x = input;
        for b in &self.encoder {
            x = b.record(tape, x, mode, &mut trace)?;
        }
        for r in &self.trunk {
            x = r.record(tape, x, mode, &mut trace)?;
        }
        for b in &self.decoder {
            x = b.record(tape, x, mode, &mut trace)?;
        }
        x = self.head.record(tape, x, mode, &mut trace)?;
        Ok((x, trace))
    }
}
