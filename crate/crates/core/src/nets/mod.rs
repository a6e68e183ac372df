//! Generator and discriminator networks.

mod blocks;
mod discriminator;
mod generator;

pub use blocks::{Activation, ConvBlock, Mode, ResidualBlock, Trace};
pub use discriminator::{receptive_field, Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};

use crate::error::Result;
use crate::ndtensor::{BatchStats, Tape, Tensor, Var};

/// A feed-forward stack of [`ConvBlock`]s.
pub trait Network {
    /// Every conv block with its name, in forward order.
    fn blocks(&self) -> Vec<(String, &ConvBlock)>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut ConvBlock)>;
    /// Record a forward pass of `input` on `tape`.
    fn record(&self, tape: &mut Tape, input: Var, mode: Mode) -> Result<(Var, Trace)>;

    fn params(&self) -> Vec<&Tensor> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks_mut()
            .into_iter()
            .flat_map(|(_, b)| b.params_mut())
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        self.blocks()
            .into_iter()
            .flat_map(|(n, b)| b.param_names(&n))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters and running statistics, named, in forward order.
    fn state(&self) -> Vec<(String, &Tensor)> {
        self.blocks()
            .into_iter()
            .flat_map(|(n, b)| b.state(&n).into_iter().collect::<Vec<_>>())
            .collect()
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.blocks_mut()
            .into_iter()
            .flat_map(|(n, b)| b.state_mut(&n))
            .collect()
    }

    /// Fold batch statistics from a training-mode [`Trace`] into the running
    /// estimates.
    fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let mut norms: Vec<_> = self
            .blocks_mut()
            .into_iter()
            .filter_map(|(_, b)| b.norm_mut())
            .collect();
        debug_assert_eq!(norms.len(), stats.len());
        for (bn, s) in norms.iter_mut().zip(stats) {
            bn.update_running(s);
        }
    }

    /// Tape-free forward pass. Training mode also updates running statistics.
    fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let mode = if training {
            Mode::FROZEN
        } else {
            Mode::INFERENCE
        };
        let (y, trace) = self.record(&mut tape, x, mode)?;
        if training {
            self.update_running_stats(&trace.bn_stats);
        }
        Ok(tape.value(y).clone())
    }

    /// Inference-mode forward pass through a shared reference.
    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let (y, _) = self.record(&mut tape, x, Mode::INFERENCE)?;
        Ok(tape.value(y).clone())
    }

    fn all_finite(&self) -> bool {
        self.state().iter().all(|(_, t)| t.all_finite())
    }
}
