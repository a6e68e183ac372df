use rand::Rng;

use super::autograd::{Tape, Var};
use super::tensor::Tensor;
use crate::rng::rng_from;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Index of the worst element.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error with a floor on the scale so that near-zero gradients are
/// compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Reduce a possibly non-scalar output to a scalar with fixed random weights.
fn reduce(tape: &mut Tape, y: Var, seed: u64) -> Var {
    if tape.value(y).len() == 1 {
        return y;
    }
    let mut rng = rng_from(seed);
    let w = (0..tape.value(y).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    tape.weighted_sum(y, w).expect("weights sized to output")
}

/// Compare reverse-mode gradients of `op` at `input` against central finite
/// differences. Non-scalar outputs are reduced by a seeded weighted sum.
pub fn gradient_check<F>(op: F, input: &Tensor, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Var,
{
    const REDUCE_SEED: u64 = 0x5eed;
    let eval = |x: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let y = op(&mut tape, v);
        let s = reduce(&mut tape, y, REDUCE_SEED);
        tape.value(s).item()
    };

    let mut tape = Tape::new();
    let v = tape.leaf(input.clone(), true);
    let y = op(&mut tape, v);
    let s = reduce(&mut tape, y, REDUCE_SEED);
    tape.backward(s).expect("scalar root");
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let mut numeric = vec![0.0; input.len()];
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * FD_STEP);
    }

    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheckReport {
        passed: max_rel_error < tolerance,
        max_rel_error,
        worst,
        analytic,
        numeric,
    }
}
