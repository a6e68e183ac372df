//! Least-squares adversarial losses and the cycle reconstruction loss, as
//! plain functions and as tape recordings.

use crate::error::{ensure, Result};
use crate::ndtensor::{Tape, Tensor, Var};

fn mean_sq_offset(t: &Tensor, target: f64) -> f64 {
    t.data().iter().map(|v| (v - target).powi(2)).sum::<f64>() / t.len() as f64
}

/// `1/2 mean((real - 1)^2) + 1/2 mean(fake^2)`.
pub fn lsgan_discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<f64> {
    ensure!(
        !real_scores.is_empty() && !fake_scores.is_empty(),
        Dimension,
        "discriminator loss needs non-empty score tensors"
    );
    Ok(0.5 * mean_sq_offset(real_scores, 1.0) + 0.5 * mean_sq_offset(fake_scores, 0.0))
}

/// `1/2 mean((fake - 1)^2)`.
pub fn lsgan_generator_loss(fake_scores: &Tensor) -> Result<f64> {
    ensure!(
        !fake_scores.is_empty(),
        Dimension,
        "generator loss needs a non-empty score tensor"
    );
    Ok(0.5 * mean_sq_offset(fake_scores, 1.0))
}

fn mean_row_norm(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(
        a.shape() == b.shape(),
        Dimension,
        "reconstruction shape {:?} does not match original {:?}",
        b.shape(),
        a.shape()
    );
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.shape()[0];
    let inner = a.len() / n;
    let total: f64 = a
        .data()
        .chunks(inner)
        .zip(b.data().chunks(inner))
        .map(|(x, r)| {
            x.iter()
                .zip(r)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean per-example L2 norm `|F(G(x)) - x|` over the x batch plus the
/// mirror term over the y batch.
pub fn cycle_loss(x: &Tensor, x_recon: &Tensor, y: &Tensor, y_recon: &Tensor) -> Result<f64> {
    Ok(mean_row_norm(x, x_recon)? + mean_row_norm(y, y_recon)?)
}

pub fn full_generator_objective(adv: f64, cyc: f64, lambda_cycle: f64) -> Result<f64> {
    ensure!(
        lambda_cycle > 0.0,
        Config,
        "lambda_cycle must be positive, got {lambda_cycle}"
    );
    Ok(adv + lambda_cycle * cyc)
}

/// `1/2 mean((s - target)^2)` on the tape.
fn record_half_msq(tape: &mut Tape, scores: Var, target: f64) -> Result<Var> {
    let d = tape.add_scalar(scores, -target);
    let sq = tape.square(d);
    let m = tape.mean(sq)?;
    Ok(tape.scale(m, 0.5))
}

pub fn record_discriminator_loss(
    tape: &mut Tape,
    real_scores: Var,
    fake_scores: Var,
) -> Result<Var> {
    let r = record_half_msq(tape, real_scores, 1.0)?;
    let f = record_half_msq(tape, fake_scores, 0.0)?;
    tape.add(r, f)
}

pub fn record_generator_loss(tape: &mut Tape, fake_scores: Var) -> Result<Var> {
    record_half_msq(tape, fake_scores, 1.0)
}

/// Mean per-example norm of `recon - original`.
pub fn record_cycle_term(tape: &mut Tape, original: Var, recon: Var) -> Result<Var> {
    let d = tape.sub(recon, original)?;
    let norms = tape.row_norms(d)?;
    tape.mean(norms)
}
