use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{record_cycle_term, record_discriminator_loss, record_generator_loss};
use super::model::HarmonizationModel;
use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};
use crate::ndtensor::{AdamState, Tape, Tensor, Var};
use crate::nets::{Mode, Network, Trace};
use crate::rng::{derive_indexed, rng_from};

/// Losses recorded for one alternating step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub d_loss_x: f64,
    pub d_loss_y: f64,
    pub g_adv_loss: f64,
    pub f_adv_loss: f64,
    pub cycle_loss: f64,
    /// Wall-clock time of the step. Not part of equality.
    pub wall_ms: u64,
}

impl PartialEq for TrainLogEntry {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.d_loss_x.to_bits() == o.d_loss_x.to_bits()
            && self.d_loss_y.to_bits() == o.d_loss_y.to_bits()
            && self.g_adv_loss.to_bits() == o.g_adv_loss.to_bits()
            && self.f_adv_loss.to_bits() == o.f_adv_loss.to_bits()
            && self.cycle_loss.to_bits() == o.cycle_loss.to_bits()
    }
}

pub const LOG_HEADER: &str = "step,d_loss_x,d_loss_y,g_adv_loss,f_adv_loss,cycle_loss";

impl TrainLogEntry {
    /// One CSV row in [`LOG_HEADER`] order. Timing is left out so logs of
    /// identical runs are byte-identical.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.d_loss_x,
            self.d_loss_y,
            self.g_adv_loss,
            self.f_adv_loss,
            self.cycle_loss
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        ensure!(
            f.len() == 6,
            Invalid,
            "log row has {} fields, expected 6: {row:?}",
            f.len()
        );
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad log number {s:?}")))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad step {:?}", f[0])))?,
            d_loss_x: num(f[1])?,
            d_loss_y: num(f[2])?,
            g_adv_loss: num(f[3])?,
            f_adv_loss: num(f[4])?,
            cycle_loss: num(f[5])?,
            wall_ms: 0,
        })
    }
}

pub fn log_to_csv(entries: &[TrainLogEntry]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

/// Stop once the moving average of the last `window` cycle losses, evaluated
/// every `eval_every` steps, has failed to improve `patience` times in a row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingRule {
    pub eval_every: u64,
    pub window: usize,
    pub patience: usize,
    pub max_steps: u64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            eval_every: 100,
            window: 50,
            patience: 5,
            max_steps: 20_000,
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eval_every > 0 && self.window > 0,
            Config,
            "eval_every and window must be positive"
        );
        Ok(())
    }
}

fn gather_grads(tape: &Tape, traces: &[&Trace], params: &[&Tensor]) -> Vec<Vec<f64>> {
    params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut acc = vec![0.0; p.len()];
            for t in traces {
                if let Some(g) = tape.grad(t.params[k]) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            acc
        })
        .collect()
}

fn adam_update(
    net: &mut dyn Network,
    adam: &mut AdamState,
    grads: &[Vec<f64>],
    prefix: &str,
) -> Result<()> {
    let names: Vec<String> = net
        .param_names()
        .into_iter()
        .map(|n| format!("{prefix}.{n}"))
        .collect();
    let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut net.params_mut(), &g, &names)
}

fn finite(what: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "{what} is {v} at step {step}; training aborted"
        )))
    }
}

/// Output of the generator sub-step that the discriminator sub-step needs.
pub(crate) struct GeneratorOutput {
    pub fake_y: Tensor,
    pub fake_x: Tensor,
    pub g_adv: f64,
    pub f_adv: f64,
    pub cycle: f64,
}

/// Update `G` and `F` on `adv_G + adv_F + lambda * cycle` with both
/// discriminators held fixed. Each generator's parameter gradient of this sum
/// equals the gradient of its own adversarial-plus-cycle objective.
pub(crate) fn generator_substep(
    model: &mut HarmonizationModel,
    x: &Tensor,
    y: &Tensor,
) -> Result<GeneratorOutput> {
    let step = model.step + 1;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let yv = tape.leaf(y.clone(), false);
    let (fake_y, g1) = model.g.record(&mut tape, xv, Mode::TRAIN)?;
    let (rec_x, f1) = model.f.record(&mut tape, fake_y, Mode::TRAIN)?;
    let (fake_x, f2) = model.f.record(&mut tape, yv, Mode::TRAIN)?;
    let (rec_y, g2) = model.g.record(&mut tape, fake_x, Mode::TRAIN)?;
    let (sy, _) = model.d_y.record(&mut tape, fake_y, Mode::FROZEN)?;
    let (sx, _) = model.d_x.record(&mut tape, fake_x, Mode::FROZEN)?;
    let g_adv = record_generator_loss(&mut tape, sy)?;
    let f_adv = record_generator_loss(&mut tape, sx)?;
    let cx = record_cycle_term(&mut tape, xv, rec_x)?;
    let cy = record_cycle_term(&mut tape, yv, rec_y)?;
    let cyc = tape.add(cx, cy)?;
    let adv = tape.add(g_adv, f_adv)?;
    let weighted = tape.scale(cyc, model.lambda_cycle());
    let total: Var = tape.add(adv, weighted)?;
    let out = GeneratorOutput {
        fake_y: tape.value(fake_y).clone(),
        fake_x: tape.value(fake_x).clone(),
        g_adv: finite("generator adversarial loss", tape.value(g_adv).item(), step)?,
        f_adv: finite(
            "inverse generator adversarial loss",
            tape.value(f_adv).item(),
            step,
        )?,
        cycle: finite("cycle loss", tape.value(cyc).item(), step)?,
    };
    tape.backward(total)?;
    let grads_g = gather_grads(&tape, &[&g1, &g2], &model.g.params());
    let grads_f = gather_grads(&tape, &[&f1, &f2], &model.f.params());
    adam_update(&mut model.g, &mut model.adam_g, &grads_g, "G")?;
    adam_update(&mut model.f, &mut model.adam_f, &grads_f, "F")?;
    let g_stats: Vec<_> = g1.bn_stats.into_iter().chain(g2.bn_stats).collect();
    let f_stats: Vec<_> = f1.bn_stats.into_iter().chain(f2.bn_stats).collect();
    let n_g = model
        .g
        .blocks()
        .iter()
        .filter(|(_, b)| b.norm.is_some())
        .count();
    for chunk in g_stats.chunks(n_g.max(1)) {
        model.g.update_running_stats(chunk);
    }
    for chunk in f_stats.chunks(n_g.max(1)) {
        model.f.update_running_stats(chunk);
    }
    Ok(out)
}

/// Update one discriminator on real images and the detached fakes from the
/// generator sub-step.
fn discriminator_update(
    net: &mut crate::nets::Discriminator,
    adam: &mut AdamState,
    real: &Tensor,
    fake: &Tensor,
    prefix: &str,
    step: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.leaf(real.clone(), false);
    let f = tape.leaf(fake.clone(), false);
    let (sr, tr) = net.record(&mut tape, r, Mode::TRAIN)?;
    let (sf, tf) = net.record(&mut tape, f, Mode::TRAIN)?;
    let loss = record_discriminator_loss(&mut tape, sr, sf)?;
    let value = finite(
        &format!("{prefix} discriminator loss"),
        tape.value(loss).item(),
        step,
    )?;
    tape.backward(loss)?;
    let grads = gather_grads(&tape, &[&tr, &tf], &net.params());
    adam_update(net, adam, &grads, prefix)?;
    net.update_running_stats(&tr.bn_stats);
    net.update_running_stats(&tf.bn_stats);
    Ok(value)
}

pub(crate) fn discriminator_substep(
    model: &mut HarmonizationModel,
    x: &Tensor,
    y: &Tensor,
    gen: &GeneratorOutput,
) -> Result<(f64, f64)> {
    let step = model.step + 1;
    let d_y = discriminator_update(
        &mut model.d_y,
        &mut model.adam_d_y,
        y,
        &gen.fake_y,
        "D_Y",
        step,
    )?;
    let d_x = discriminator_update(
        &mut model.d_x,
        &mut model.adam_d_x,
        x,
        &gen.fake_x,
        "D_X",
        step,
    )?;
    Ok((d_x, d_y))
}

/// One generator step with the discriminators fixed, then one discriminator
/// step with the generators fixed.
pub fn train_step(model: &mut HarmonizationModel, x: &Tensor, y: &Tensor) -> Result<TrainLogEntry> {
    ensure!(
        x.ndim() == 4 && x.shape() == y.shape(),
        Dimension,
        "train_step needs matching [N,1,H,W] batches, got {:?} and {:?}",
        x.shape(),
        y.shape()
    );
    let start = Instant::now();
    let gen = generator_substep(model, x, y)?;
    let (d_loss_x, d_loss_y) = discriminator_substep(model, x, y, &gen)?;
    model.step += 1;
    Ok(TrainLogEntry {
        step: model.step,
        d_loss_x,
        d_loss_y,
        g_adv_loss: gen.g_adv,
        f_adv_loss: gen.f_adv,
        cycle_loss: gen.cycle,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Batch indices for a given global step: each domain walks through its own
/// seeded reshuffles in consecutive full batches, so the schedule depends only
/// on `(seed, step)` and a resumed run sees the same batches.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    seed: u64,
    tag: &'static str,
    len: usize,
    batch: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(seed: u64, tag: &'static str, len: usize, batch: usize) -> Result<Self> {
        ensure!(batch > 0, Config, "batch size must be positive");
        ensure!(
            len >= batch,
            Config,
            "domain {tag} has {len} images, fewer than the batch size {batch}"
        );
        Ok(Self {
            seed,
            tag,
            len,
            batch,
            epoch: None,
        })
    }

    /// Indices for the batch used at 0-based step `step`.
    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let per_epoch = (self.len / self.batch) as u64;
        let (epoch, offset) = (step / per_epoch, (step % per_epoch) as usize);
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.len).collect();
            order.shuffle(&mut rng_from(derive_indexed(self.seed, self.tag, epoch)));
            self.epoch = Some((epoch, order));
        }
        let order = &self.epoch.as_ref().unwrap().1;
        order[offset * self.batch..(offset + 1) * self.batch].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The snapshot with the best smoothed cycle loss (the final model if no
    /// evaluation happened).
    pub best: HarmonizationModel,
    pub last: HarmonizationModel,
    pub log: Vec<TrainLogEntry>,
    /// `(step, smoothed cycle loss)` at every evaluation.
    pub evaluations: Vec<(u64, f64)>,
    pub stop_reason: StopReason,
    pub warnings: Vec<String>,
}

/// Mean over pixels of the across-batch standard deviation.
pub fn batch_diversity(batch: &Tensor) -> f64 {
    let n = batch.shape()[0];
    if n < 2 {
        return f64::INFINITY;
    }
    let inner = batch.len() / n;
    let d = batch.data();
    (0..inner)
        .map(|p| {
            let m = (0..n).map(|i| d[i * inner + p]).sum::<f64>() / n as f64;
            ((0..n).map(|i| (d[i * inner + p] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        })
        .sum::<f64>()
        / inner as f64
}

pub const COLLAPSE_STD: f64 = 1e-3;

/// Alternating training on shuffled mini-batches until the stopping rule or
/// `max_steps` (counted from step 0, so resumed models continue the count).
pub fn train(
    model: HarmonizationModel,
    set_x: &ImageSet,
    set_y: &ImageSet,
    batch_size: usize,
    seed: u64,
    stop: &StoppingRule,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    stop.validate()?;
    ensure!(
        !set_x.is_empty() && !set_y.is_empty(),
        Config,
        "both domains need images"
    );
    ensure!(
        set_x.image_shape() == set_y.image_shape(),
        Config,
        "domain image shapes differ: {:?} vs {:?}",
        set_x.image_shape(),
        set_y.image_shape()
    );
    let mut model = model;
    let mut sx = BatchSchedule::new(seed, "batches-x", set_x.len(), batch_size)?;
    let mut sy = BatchSchedule::new(seed, "batches-y", set_y.len(), batch_size)?;
    let mut log = Vec::new();
    let mut evaluations = Vec::new();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, HarmonizationModel)> = None;
    let mut stale = 0usize;
    let mut reason = StopReason::MaxSteps;
    let mut history: Vec<f64> = Vec::new();
    while model.step < stop.max_steps {
        let s = model.step;
        let xb = set_x.batch(&sx.indices(s))?;
        let yb = set_y.batch(&sy.indices(s))?;
        let entry = train_step(&mut model, &xb, &yb)?;
        on_step(&entry);
        history.push(entry.cycle_loss);
        log.push(entry);
        if model.step.is_multiple_of(stop.eval_every) {
            let w = stop.window.min(history.len());
            let smoothed = history[history.len() - w..].iter().sum::<f64>() / w as f64;
            evaluations.push((model.step, smoothed));
            let diversity = batch_diversity(&model.g.infer(&xb)?);
            if diversity < COLLAPSE_STD {
                warnings.push(format!(
                    "step {}: possible mode collapse, output std across batch {diversity:.2e}",
                    model.step
                ));
            }
            if best.as_ref().is_none_or(|(b, _)| smoothed < *b) {
                best = Some((smoothed, model.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= stop.patience {
                reason = StopReason::Patience;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.map_or_else(|| model.clone(), |(_, m)| m),
        last: model,
        log,
        evaluations,
        stop_reason: reason,
        warnings,
    })
}
