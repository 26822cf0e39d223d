//! Mini-batch denoising training loop.
//!
//! Each step draws a timestep and a fresh noise sample per example, builds
//! one tape per example, averages the parameter gradients over the batch,
//! and takes one Adam step. Gradients only reach tensors currently marked
//! trainable, so the freezing contract is enforced by construction and
//! again inside the optimizer.

use crate::diffusion::{gaussian_cloud, loss_on, Schedule};
use crate::embed::dropout_label;
use crate::error::{Error, Result};
use crate::model::NoisePredictor;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tape};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_dropout: f64,
    pub seed: u64,
    /// Stop once an epoch's mean loss falls below this.
    pub early_stop_loss: Option<f64>,
    /// Stop once this many optimizer steps have been taken.
    pub max_steps: Option<u64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-4,
            batch_size: 16,
            epochs: 300,
            label_dropout: 0.1,
            seed: 0,
            early_stop_loss: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps_done: u64,
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// True when an early-stop threshold or step cap ended training before
    /// the configured epoch count.
    pub stopped_early: bool,
}

fn numeric_context(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, step {step}: {msg}")),
        other => other,
    }
}

/// Trains the model in place, calling `on_epoch` after every epoch with
/// that epoch's mean per-example loss.
pub fn train<F: Real>(
    model: &mut NoisePredictor<F>,
    sched: &Schedule,
    clouds: &[Vec<[F; 3]>],
    labels: &[usize],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainStats> {
    if clouds.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if clouds.len() != labels.len() {
        return Err(Error::Dim(format!(
            "{} clouds but {} labels",
            clouds.len(),
            labels.len()
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if opts.epochs == 0 {
        return Err(Error::Config("epoch count must be positive".into()));
    }
    let num_classes = model.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    if sched.steps > model.config.t_max {
        return Err(Error::Config(format!(
            "schedule has {} steps but the model conditions on at most {}",
            sched.steps, model.config.t_max
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut stopped_early = false;

    'epochs: for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_seen = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let mut grad_sum: IndexMap<String, Vec<F>> = IndexMap::new();
            for &idx in batch {
                let t = rng.gen_range(0..sched.steps);
                let eps = gaussian_cloud::<F, _>(&mut rng, clouds[idx].len());
                let label = dropout_label(
                    Some(labels[idx]),
                    num_classes,
                    opts.label_dropout,
                    &mut rng,
                )?;
                let y = if label == num_classes {
                    None
                } else {
                    Some(label)
                };
                let mut tape = Tape::new();
                let step = opt.steps_taken();
                let vars = model
                    .leaf_vars(&mut tape)
                    .map_err(|e| numeric_context(e, epoch, step))?;
                let loss = loss_on(&mut tape, sched, model, &vars, &clouds[idx], t, y, &eps)
                    .map_err(|e| numeric_context(e, epoch, step))?;
                tape.backward(loss)
                    .map_err(|e| numeric_context(e, epoch, step))?;
                let loss_val = tape.scalar_value(loss)?.to_f64();
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "epoch {epoch}, step {step}: loss is {loss_val}"
                    )));
                }
                epoch_sum += loss_val;
                epoch_seen += 1;
                for &(ref name, var) in vars.pairs() {
                    if let Some(g) = tape.grad(var) {
                        let slot = grad_sum
                            .entry(name.clone())
                            .or_insert_with(|| vec![F::ZERO; g.len()]);
                        for (s, &gi) in slot.iter_mut().zip(g) {
                            *s += gi;
                        }
                    }
                }
            }
            let inv = F::from_f64(1.0 / batch.len() as f64);
            let grads: Vec<(String, Vec<F>)> = grad_sum
                .into_iter()
                .map(|(name, mut g)| {
                    for gi in g.iter_mut() {
                        *gi = *gi * inv;
                    }
                    (name, g)
                })
                .collect();
            opt.step(model.store_mut(), &grads)?;
            if let Some(cap) = opts.max_steps {
                if opt.steps_taken() >= cap {
                    stopped_early = true;
                    if epoch_seen > 0 {
                        epoch_losses.push(epoch_sum / epoch_seen as f64);
                        on_epoch(&EpochLog {
                            epoch,
                            mean_loss: epoch_sum / epoch_seen as f64,
                            steps_done: opt.steps_taken(),
                        });
                    }
                    break 'epochs;
                }
            }
        }
        let mean = epoch_sum / epoch_seen as f64;
        epoch_losses.push(mean);
        on_epoch(&EpochLog {
            epoch,
            mean_loss: mean,
            steps_done: opt.steps_taken(),
        });
        if let Some(threshold) = opts.early_stop_loss {
            if mean < threshold {
                stopped_early = epoch + 1 < opts.epochs;
                break;
            }
        }
    }

    Ok(TrainStats {
        epoch_losses,
        steps: opt.steps_taken(),
        stopped_early,
    })
}
