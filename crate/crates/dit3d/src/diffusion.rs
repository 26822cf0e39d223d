//! Denoising-diffusion machinery: the noise schedule, forward corruption,
//! the training loss, and the ancestral sampler, including strided
//! sub-schedules for sampling with fewer steps than the model was trained on.
//!
//! All schedule tables are computed and stored at 64-bit regardless of the
//! model's working precision.

use crate::error::{Error, Result};
use crate::model::{ModelVars, NoisePredictor};
use crate::tensor::{real, Real, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear noise schedule with its derived tables.
///
/// `alpha_bar` is built as a running product, so the construction identity
/// `alpha_bar[t] == alpha_bar[t-1] * alpha[t]` holds bitwise. The division
/// form `alpha_bar[t] / alpha_bar[t-1]` re-rounds and can differ from
/// `alpha[t]` in the last bit. `posterior_var[0]` is defined as 0, which is
/// what makes the final sampling step deterministic.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

impl Schedule {
    /// The default linear schedule: 1000 steps from 1e-4 to 0.02.
    pub fn default_linear() -> Schedule {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

/// Builds a linear beta grid inclusive of both endpoints and derives the
/// alpha, running-product, and posterior-variance tables from it.
///
/// The grid uses the convex combination `start*(1-u) + end*u` rather than
/// `start + u*(end-start)` so both endpoints come out exact.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let mut beta = Vec::with_capacity(steps);
    if steps == 1 {
        beta.push(beta_start);
    } else {
        let denom = (steps - 1) as f64;
        for i in 0..steps {
            let u = i as f64 / denom;
            beta.push(beta_start * (1.0 - u) + beta_end * u);
        }
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let mut posterior_var = Vec::with_capacity(steps);
    posterior_var.push(0.0);
    for t in 1..steps {
        posterior_var.push(beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]));
    }
    Ok(Schedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

fn check_timestep(sched: &Schedule, t: usize) -> Result<()> {
    if t >= sched.steps {
        return Err(Error::Contract(format!(
            "timestep {t} outside schedule of {} steps",
            sched.steps
        )));
    }
    Ok(())
}

fn check_paired<F>(what: &str, a: &[[F; 3]], b: &[[F; 3]]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!(
            "{what}: cloud has {} points but companion has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Forward corruption `x_t = sqrt(abar_t)*x0 + sqrt(1 - abar_t)*eps`.
/// The noise is injected by the caller so tests and the trainer control it.
pub fn q_sample<F: Real>(
    sched: &Schedule,
    x0: &[[F; 3]],
    t: usize,
    eps: &[[F; 3]],
) -> Result<Vec<[F; 3]>> {
    check_timestep(sched, t)?;
    check_paired("q_sample", x0, eps)?;
    let a = real::<F>(sched.alpha_bar[t].sqrt());
    let b = real::<F>((1.0 - sched.alpha_bar[t]).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(p, e)| {
            [
                a * p[0] + b * e[0],
                a * p[1] + b * e[1],
                a * p[2] + b * e[2],
            ]
        })
        .collect())
}

/// Mean squared error between a noise prediction and the true noise,
/// averaged over all `3n` coordinates.
pub fn noise_loss<F: Real>(pred: &[[F; 3]], eps: &[[F; 3]]) -> Result<F> {
    check_paired("noise_loss", pred, eps)?;
    if pred.is_empty() {
        return Err(Error::Contract("loss needs at least one point".into()));
    }
    let mut s = F::ZERO;
    for (p, e) in pred.iter().zip(eps) {
        for c in 0..3 {
            let d = p[c] - e[c];
            s += d * d;
        }
    }
    Ok(s / real::<F>((pred.len() * 3) as f64))
}

/// Training loss on plain data: corrupt `x0` at step `t`, predict the noise,
/// and measure the mean squared error against the injected `eps`.
pub fn loss_simple<F: Real>(
    sched: &Schedule,
    model: &NoisePredictor<F>,
    x0: &[[F; 3]],
    t: usize,
    y: Option<usize>,
    eps: &[[F; 3]],
) -> Result<F> {
    let x_t = q_sample(sched, x0, t, eps)?;
    let pred = model.predict_noise(&x_t, t, y)?;
    noise_loss(&pred, eps)
}

/// The same loss built on a tape through caller-provided parameter leaves so
/// it can be differentiated. Returns the scalar loss node.
pub fn loss_on<F: Real>(
    tape: &mut Tape<F>,
    sched: &Schedule,
    model: &NoisePredictor<F>,
    vars: &ModelVars,
    x0: &[[F; 3]],
    t: usize,
    y: Option<usize>,
    eps: &[[F; 3]],
) -> Result<Var> {
    let x_t = q_sample(sched, x0, t, eps)?;
    let trace = model.forward_with_vars(tape, vars, &x_t, t, y)?;
    let flat: Vec<F> = eps.iter().flat_map(|e| e.iter().copied()).collect();
    let target = tape.leaf(&[eps.len(), 3], flat, false)?;
    tape.mse(trace.output, target)
}

/// Posterior mean of one reverse step,
/// `(x_t - beta/sqrt(1-abar)*eps_hat) / sqrt(alpha)`.
pub fn step_mean<F: Real>(
    x_t: &[[F; 3]],
    eps_hat: &[[F; 3]],
    beta: f64,
    alpha: f64,
    alpha_bar: f64,
) -> Result<Vec<[F; 3]>> {
    check_paired("step_mean", x_t, eps_hat)?;
    let coef = real::<F>(beta / (1.0 - alpha_bar).sqrt());
    let root_alpha = real::<F>(alpha.sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            [
                (x[0] - coef * e[0]) / root_alpha,
                (x[1] - coef * e[1]) / root_alpha,
                (x[2] - coef * e[2]) / root_alpha,
            ]
        })
        .collect())
}

/// One ancestral step from `x_t` to `x_{t-1}` with guided noise prediction.
/// The injected noise `z` is ignored at `t = 0`, so the final step is the
/// posterior mean exactly.
pub fn p_sample_step<F: Real>(
    sched: &Schedule,
    model: &NoisePredictor<F>,
    x_t: &[[F; 3]],
    t: usize,
    y: Option<usize>,
    w: f64,
    z: &[[F; 3]],
) -> Result<Vec<[F; 3]>> {
    check_timestep(sched, t)?;
    check_paired("p_sample_step", x_t, z)?;
    let eps_hat = model.predict_noise_cfg(x_t, t, y, w)?;
    let mut out = step_mean(x_t, &eps_hat, sched.beta[t], sched.alpha[t], sched.alpha_bar[t])?;
    if t > 0 {
        let sd = real::<F>(sched.posterior_var[t].sqrt());
        for (o, n) in out.iter_mut().zip(z) {
            for c in 0..3 {
                o[c] += sd * n[c];
            }
        }
    }
    Ok(out)
}

/// Reverse-chain coefficients over a subset of a schedule's timesteps.
///
/// `timesteps[s]` is the original index the model is conditioned on at
/// position `s`. `alpha_bar` entries are taken from the base table verbatim,
/// and each step's effective alpha is the ratio of consecutive entries, so
/// the sub-chain reaches the same signal level as the full chain.
#[derive(Debug, Clone)]
pub struct SampleChain {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub timesteps: Vec<usize>,
}

/// Selects an evenly strided subset of `steps` timesteps (always including
/// the first and last) and recomputes the chain coefficients for it. With
/// `steps` equal to the schedule length the base tables are used verbatim.
pub fn stride_chain(sched: &Schedule, steps: usize) -> Result<SampleChain> {
    if steps == 0 || steps > sched.steps {
        return Err(Error::Contract(format!(
            "sampling steps {steps} must lie in [1, {}]",
            sched.steps
        )));
    }
    if steps == sched.steps {
        return Ok(SampleChain {
            beta: sched.beta.clone(),
            alpha: sched.alpha.clone(),
            alpha_bar: sched.alpha_bar.clone(),
            posterior_var: sched.posterior_var.clone(),
            timesteps: (0..steps).collect(),
        });
    }
    let timesteps: Vec<usize> = if steps == 1 {
        vec![sched.steps - 1]
    } else {
        let span = (sched.steps - 1) as f64;
        let denom = (steps - 1) as f64;
        (0..steps)
            .map(|s| (s as f64 * span / denom).round() as usize)
            .collect()
    };
    debug_assert!(timesteps.windows(2).all(|w| w[0] < w[1]));
    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for &tau in &timesteps {
        let ab = sched.alpha_bar[tau];
        let a = ab / prev;
        beta.push(1.0 - a);
        alpha.push(a);
        alpha_bar.push(ab);
        prev = ab;
    }
    let mut posterior_var = Vec::with_capacity(steps);
    posterior_var.push(0.0);
    for s in 1..steps {
        posterior_var.push(beta[s] * (1.0 - alpha_bar[s - 1]) / (1.0 - alpha_bar[s]));
    }
    Ok(SampleChain {
        beta,
        alpha,
        alpha_bar,
        posterior_var,
        timesteps,
    })
}

/// `n` points with independent standard-normal coordinates.
pub fn gaussian_cloud<F: Real, R: Rng>(rng: &mut R, n: usize) -> Vec<[F; 3]> {
    (0..n)
        .map(|_| {
            let mut p = [F::ZERO; 3];
            for c in &mut p {
                let z: f64 = StandardNormal.sample(rng);
                *c = real::<F>(z);
            }
            p
        })
        .collect()
}

/// Runs the full reverse chain from Gaussian noise down to a sample cloud.
/// Deterministic given `seed`; the chain visits `steps` evenly strided
/// timesteps and conditions the model on the original indices.
pub fn sample<F: Real>(
    sched: &Schedule,
    model: &NoisePredictor<F>,
    n: usize,
    y: Option<usize>,
    steps: usize,
    w: f64,
    seed: u64,
) -> Result<Vec<[F; 3]>> {
    if n == 0 {
        return Err(Error::Contract("cannot sample an empty cloud".into()));
    }
    let chain = stride_chain(sched, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_cloud::<F, _>(&mut rng, n);
    for s in (0..chain.timesteps.len()).rev() {
        let eps_hat = model.predict_noise_cfg(&x, chain.timesteps[s], y, w)?;
        x = step_mean(&x, &eps_hat, chain.beta[s], chain.alpha[s], chain.alpha_bar[s])?;
        if s > 0 {
            let sd = real::<F>(chain.posterior_var[s].sqrt());
            for p in x.iter_mut() {
                for c in 0..3 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p[c] += sd * real::<F>(z);
                }
            }
        }
    }
    Ok(x)
}
