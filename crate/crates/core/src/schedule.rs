//! Discrete-time DDPM forward process and ancestral sampling with the
//! cosine ᾱ schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clip for β_t; keeps the last step of the cosine schedule non-singular.
pub const MAX_BETA: f64 = 0.999;

/// Per-timestep noise tables. Index `t` is 1-based throughout the public API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    alphabar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Original timestep for each entry; identity unless respaced.
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Cosine schedule: ᾱ_t = f(t)/f(0), f(t) = cos²(((t/T + s)/(1 + s))·π/2),
    /// with β_t = 1 − ᾱ_t/ᾱ_{t−1} clipped to [`MAX_BETA`].
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if offset <= 0.0 || !offset.is_finite() {
            return Err(Error::InvalidArgument(format!("cosine offset must be > 0, got {offset}")));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = f(t as f64) / f0;
            beta.push((1.0 - ab / prev).min(MAX_BETA));
            prev = ab;
        }
        Ok(Self::from_betas(steps, offset, beta, (1..=steps).collect()))
    }

    fn from_betas(steps: usize, offset: f64, beta: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alphabar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alphabar.push(acc);
        }
        Self {
            steps,
            offset,
            alphabar,
            alpha,
            beta,
            timesteps,
        }
    }

    /// Number of entries in this schedule.
    pub fn len(&self) -> usize {
        self.alphabar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphabar.is_empty()
    }

    /// Step count T of the underlying (un-respaced) process.
    pub fn total_steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(t - 1)
    }

    /// ᾱ_t; `alphabar(0)` is not defined here, use [`Self::alphabar_prev`].
    pub fn alphabar(&self, t: usize) -> Result<f64> {
        Ok(self.alphabar[self.idx(t)?])
    }

    /// ᾱ_{t−1} with ᾱ_0 = 1.
    pub fn alphabar_prev(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        Ok(if i == 0 { 1.0 } else { self.alphabar[i - 1] })
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    /// Timestep of the original process that entry `t` corresponds to.
    pub fn model_timestep(&self, t: usize) -> Result<usize> {
        Ok(self.timesteps[self.idx(t)?])
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    /// Posterior variance σ_t² = β_t(1 − ᾱ_{t−1})/(1 − ᾱ_t); zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        if i == 0 {
            return Ok(0.0);
        }
        Ok(self.beta[i] * (1.0 - self.alphabar[i - 1]) / (1.0 - self.alphabar[i]))
    }

    /// Uniform-stride subsequence of `steps` timesteps τ_s = ⌊s·T/steps⌋,
    /// with ᾱ re-indexed onto it. `steps == T` returns an identical schedule.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot respace {} steps onto {steps}",
                self.len()
            )));
        }
        let n = self.len();
        let picks: Vec<usize> = (1..=steps).map(|s| s * n / steps).collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &picks {
            let ab = self.alphabar[t - 1];
            beta.push((1.0 - ab / prev).min(MAX_BETA));
            prev = ab;
        }
        let timesteps = picks.iter().map(|&t| self.timesteps[t - 1]).collect();
        Ok(Self::from_betas(self.steps, self.offset, beta, timesteps))
    }
}

/// Forward process sample x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: vec![x0.len()],
            rhs: vec![noise.len()],
        });
    }
    let ab = sched.alphabar(t)?;
    Ok(q_sample_with(x0, noise, ab))
}

pub(crate) fn q_sample_with(x0: &[f64], noise: &[f64], alphabar: f64) -> Vec<f64> {
    let (a, b) = (alphabar.sqrt(), (1.0 - alphabar).sqrt());
    x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
}

/// Recover x0 from x_t and a noise estimate: (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.
pub fn predict_x0(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let ab = sched.alphabar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
}

/// One ancestral step x_t → x_{t−1}:
/// (1/√α_t)(x_t − β_t/√(1−ᾱ_t)·ε̂) + σ_t·noise, with σ_1 = 0.
pub fn ddpm_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if x_t.len() != eps_hat.len() || (t > 1 && x_t.len() != noise.len()) {
        return Err(Error::ShapeMismatch {
            op: "ddpm_step",
            lhs: vec![x_t.len()],
            rhs: vec![eps_hat.len(), noise.len()],
        });
    }
    let alpha = sched.alpha(t)?;
    let beta = sched.beta(t)?;
    let ab = sched.alphabar(t)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = sched.posterior_variance(t)?.sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let mean = inv * (x - coef * e);
            if t == 1 {
                mean
            } else {
                mean + sigma * noise[i]
            }
        })
        .collect())
}
