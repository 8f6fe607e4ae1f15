//! Ancestral DDPM sampling with classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::params::ParamStore;
use crate::network::Network;
use crate::schedule::{ddpm_step, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub count: usize,
    /// Number of reverse steps; a uniform-stride subsequence of the T training steps.
    pub steps: usize,
    /// Guidance scale s; 1 disables guidance.
    pub guidance: f64,
    /// Class to sample; `None` samples the unconditional branch.
    pub label: Option<usize>,
    pub seed: u64,
    /// Images per forward pass.
    pub chunk: usize,
    /// Clamp the implied x̂0 to [−1, 1] before each reverse step.
    pub clip_x0: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 16,
            steps: 100,
            guidance: 1.5,
            label: None,
            seed: 0,
            chunk: 64,
            clip_x0: true,
        }
    }
}

/// ε_null + s·(ε_y − ε_null), collapsing to ε_y exactly when s = 1.
pub fn guided_eps(eps_y: &[f64], eps_null: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return eps_y.to_vec();
    }
    eps_y.iter().zip(eps_null).map(|(c, u)| u + scale * (c - u)).collect()
}

fn predict(
    network: &Network,
    store: &ParamStore,
    x: &[Vec<f64>],
    t: usize,
    label: Option<usize>,
    guidance: f64,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &network.config;
    let b = x.len();
    let pixels = cfg.pixels();
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    if !cfg.conditional() {
        let xt = Tensor::new(vec![b, pixels], flat)?;
        let (eps, _) = network.predict_noise(store, &xt, &vec![t; b], None)?;
        return Ok(eps.data().chunks(pixels).map(<[f64]>::to_vec).collect());
    }
    let y = label.unwrap_or(cfg.null_class());
    if guidance == 1.0 || y == cfg.null_class() {
        let xt = Tensor::new(vec![b, pixels], flat)?;
        let (eps, _) = network.predict_noise(store, &xt, &vec![t; b], Some(&vec![y; b]))?;
        return Ok(eps.data().chunks(pixels).map(<[f64]>::to_vec).collect());
    }
    let doubled: Vec<f64> = flat.iter().chain(&flat).copied().collect();
    let xt = Tensor::new(vec![2 * b, pixels], doubled)?;
    let mut labels = vec![y; b];
    labels.extend(vec![cfg.null_class(); b]);
    let (eps, _) = network.predict_noise(store, &xt, &vec![t; 2 * b], Some(&labels))?;
    let (cond, null) = eps.data().split_at(b * pixels);
    Ok(cond
        .chunks(pixels)
        .zip(null.chunks(pixels))
        .map(|(c, u)| guided_eps(c, u, guidance))
        .collect())
}

/// Noise estimate consistent with x̂0 clamped to [−1, 1].
fn clip_eps(x: &[f64], eps: &[f64], alphabar: f64) -> Vec<f64> {
    let (a, b) = (alphabar.sqrt(), (1.0 - alphabar).sqrt());
    x.iter()
        .zip(eps)
        .map(|(xv, e)| {
            let x0 = ((xv - b * e) / a).clamp(-1.0, 1.0);
            (xv - a * x0) / b
        })
        .collect()
}

/// Draw `cfg.count` images with parameters `store` (normally the EMA copy),
/// clamped to [−1, 1].
pub fn sample(network: &Network, store: &ParamStore, schedule: &NoiseSchedule, cfg: &SampleConfig) -> Result<Vec<Vec<f64>>> {
    let mcfg = &network.config;
    if cfg.steps == 0 || cfg.steps > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be in 1..={}, got {}",
            schedule.len(),
            cfg.steps
        )));
    }
    if cfg.guidance < 1.0 || !cfg.guidance.is_finite() {
        return Err(Error::InvalidArgument(format!("guidance must be >= 1, got {}", cfg.guidance)));
    }
    if let Some(y) = cfg.label {
        if !mcfg.conditional() {
            return Err(Error::InvalidArgument("class label given for an unconditional model".into()));
        }
        if y >= mcfg.classes {
            return Err(Error::InvalidArgument(format!("class {y} out of range 0..{}", mcfg.classes)));
        }
    }
    let respaced = schedule.respaced(cfg.steps)?;
    let pixels = mcfg.pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<Vec<f64>> = (0..cfg.count)
        .map(|_| (0..pixels).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let chunk = cfg.chunk.max(1);
    for s in (1..=cfg.steps).rev() {
        let t = respaced.model_timestep(s)?;
        let mut eps = Vec::with_capacity(cfg.count);
        for part in x.chunks(chunk) {
            eps.extend(predict(network, store, part, t, cfg.label, cfg.guidance)?);
        }
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let clipped;
            let ei = if cfg.clip_x0 {
                clipped = clip_eps(xi, ei, respaced.alphabar(s)?);
                &clipped
            } else {
                ei
            };
            let noise: Vec<f64> = if s > 1 {
                (0..pixels).map(|_| rng.sample(StandardNormal)).collect()
            } else {
                Vec::new()
            };
            *xi = ddpm_step(xi, s, ei, &respaced, &noise)?;
        }
    }
    for xi in &mut x {
        xi.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    Ok(x)
}
