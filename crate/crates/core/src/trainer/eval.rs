//! Sample-quality evaluation against held-out data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_dataset, DatasetKind};
use super::mix_seed;
use super::mmd::{eval_mmd, permutation_threshold};
use super::sample::{sample, SampleConfig};
use crate::error::{Error, Result};
use crate::network::params::ParamStore;
use crate::network::Network;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Generated and held-out set size.
    pub n: usize,
    pub trials: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 256,
            trials: 100,
            quantile: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mmd2: f64,
    /// `quantile` of the data-vs-data null distribution.
    pub threshold: f64,
    pub below_threshold: bool,
    pub n: usize,
    pub trials: usize,
    pub quantile: f64,
}

/// Held-out images never used for training (distinct generator seeds).
pub fn heldout_images(kind: DatasetKind, data_seed: u64, n: usize, split: u64) -> Vec<Vec<f64>> {
    gen_dataset(kind, n, mix_seed(data_seed, (1 << 40) + split)).images
}

/// Draw `cfg.n` samples (evenly over classes for conditional models unless
/// `sample_cfg.label` is set) and compare them with held-out data.
pub fn evaluate(
    network: &Network,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    kind: DatasetKind,
    data_seed: u64,
    sample_cfg: &SampleConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.n < 2 || cfg.trials == 0 || !(0.0..=1.0).contains(&cfg.quantile) {
        return Err(Error::InvalidArgument("evaluation needs n >= 2, trials > 0, quantile in [0, 1]".into()));
    }
    let classes = network.config.classes;
    let mut samples = Vec::with_capacity(cfg.n);
    if classes > 0 && sample_cfg.label.is_none() {
        for c in 0..classes {
            let count = cfg.n / classes + usize::from(c < cfg.n % classes);
            let sc = SampleConfig {
                count,
                label: Some(c),
                seed: mix_seed(sample_cfg.seed, c as u64),
                ..sample_cfg.clone()
            };
            samples.extend(sample(network, store, schedule, &sc)?);
        }
    } else {
        let sc = SampleConfig {
            count: cfg.n,
            ..sample_cfg.clone()
        };
        samples = sample(network, store, schedule, &sc)?;
    }
    let heldout = match (sample_cfg.label, classes > 0) {
        (Some(y), true) => {
            let d = gen_dataset(kind, 3 * cfg.n * classes, mix_seed(data_seed, 1 << 40));
            let labels = d.labels.expect("conditional dataset has labels");
            d.images
                .into_iter()
                .zip(labels)
                .filter(|(_, l)| *l == y)
                .map(|(i, _)| i)
                .take(3 * cfg.n)
                .collect::<Vec<_>>()
        }
        _ => heldout_images(kind, data_seed, 3 * cfg.n, 0),
    };
    let (reference, pool) = heldout.split_at(cfg.n);
    let mmd2 = eval_mmd(&samples, reference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let threshold = permutation_threshold(pool, cfg.n, cfg.trials, cfg.quantile, &mut rng)?;
    Ok(EvalReport {
        mmd2,
        threshold,
        below_threshold: mmd2 < threshold,
        n: cfg.n,
        trials: cfg.trials,
        quantile: cfg.quantile,
    })
}
