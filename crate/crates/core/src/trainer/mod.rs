//! Training loop, sampling, evaluation and persistence for the toy model.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod mmd;
pub mod sample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ablation::Ablations;
use crate::error::{Error, Result};
use crate::gating::{stack_activation_maps, GateState};
use crate::loss::{
    diffusion_prior_loss, diffusion_prior_loss_graph, load_balance_graph, prior_target, PriorAggregation, PriorScaling,
};
use crate::matching::{assignment_cost, hungarian, permute_columns, Assignment};
use crate::network::params::{ema_update, AdamConfig, AdamW, Binder};
use crate::network::{ForwardOptions, ModelConfig, ModelState, Network};
use crate::prior::{BinaryMap, PriorMask, DEFAULT_ALPHA};
use crate::schedule::{q_sample_with, NoiseSchedule};
use crate::tensor::{GradMode, Graph, Tensor};
use data::{gen_dataset, hflip, Dataset, DatasetKind};
pub use metrics::MetricsRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub data_size: usize,
    pub data_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_dp: f64,
    /// Weight of the importance loss; only used with the load-balance ablation.
    pub lambda_load: f64,
    pub ema_decay: f64,
    pub ablations: Ablations,
    /// Recompute the gate/prior matching every this many steps.
    pub match_every: usize,
    pub prior_alpha: f64,
    pub prior_scaling: PriorScaling,
    pub prior_aggregation: PriorAggregation,
    pub allocation_seed: u64,
    pub cosine_offset: f64,
    /// Probability of replacing a label by the null class (conditional runs).
    pub class_dropout: f64,
    pub hflip: bool,
    /// Consecutive unchanged steps that count as a stabilised routing map.
    pub stability_window: usize,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Blobs,
            data_size: 2048,
            data_seed: 0,
            steps: 2000,
            batch_size: 32,
            adam: AdamConfig::default(),
            lambda_dp: 1.0,
            lambda_load: 0.1,
            ema_decay: 0.9999,
            ablations: Ablations::default(),
            match_every: 1,
            prior_alpha: DEFAULT_ALPHA,
            prior_scaling: PriorScaling::Renormalize,
            prior_aggregation: PriorAggregation::UniqueT,
            allocation_seed: 0,
            cosine_offset: 0.008,
            class_dropout: 0.1,
            hflip: true,
            stability_window: 200,
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Model configuration with the dataset's class count and the gating
    /// ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.classes = self.dataset.classes();
        m.image_size = data::IMAGE_SIZE;
        m.noisy_gating = self.ablations.noisy_gating;
        m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.data_size == 0 {
            return bad("batch_size and data_size must be positive");
        }
        if self.match_every == 0 {
            return bad("match_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return bad("class_dropout must be in [0, 1]");
        }
        if self.lambda_dp < 0.0 || self.lambda_load < 0.0 || self.adam.lr <= 0.0 {
            return bad("loss weights must be non-negative and lr positive");
        }
        self.effective_model().validate()
    }
}

/// One training batch with every random draw fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, pixels]` clean images.
    pub x0: Vec<f64>,
    pub t: Vec<usize>,
    pub noise: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    /// Seed of the gate-noise draws (noisy-gating ablation).
    pub gate_seed: u64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Scalar loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub noise: f64,
    pub dp: f64,
    pub load: f64,
    pub total: f64,
}

/// Everything the loss needs besides parameters and the batch.
pub struct LossContext<'a> {
    pub network: &'a Network,
    pub config: &'a TrainConfig,
    pub schedule: &'a NoiseSchedule,
    pub prior: Option<&'a PriorMask>,
    pub assignment: Option<&'a Assignment>,
}

/// Output of [`LossContext::evaluate`].
pub struct Evaluation {
    pub terms: LossTerms,
    pub grads: Option<Vec<Tensor>>,
    pub expert_evals: usize,
}

impl LossContext<'_> {
    /// L = L_noise + λ_dp·L_dp (+ λ_load·L_load), optionally with gradients
    /// for every parameter of `store`.
    pub fn evaluate(&self, store: &crate::network::params::ParamStore, batch: &Batch, grads: bool) -> Result<Evaluation> {
        let cfg = self.config;
        let net = self.network;
        let mcfg = &net.config;
        let b = batch.len();
        let pixels = mcfg.pixels();
        let mut g = Graph::new();
        let mut binder = Binder::new(store, grads);

        let x0 = &batch.x0;
        let mut xt = Vec::with_capacity(b * pixels);
        for (i, &t) in batch.t.iter().enumerate() {
            let ab = self.schedule.alphabar(t)?;
            let rows = i * pixels..(i + 1) * pixels;
            xt.extend(q_sample_with(&x0[rows.clone()], &batch.noise[rows], ab));
        }
        let x = g.constant(Tensor::new(vec![b, pixels], xt)?);
        let mut gate_rng = ChaCha8Rng::seed_from_u64(batch.gate_seed);
        let opts = ForwardOptions {
            bypass_smoe: false,
            gate_noise: if mcfg.noisy_gating { Some(&mut gate_rng as &mut dyn rand::RngCore) } else { None },
        };
        let out = net.forward(&mut g, &mut binder, x, &batch.t, batch.labels.as_deref(), opts)?;

        let target = g.constant(Tensor::new(vec![b, pixels], batch.noise.clone())?);
        let diff = g.sub(out.eps, target)?;
        let sq = g.mul(diff, diff)?;
        let l_noise = g.mean(sq)?;
        let mut total = l_noise;
        let mut terms = LossTerms::default();

        let use_dp = cfg.lambda_dp > 0.0 && !out.probs.is_empty();
        let mut l_dp = None;
        if use_dp {
            let prior = self.prior.ok_or_else(|| Error::InvalidArgument("prior loss without a prior".into()))?;
            let assignment = self
                .assignment
                .ok_or_else(|| Error::InvalidArgument("prior loss without an assignment".into()))?;
            let p_flat = g.concat(&out.probs)?;
            let inv = assignment.inverse();
            let (n, m) = (mcfg.blocks, mcfg.experts);
            // gate outputs depend on t only, so any sample with t stands for all of them
            let picks: Vec<(usize, usize)> = match cfg.prior_aggregation {
                PriorAggregation::PerSample => batch.t.iter().copied().enumerate().map(|(s, t)| (t, s)).collect(),
                PriorAggregation::UniqueT => {
                    let mut ts: Vec<usize> = batch.t.clone();
                    ts.sort_unstable();
                    ts.dedup();
                    ts.iter()
                        .map(|&t| (t, batch.t.iter().position(|&x| x == t).expect("t drawn from batch")))
                        .collect()
                }
            };
            let mut parts = Vec::with_capacity(picks.len());
            for &(t, s) in &picks {
                let index: Vec<usize> = inv
                    .perm()
                    .iter()
                    .map(|&col| {
                        let (blk, j) = (col / m, col % m);
                        (blk * b + s) * m + j
                    })
                    .collect();
                let q = prior_target(prior.row(t)?, n, mcfg.top_k, cfg.prior_scaling)?;
                parts.push(diffusion_prior_loss_graph(&mut g, p_flat, index, &q, n)?);
            }
            let mut sum = parts[0];
            for &p in &parts[1..] {
                sum = g.add(sum, p)?;
            }
            let mean = g.scale(sum, 1.0 / parts.len() as f64);
            let weighted = g.scale(mean, cfg.lambda_dp);
            total = g.add(total, weighted)?;
            l_dp = Some(mean);
        }

        let mut l_load = None;
        if cfg.ablations.load_balance && !out.probs.is_empty() {
            let mut acc = None;
            for &p in &out.probs {
                let v = load_balance_graph(&mut g, p)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, v)?,
                    None => v,
                });
            }
            if let Some(v) = acc {
                let weighted = g.scale(v, cfg.lambda_load);
                total = g.add(total, weighted)?;
                l_load = Some(v);
            }
        }

        terms.noise = g.value(l_noise).item()?;
        terms.dp = l_dp.map(|v| g.value(v).item()).transpose()?.unwrap_or(0.0);
        terms.load = l_load.map(|v| g.value(v).item()).transpose()?.unwrap_or(0.0);
        terms.total = g.value(total).item()?;
        let grads = if grads {
            g.backward(total, GradMode::Reset)?;
            Some(binder.grads(&g))
        } else {
            None
        };
        Ok(Evaluation {
            terms,
            grads,
            expert_evals: out.counter.total(),
        })
    }
}

/// SplitMix64 finaliser; decorrelates per-step seeds.
pub fn mix_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stacked `T × NM` activation map of the clean gate for t = 1..T.
pub fn routing_map(network: &Network, store: &crate::network::params::ParamStore) -> Result<BinaryMap> {
    let ts: Vec<usize> = (1..=network.config.steps).collect();
    let states = network.gate_states(store, &ts)?;
    stack_activation_maps(&states)
}

/// Gate states for every timestep t = 1..T.
pub fn routing_states(network: &Network, store: &crate::network::params::ParamStore) -> Result<Vec<GateState>> {
    let ts: Vec<usize> = (1..=network.config.steps).collect();
    network.gate_states(store, &ts)
}

/// Prior loss of the clean gate at each t = 1..T under `assignment`.
pub fn prior_loss_by_t(
    network: &Network,
    store: &crate::network::params::ParamStore,
    prior: &PriorMask,
    assignment: &Assignment,
    scaling: PriorScaling,
) -> Result<Vec<f64>> {
    let cfg = &network.config;
    routing_states(network, store)?
        .iter()
        .enumerate()
        .map(|(i, s)| diffusion_prior_loss(s.p_tot(), assignment, prior.row(i + 1)?, cfg.blocks, cfg.top_k, scaling))
        .collect()
}

/// Step after which the routing map stays unchanged for `window` steps.
/// `changed[i]` says whether the map after step `i + 1` differs from the one
/// before it. The untouched initial map is not a routing decision, so runs
/// only count once the map has changed at least once; `None` if it never
/// changed or never settled.
pub fn stabilization_step(changed: &[bool], window: usize) -> Option<usize> {
    let first = changed.iter().position(|&c| c)?;
    let mut run = 0;
    for (i, &c) in changed.iter().enumerate().skip(first + 1) {
        if c {
            run = 0;
        } else {
            run += 1;
            if run == window {
                return Some(i + 1 - window);
            }
        }
    }
    None
}

#[derive(Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: ModelState,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    pub prior: Option<PriorMask>,
    pub assignment: Option<Assignment>,
    /// Number of completed optimisation steps.
    pub step: usize,
    data: Dataset,
    last_map: Option<BinaryMap>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let state = ModelState::new(config.effective_model(), &mut rng)?;
        let optimizer = AdamW::new(config.adam, &state.params);
        Self::assemble(config, state, optimizer, None, 0)
    }

    pub(crate) fn assemble(
        config: TrainConfig,
        state: ModelState,
        optimizer: AdamW,
        assignment: Option<Assignment>,
        step: usize,
    ) -> Result<Self> {
        let m = state.config().clone();
        let schedule = NoiseSchedule::cosine(m.steps, config.cosine_offset)?;
        let prior = if m.use_smoe {
            Some(if config.ablations.random_allocation {
                PriorMask::random_allocation(m.blocks, m.experts, m.top_k, m.steps, config.allocation_seed)?
            } else {
                PriorMask::build(m.blocks, m.experts, m.top_k, m.steps, config.prior_alpha)?
            })
        } else {
            None
        };
        let data = gen_dataset(config.dataset, config.data_size, config.data_seed);
        Ok(Self {
            config,
            state,
            optimizer,
            schedule,
            prior,
            assignment,
            step,
            data,
            last_map: None,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn network(&self) -> &Network {
        &self.state.network
    }

    /// Random draws for optimisation step `step` (0-based).
    pub fn batch(&self, step: usize) -> (Batch, u64) {
        let seed = mix_seed(self.config.seed, step as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.state.config();
        let b = self.config.batch_size;
        let pixels = m.pixels();
        let mut x0 = Vec::with_capacity(b * pixels);
        let mut labels = Vec::with_capacity(b);
        let mut t = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.gen_range(0..self.data.len());
            let img = &self.data.images[i];
            if self.config.hflip && rng.gen_bool(0.5) {
                x0.extend(hflip(img, self.data.size));
            } else {
                x0.extend_from_slice(img);
            }
            if let Some(l) = &self.data.labels {
                let drop = rng.gen_bool(self.config.class_dropout);
                labels.push(if drop { m.null_class() } else { l[i] });
            }
            t.push(rng.gen_range(1..=m.steps));
        }
        let noise = (0..b * pixels).map(|_| rng.sample(StandardNormal)).collect();
        let gate_seed = rng.gen();
        let batch = Batch {
            x0,
            t,
            noise,
            labels: m.conditional().then_some(labels),
            gate_seed,
        };
        (batch, seed)
    }

    fn current_map(&mut self) -> Result<Option<BinaryMap>> {
        if !self.state.config().use_smoe {
            return Ok(None);
        }
        if self.last_map.is_none() {
            self.last_map = Some(routing_map(&self.state.network, &self.state.params)?);
        }
        Ok(self.last_map.clone())
    }

    fn rematch(&mut self, map: &BinaryMap) -> Result<()> {
        let prior = self.prior.as_ref().expect("smoe model has a prior");
        if self.config.ablations.random_allocation {
            let mut a = Assignment::identity(map.cols());
            a.cost = assignment_cost(map, prior.map())?
                .iter()
                .enumerate()
                .map(|(i, r)| r[i])
                .sum();
            self.assignment = Some(a);
        } else {
            self.assignment = Some(hungarian(&assignment_cost(map, prior.map())?)?);
        }
        Ok(())
    }

    /// Run one optimisation step and report its metrics.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let step = self.step;
        let map_before = self.current_map()?;
        if let Some(map) = &map_before {
            if self.assignment.is_none() || step % self.config.match_every == 0 {
                self.rematch(map)?;
            }
        }
        let (batch, batch_seed) = self.batch(step);
        let ctx = LossContext {
            network: &self.state.network,
            config: &self.config,
            schedule: &self.schedule,
            prior: self.prior.as_ref(),
            assignment: self.assignment.as_ref(),
        };
        let eval = ctx.evaluate(&self.state.params, &batch, true)?;
        let terms = eval.terms;
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                step: step as u64 + 1,
                batch_seed,
                detail: format!("loss terms {terms:?} for timesteps {:?}", batch.t),
            });
        }
        let grads = eval.grads.expect("gradients requested");
        self.optimizer.update(&mut self.state.params, &grads)?;
        ema_update(&mut self.state.ema, &self.state.params, self.config.ema_decay)?;
        if !self.state.params.is_finite() {
            return Err(Error::Diverged {
                step: step as u64 + 1,
                batch_seed,
                detail: "non-finite parameters after update".into(),
            });
        }
        self.step += 1;

        let mut row = MetricsRow {
            step: self.step,
            loss_noise: terms.noise,
            loss_dp: terms.dp,
            loss_load: terms.load,
            loss_total: terms.total,
            match_cost: self.assignment.as_ref().map_or(0.0, |a| a.cost),
            expert_evals: eval.expert_evals as f64 / batch.len() as f64,
            routing_changed: false,
            ema_hamming: 0,
            prior_hamming: 0,
            batch_seed,
        };
        if let Some(before) = map_before {
            let after = routing_map(&self.state.network, &self.state.params)?;
            let ema_map = routing_map(&self.state.network, &self.state.ema)?;
            row.routing_changed = after != before;
            row.ema_hamming = after.hamming(&ema_map)?;
            row.prior_hamming = self.permuted_prior()?.map_or(0, |p| after.hamming(&p).unwrap_or(usize::MAX));
            self.last_map = Some(after);
        }
        Ok(row)
    }

    /// Prior map with columns rearranged into gate-column order under the
    /// current assignment.
    pub fn permuted_prior(&self) -> Result<Option<BinaryMap>> {
        match (&self.prior, &self.assignment) {
            (Some(p), Some(a)) => Ok(Some(permute_columns(p.map(), &a.inverse())?)),
            _ => Ok(None),
        }
    }

    /// Train until `config.steps` steps are done, passing each row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let row = self.train_step()?;
            sink(&row)?;
        }
        Ok(())
    }
}
