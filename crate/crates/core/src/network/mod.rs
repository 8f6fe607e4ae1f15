//! Toy DiT-style noise predictor with a timestep-gated SMoE layer in front
//! of every transformer block.

pub mod params;
pub mod patch;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{sinusoidal_embedding, GateState};
use crate::smoe::{integrate_graph, smoe_forward_graph, ExpertBank, ExpertCounter, IntegrationMode};
use crate::tensor::{Graph, Tensor, Var};
use params::{Binder, Init, ParamId, ParamLayout, ParamStore};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub steps: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Number of classes; 0 for an unconditional model.
    pub classes: usize,
    pub mlp_ratio: usize,
    pub mode: IntegrationMode,
    pub renorm_gates: bool,
    pub noisy_gating: bool,
    /// `false` builds the plain DiT baseline without gating or experts.
    pub use_smoe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            dim: 64,
            heads: 4,
            experts: 3,
            top_k: 2,
            steps: 100,
            image_size: 16,
            patch: 4,
            classes: 0,
            mlp_ratio: 4,
            mode: IntegrationMode::MaskSkipInit,
            renorm_gates: true,
            noisy_gating: false,
            use_smoe: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("blocks, dim, heads and mlp_ratio must be positive".into());
        }
        if self.dim % 4 != 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be divisible by 4 and by heads {}", self.dim, self.heads));
        }
        if self.top_k == 0 || self.top_k >= self.experts {
            return bad(format!("need 1 <= k < M, got k={} M={}", self.top_k, self.experts));
        }
        if self.steps < 2 {
            return bad("T must be at least 2".into());
        }
        patch::token_count(self.image_size, self.image_size, self.patch)?;
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn conditional(&self) -> bool {
        self.classes > 0
    }

    /// Label index used for the unconditional branch of guidance.
    pub fn null_class(&self) -> usize {
        self.classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

impl LinearIds {
    fn declare(layout: &mut ParamLayout, name: &str, out: usize, inp: usize, init: Init) -> Self {
        Self {
            w: layout.add(format!("{name}.w"), vec![out, inp], init),
            b: layout.add(format!("{name}.b"), vec![out], Init::Zeros),
        }
    }

    fn apply(&self, g: &mut Graph, binder: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (w, b) = (binder.var(g, self.w), binder.var(g, self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    gate: Option<LinearIds>,
    noise: Option<LinearIds>,
    /// shift, scale, gate for attention, then for the feedforward.
    ada: [LinearIds; 6],
    qkv: LinearIds,
    proj: LinearIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

/// Network architecture: configuration plus the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    layout: ParamLayout,
    patch_embed: LinearIds,
    t_fc1: LinearIds,
    t_fc2: LinearIds,
    label: Option<ParamId>,
    blocks: Vec<BlockIds>,
    final_ada: [LinearIds; 2],
    head: LinearIds,
    bank: Option<ExpertBank>,
}

/// Per-forward switches.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Treat every SMoE layer as absent (block input `z`, no skip term).
    pub bypass_smoe: bool,
    /// Source of gate noise for the noisy-gating ablation; `None` evaluates
    /// the clean gate.
    pub gate_noise: Option<&'r mut dyn rand::RngCore>,
}

/// Graph handles produced by [`Network::forward`].
#[derive(Debug)]
pub struct ForwardOutput {
    /// Predicted noise, `[batch, pixels]`.
    pub eps: Var,
    /// Per-block gate probabilities `[batch, M]`.
    pub probs: Vec<Var>,
    /// Per-block sparse gates `[batch, M]`.
    pub gates: Vec<Var>,
    pub counter: ExpertCounter,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut l = ParamLayout::default();
        let pp = config.patch * config.patch;
        let patch_embed = LinearIds::declare(&mut l, "patch_embed", d, pp, Init::Xavier);
        let t_fc1 = LinearIds::declare(&mut l, "t_embed.fc1", d, d, Init::Normal(0.02));
        let t_fc2 = LinearIds::declare(&mut l, "t_embed.fc2", d, d, Init::Normal(0.02));
        let label = config
            .conditional()
            .then(|| l.add("label_embed", vec![config.classes + 1, d], Init::Normal(0.02)));
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("blocks.{i}");
                let gate = config
                    .use_smoe
                    .then(|| LinearIds::declare(&mut l, &format!("{p}.gate"), config.experts, d, Init::Zeros));
                let noise = (config.use_smoe && config.noisy_gating)
                    .then(|| LinearIds::declare(&mut l, &format!("{p}.gate_noise"), config.experts, d, Init::Zeros));
                let ada = std::array::from_fn(|j| LinearIds::declare(&mut l, &format!("{p}.ada{j}"), d, d, Init::Zeros));
                BlockIds {
                    gate,
                    noise,
                    ada,
                    qkv: LinearIds::declare(&mut l, &format!("{p}.qkv"), 3 * d, d, Init::Xavier),
                    proj: LinearIds::declare(&mut l, &format!("{p}.proj"), d, d, Init::Xavier),
                    fc1: LinearIds::declare(&mut l, &format!("{p}.fc1"), config.mlp_ratio * d, d, Init::Xavier),
                    fc2: LinearIds::declare(&mut l, &format!("{p}.fc2"), d, config.mlp_ratio * d, Init::Xavier),
                }
            })
            .collect();
        let bank = config
            .use_smoe
            .then(|| ExpertBank::declare(&mut l, config.blocks, config.experts, d, config.mode.identity_init()));
        let final_ada = std::array::from_fn(|j| LinearIds::declare(&mut l, &format!("final.ada{j}"), d, d, Init::Zeros));
        let head = LinearIds::declare(&mut l, "final.head", pp, d, Init::Zeros);
        Ok(Self {
            config,
            layout: l,
            patch_embed,
            t_fc1,
            t_fc2,
            label,
            blocks,
            final_ada,
            head,
            bank,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn expert_bank(&self) -> Option<&ExpertBank> {
        self.bank.as_ref()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        self.layout.init(rng)
    }

    /// Whether parameter `name` belongs to the gating networks.
    pub fn is_gate_param(name: &str) -> bool {
        name.contains(".gate.") || name.contains(".gate_noise.")
    }

    pub fn is_expert_param(name: &str) -> bool {
        name.contains(".experts.")
    }

    /// Overwrite every parameter whose name satisfies `select` with
    /// N(0, std²) draws.
    pub fn randomize<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
        std: f64,
        select: impl Fn(&str) -> bool,
    ) {
        for (i, spec) in self.layout.specs().iter().enumerate() {
            if select(&spec.name) {
                for v in store.get_mut(ParamId(i)).data_mut() {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    /// e_t for each timestep: sinusoidal features through a two-layer MLP.
    fn timestep_embed(&self, g: &mut Graph, binder: &mut Binder<'_>, t: &[usize]) -> Result<Var> {
        let d = self.config.dim;
        let mut raw = Vec::with_capacity(t.len() * d);
        for &ti in t {
            raw.extend(sinusoidal_embedding(ti, d)?);
        }
        let raw = g.constant(Tensor::new(vec![t.len(), d], raw)?);
        let h = self.t_fc1.apply(g, binder, raw)?;
        let h = g.silu(h);
        self.t_fc2.apply(g, binder, h)
    }

    fn gate<'n>(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        block: usize,
        e: Var,
        noise: Option<&mut (dyn rand::RngCore + 'n)>,
    ) -> Result<Option<(Var, Var)>> {
        let ids = &self.blocks[block];
        let Some(gate) = ids.gate else {
            return Ok(None);
        };
        let mut logits = gate.apply(g, binder, e)?;
        if let (Some(nl), Some(rng)) = (ids.noise, noise) {
            let scale = nl.apply(g, binder, e)?;
            let scale = g.softplus(scale);
            let shape = g.shape(scale).to_vec();
            let n: usize = shape.iter().product();
            let draws: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let eps = g.constant(Tensor::new(shape, draws)?);
            let jitter = g.mul(scale, eps)?;
            logits = g.add(logits, jitter)?;
        }
        let probs = g.softmax_rows(logits)?;
        let gates = g.top_k_gate(probs, self.config.top_k, self.config.renorm_gates)?;
        Ok(Some((probs, gates)))
    }

    fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = g.layer_norm_rows(x, LN_EPS)?;
        let s1 = g.add_scalar(scale, 1.0);
        let h = g.mul(h, s1)?;
        g.add(h, shift)
    }

    /// One transformer block with adaLN-Zero conditioning on `c_act`
    /// (already passed through SiLU). `x` is `[batch·tokens, dim]`.
    fn block(&self, g: &mut Graph, binder: &mut Binder<'_>, i: usize, x: Var, c_act: Var, batch: usize) -> Result<Var> {
        let ids = &self.blocks[i];
        let tokens = self.config.tokens();
        let mut m = Vec::with_capacity(6);
        for lin in &ids.ada {
            let v = lin.apply(g, binder, c_act)?;
            m.push(g.broadcast_rows(v, tokens)?);
        }
        let h = Self::modulate(g, x, m[0], m[1])?;
        let qkv = ids.qkv.apply(g, binder, h)?;
        let a = g.attention(qkv, batch, self.config.heads)?;
        let a = ids.proj.apply(g, binder, a)?;
        let a = g.mul(m[2], a)?;
        let x = g.add(x, a)?;
        let h = Self::modulate(g, x, m[3], m[4])?;
        let f = ids.fc1.apply(g, binder, h)?;
        let f = g.silu(f);
        let f = ids.fc2.apply(g, binder, f)?;
        let f = g.mul(m[5], f)?;
        g.add(x, f)
    }

    /// ε̂(x_t, t, y). `x` is `[batch, pixels]` row-major, `t` the model
    /// timestep per sample and `y` the class per sample (the null class
    /// selects the unconditional branch).
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        x: Var,
        t: &[usize],
        y: Option<&[usize]>,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let batch = t.len();
        let (rows, pixels) = g.value(x).as_matrix();
        if rows != batch || pixels != cfg.pixels() || batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                lhs: g.shape(x).to_vec(),
                rhs: vec![batch, cfg.pixels()],
            });
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > cfg.steps) {
            return Err(Error::TimestepOutOfRange { t: bad, max: cfg.steps });
        }
        let tokens = cfg.tokens();
        let pp = cfg.patch * cfg.patch;
        let s = cfg.image_size;

        let idx = patch::patchify_index(s, s, cfg.patch, batch)?;
        let patches = g.gather(x, idx, vec![batch * tokens, pp])?;
        let mut z = self.patch_embed.apply(g, binder, patches)?;
        let grid = s / cfg.patch;
        let pos = patch::pos_embedding(grid, grid, cfg.dim)?;
        let pos = g.constant(Tensor::new(vec![batch * tokens, cfg.dim], pos.repeat(batch))?);
        z = g.add(z, pos)?;

        let e = self.timestep_embed(g, binder, t)?;
        let mut cond = e;
        match (self.label, y) {
            (Some(id), Some(y)) => {
                if y.len() != batch || y.iter().any(|&c| c > cfg.classes) {
                    return Err(Error::InvalidArgument(format!(
                        "labels must be {batch} values in 0..={}",
                        cfg.classes
                    )));
                }
                let table = binder.var(g, id);
                let emb = g.gather_rows(table, y.to_vec())?;
                cond = g.add(cond, emb)?;
            }
            (Some(id), None) => {
                let table = binder.var(g, id);
                let emb = g.gather_rows(table, vec![cfg.null_class(); batch])?;
                cond = g.add(cond, emb)?;
            }
            (None, Some(_)) => {
                return Err(Error::InvalidArgument("labels given to an unconditional model".into()));
            }
            (None, None) => {}
        }
        let c_act = g.silu(cond);

        let mut counter = ExpertCounter::new(cfg.blocks, cfg.experts);
        let mut probs = Vec::new();
        let mut gates = Vec::new();
        let mut noise = opts.gate_noise;
        for i in 0..cfg.blocks {
            let gated = self.gate(g, binder, i, e, noise.as_deref_mut())?;
            let (input, skip) = match (&self.bank, gated) {
                (Some(bank), Some((p, gt))) => {
                    probs.push(p);
                    gates.push(gt);
                    if opts.bypass_smoe {
                        (z, None)
                    } else {
                        let m = smoe_forward_graph(g, binder, bank, i, z, gt, &mut counter)?;
                        integrate_graph(g, z, m, cfg.mode)?
                    }
                }
                _ => (z, None),
            };
            let out = self.block(g, binder, i, input, c_act, batch)?;
            z = match skip {
                Some(s) => g.add(out, s)?,
                None => out,
            };
        }

        let shift = self.final_ada[0].apply(g, binder, c_act)?;
        let shift = g.broadcast_rows(shift, tokens)?;
        let scale = self.final_ada[1].apply(g, binder, c_act)?;
        let scale = g.broadcast_rows(scale, tokens)?;
        let h = Self::modulate(g, z, shift, scale)?;
        let out = self.head.apply(g, binder, h)?;
        let inv = patch::unpatchify_index(s, s, cfg.patch, batch)?;
        let eps = g.gather(out, inv, vec![batch, cfg.pixels()])?;
        Ok(ForwardOutput {
            eps,
            probs,
            gates,
            counter,
        })
    }

    /// Noise prediction without gradient tracking.
    pub fn predict_noise(
        &self,
        store: &ParamStore,
        x: &Tensor,
        t: &[usize],
        y: Option<&[usize]>,
    ) -> Result<(Tensor, Vec<GateState>)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &mut binder, xv, t, y, ForwardOptions::default())?;
        let states = self.collect_states(&g, &out.probs, &out.gates, t.len())?;
        Ok((g.value(out.eps).clone(), states))
    }

    /// Clean gating outputs for each timestep in `t`.
    pub fn gate_states(&self, store: &ParamStore, t: &[usize]) -> Result<Vec<GateState>> {
        if self.bank.is_none() {
            return Err(Error::InvalidArgument("model has no gating network".into()));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(store, false);
        let e = self.timestep_embed(&mut g, &mut binder, t)?;
        let mut probs = Vec::new();
        let mut gates = Vec::new();
        for i in 0..self.config.blocks {
            if let Some((p, gt)) = self.gate(&mut g, &mut binder, i, e, None)? {
                probs.push(p);
                gates.push(gt);
            }
        }
        self.collect_states(&g, &probs, &gates, t.len())
    }

    fn collect_states(&self, g: &Graph, probs: &[Var], gates: &[Var], batch: usize) -> Result<Vec<GateState>> {
        if probs.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.config.experts;
        (0..batch)
            .map(|b| {
                let mut p = Vec::with_capacity(self.config.blocks * m);
                let mut q = Vec::with_capacity(self.config.blocks * m);
                for (pv, gv) in probs.iter().zip(gates) {
                    p.extend_from_slice(&g.value(*pv).data()[b * m..(b + 1) * m]);
                    q.extend_from_slice(&g.value(*gv).data()[b * m..(b + 1) * m]);
                }
                GateState::from_parts(p, q, m, self.config.top_k)
            })
            .collect()
    }
}

/// Online parameters, their EMA shadow and the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub network: Network,
    pub params: ParamStore,
    pub ema: ParamStore,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let network = Network::new(config)?;
        let params = network.init_params(rng);
        let ema = params.clone();
        Ok(Self { network, params, ema })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            dim: 16,
            heads: 2,
            image_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = ModelState::new(small(), &mut rng).unwrap();
        let x = Tensor::new(vec![3, 64], (0..192).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (eps, states) = st.network.predict_noise(&st.params, &x, &[1, 50, 100], None).unwrap();
        assert_eq!(eps.shape(), &[3, 64]);
        assert!(eps.data().iter().all(|v| *v == 0.0));
        assert_eq!(states.len(), 3);
        for s in &states {
            assert_eq!(s.activation_map().unwrap(), vec![1, 1, 0, 1, 1, 0]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = ModelState::new(small(), &mut rng).unwrap();
        let x = Tensor::zeros(vec![1, 64]);
        assert!(st.network.predict_noise(&st.params, &x, &[0], None).is_err());
        assert!(st.network.predict_noise(&st.params, &x, &[1, 2], None).is_err());
        assert!(st.network.predict_noise(&st.params, &x, &[1], Some(&[0])).is_err());
        let bad = ModelConfig { top_k: 3, ..small() };
        assert!(Network::new(bad).is_err());
    }
}
