//! Per-block sparse mixture of experts and its integration with a
//! transformer block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::params::{Binder, Init, ParamId, ParamLayout, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// How the SMoE output `m(z)` enters the transformer block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegrationMode {
    /// Block input is `m(z)`.
    Direct,
    /// Block input is `z ⊙ m(z)`.
    Mask,
    /// Block input is `z ⊙ m(z)`; `z ⊙ (1 − m(z))` is added to the block output.
    MaskSkip,
    /// `MaskSkip` with experts initialised so that `m(z) ≡ 1`.
    #[default]
    MaskSkipInit,
}

impl IntegrationMode {
    pub const ALL: [Self; 4] = [Self::Direct, Self::Mask, Self::MaskSkip, Self::MaskSkipInit];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Mask => "mask",
            Self::MaskSkip => "mask-skip",
            Self::MaskSkipInit => "mask-skip-init",
        }
    }

    pub fn identity_init(self) -> bool {
        self == Self::MaskSkipInit
    }

    pub fn has_skip(self) -> bool {
        matches!(self, Self::MaskSkip | Self::MaskSkipInit)
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntegrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown integration mode '{s}'")))
    }
}

/// Parameters of one expert MLP: `dim → hidden → dim` with SiLU, plus a
/// constant output offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub offset: ParamId,
}

/// Experts of every block, `experts[block][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub dim: usize,
    pub hidden: usize,
    pub experts: Vec<Vec<ExpertParams>>,
}

impl ExpertBank {
    pub fn declare(layout: &mut ParamLayout, blocks: usize, experts: usize, dim: usize, identity: bool) -> Self {
        let hidden = 2 * dim;
        let (out_init, offset_init) = if identity {
            (Init::Zeros, Init::Ones)
        } else {
            (Init::Xavier, Init::Zeros)
        };
        let experts = (0..blocks)
            .map(|b| {
                (0..experts)
                    .map(|j| {
                        let p = format!("blocks.{b}.experts.{j}");
                        ExpertParams {
                            w1: layout.add(format!("{p}.w1"), vec![hidden, dim], Init::Xavier),
                            b1: layout.add(format!("{p}.b1"), vec![hidden], Init::Zeros),
                            w2: layout.add(format!("{p}.w2"), vec![dim, hidden], out_init),
                            b2: layout.add(format!("{p}.b2"), vec![dim], Init::Zeros),
                            offset: layout.add(format!("{p}.offset"), vec![dim], offset_init),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { dim, hidden, experts }
    }

    pub fn blocks(&self) -> usize {
        self.experts.len()
    }

    pub fn experts_per_block(&self) -> usize {
        self.experts.first().map_or(0, Vec::len)
    }

    /// Zero every expert's output layer and set its offset to one, so each
    /// expert outputs the all-ones vector.
    pub fn init_experts_identity(&self, store: &mut ParamStore) {
        for e in self.experts.iter().flatten() {
            store.get_mut(e.w2).data_mut().fill(0.0);
            store.get_mut(e.b2).data_mut().fill(0.0);
            store.get_mut(e.offset).data_mut().fill(1.0);
        }
    }
}

/// Number of expert evaluations, indexed `[block][expert]`, counted per sample.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpertCounter {
    counts: Vec<Vec<usize>>,
}

impl ExpertCounter {
    pub fn new(blocks: usize, experts: usize) -> Self {
        Self {
            counts: vec![vec![0; experts]; blocks],
        }
    }

    fn add(&mut self, block: usize, expert: usize, n: usize) {
        if self.counts.len() <= block {
            self.counts.resize(block + 1, Vec::new());
        }
        let row = &mut self.counts[block];
        if row.len() <= expert {
            row.resize(expert + 1, 0);
        }
        row[expert] += n;
    }

    pub fn get(&self, block: usize, expert: usize) -> usize {
        self.counts.get(block).and_then(|r| r.get(expert)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }
}

fn expert_graph(g: &mut Graph, binder: &mut Binder<'_>, e: &ExpertParams, x: Var) -> Result<Var> {
    let (w1, b1) = (binder.var(g, e.w1), binder.var(g, e.b1));
    let (w2, b2, off) = (binder.var(g, e.w2), binder.var(g, e.b2), binder.var(g, e.offset));
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.silu(h);
    let bias = g.add(b2, off)?;
    g.linear(h, w2, Some(bias))
}

/// Graph form of `m(z) = Σ_{j: g_j > 0} g_j · E_j(z)` for a batch. `z` is
/// `[batch·tokens, dim]` and `gates` is `[batch, M]`; expert `j` only sees
/// the token rows of samples whose gate for `j` is positive.
pub fn smoe_forward_graph(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    bank: &ExpertBank,
    block: usize,
    z: Var,
    gates: Var,
    counter: &mut ExpertCounter,
) -> Result<Var> {
    let experts = bank
        .experts
        .get(block)
        .ok_or_else(|| Error::InvalidArgument(format!("block {block} out of range")))?;
    let (rows, dim) = g.value(z).as_matrix();
    let (batch, m) = g.value(gates).as_matrix();
    if dim != bank.dim || m != experts.len() || batch == 0 || rows % batch != 0 {
        return Err(Error::ShapeMismatch {
            op: "smoe_forward",
            lhs: g.shape(z).to_vec(),
            rhs: vec![batch, m, bank.dim],
        });
    }
    let tokens = rows / batch;
    let gv = g.value(gates).data().to_vec();
    let mut out: Option<Var> = None;
    for (j, e) in experts.iter().enumerate() {
        let samples: Vec<usize> = (0..batch).filter(|&b| gv[b * m + j] > 0.0).collect();
        if samples.is_empty() {
            continue;
        }
        counter.add(block, j, samples.len());
        let token_rows: Vec<usize> = samples.iter().flat_map(|&b| b * tokens..(b + 1) * tokens).collect();
        let x = g.gather_rows(z, token_rows.clone())?;
        let y = expert_graph(g, binder, e, x)?;
        let n = samples.len();
        let w = g.gather(gates, samples.iter().map(|&b| b * m + j).collect(), vec![n])?;
        let y = g.scale_row_groups(y, w)?;
        let y = g.scatter_rows(y, token_rows, rows)?;
        out = Some(match out {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    match out {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::zeros(vec![rows, dim]))),
    }
}

/// Single-sample `m(z)` for `z: [tokens, dim]` and one block's gate vector.
pub fn smoe_forward(
    z: &Tensor,
    gate: &[f64],
    bank: &ExpertBank,
    store: &ParamStore,
    block: usize,
    counter: &mut ExpertCounter,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut binder = Binder::new(store, false);
    let zv = g.constant(z.clone());
    let gv = g.constant(Tensor::new(vec![1, gate.len()], gate.to_vec())?);
    let out = smoe_forward_graph(&mut g, &mut binder, bank, block, zv, gv, counter)?;
    Ok(g.value(out).clone())
}

/// Block input and optional skip term for `mode`.
pub fn integrate(z: &Tensor, m: &Tensor, mode: IntegrationMode) -> Result<(Tensor, Option<Tensor>)> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let mv = g.constant(m.clone());
    let (input, skip) = integrate_graph(&mut g, zv, mv, mode)?;
    Ok((g.value(input).clone(), skip.map(|s| g.value(s).clone())))
}

/// Graph form of [`integrate`].
pub fn integrate_graph(g: &mut Graph, z: Var, m: Var, mode: IntegrationMode) -> Result<(Var, Option<Var>)> {
    if g.shape(z) != g.shape(m) {
        return Err(Error::ShapeMismatch {
            op: "integrate",
            lhs: g.shape(z).to_vec(),
            rhs: g.shape(m).to_vec(),
        });
    }
    Ok(match mode {
        IntegrationMode::Direct => (m, None),
        IntegrationMode::Mask => (g.mul(z, m)?, None),
        IntegrationMode::MaskSkip | IntegrationMode::MaskSkipInit => {
            let input = g.mul(z, m)?;
            let neg = g.scale(m, -1.0);
            let rest = g.add_scalar(neg, 1.0);
            (input, Some(g.mul(z, rest)?))
        }
    })
}
