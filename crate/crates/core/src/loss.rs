//! Divergence-based routing losses: Jensen–Shannon divergence, the
//! matched prior loss, the weighted total and the importance-balancing
//! ablation.

use serde::{Deserialize, Serialize};

use crate::ablation::Ablations;
use crate::error::{Error, Result};
use crate::matching::{permute_probs, Assignment};
use crate::tensor::jsd_value;
use crate::tensor::{Graph, Var};

/// How a prior row with more than kN ones is turned into the JSD target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorScaling {
    /// Divide by the row's actual popcount so the target sums to one.
    #[default]
    Renormalize,
    /// Divide by kN exactly, leaving surplus rows slightly above one.
    KnScale,
}

/// How per-timestep prior losses in a batch are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorAggregation {
    /// One term per distinct timestep in the batch.
    #[default]
    UniqueT,
    /// One term per sample, so repeated timesteps weigh more.
    PerSample,
}

fn check_distribution(name: &str, v: &[f64]) -> Result<f64> {
    if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("{name} sums to {s}, not 1")));
    }
    Ok(s)
}

/// Jensen–Shannon divergence in nats. Both inputs must be distributions to
/// within 1e-6 and are renormalised to sum to exactly one.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "jsd",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let sp = check_distribution("P", p)?;
    let sq = check_distribution("Q", q)?;
    let pn: Vec<f64> = p.iter().map(|x| x / sp).collect();
    let qn: Vec<f64> = q.iter().map(|x| x / sq).collect();
    Ok(jsd_value(&pn, &qn).clamp(0.0, std::f64::consts::LN_2))
}

/// Target distribution for one prior row: w/(kN), renormalised per `scaling`.
pub fn prior_target(row: &[u8], blocks: usize, top_k: usize, scaling: PriorScaling) -> Result<Vec<f64>> {
    let ones = row.iter().filter(|&&b| b == 1).count();
    if ones == 0 {
        return Err(Error::InvalidArgument("prior row has no active expert".into()));
    }
    let denom = match scaling {
        PriorScaling::Renormalize => ones as f64,
        PriorScaling::KnScale => (top_k * blocks) as f64,
    };
    Ok(row.iter().map(|&b| f64::from(b) / denom).collect())
}

/// L_dp,t = JSD(p̃_tot/N ‖ target(w^prior_t)).
pub fn diffusion_prior_loss(
    p_tot: &[f64],
    assignment: &Assignment,
    prior_row: &[u8],
    blocks: usize,
    top_k: usize,
    scaling: PriorScaling,
) -> Result<f64> {
    if prior_row.len() != p_tot.len() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_prior_loss",
            lhs: vec![p_tot.len()],
            rhs: vec![prior_row.len()],
        });
    }
    let permuted = permute_probs(p_tot, assignment)?;
    let p: Vec<f64> = permuted.iter().map(|x| x / blocks as f64).collect();
    let q = prior_target(prior_row, blocks, top_k, scaling)?;
    match scaling {
        PriorScaling::Renormalize => jsd(&p, &q),
        PriorScaling::KnScale => Ok(jsd_value(&p, &q)),
    }
}

/// Graph form of [`diffusion_prior_loss`] for one timestep. `p_flat` holds
/// every block's probabilities and `index[j]` is the flat position of the
/// gate column mapped onto prior column `j`.
pub fn diffusion_prior_loss_graph(
    g: &mut Graph,
    p_flat: Var,
    index: Vec<usize>,
    target: &[f64],
    blocks: usize,
) -> Result<Var> {
    let n = index.len();
    let permuted = g.gather(p_flat, index, vec![n])?;
    let p = g.scale(permuted, 1.0 / blocks as f64);
    let q = g.constant(crate::tensor::Tensor::vector(target));
    g.jsd(p, q)
}

/// L = L_noise + λ_dp · L_dp.
pub fn total_loss(noise: f64, prior: f64, lambda_dp: f64) -> f64 {
    noise + lambda_dp * prior
}

/// Squared coefficient of variation of per-expert probability mass summed
/// over the batch, added over blocks. `probs[block][sample][expert]`.
pub fn load_balance_loss(probs: &[Vec<Vec<f64>>], ablations: &Ablations) -> Result<f64> {
    if !ablations.load_balance {
        return Err(Error::AblationDisabled("load-balancing loss"));
    }
    let mut total = 0.0;
    for block in probs {
        let m = block.first().map_or(0, Vec::len);
        if m == 0 {
            continue;
        }
        let mut importance = vec![0.0; m];
        for row in block {
            for (acc, p) in importance.iter_mut().zip(row) {
                *acc += p;
            }
        }
        let mean = importance.iter().sum::<f64>() / m as f64;
        let var = importance.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
        if mean > 0.0 {
            total += var / (mean * mean);
        }
    }
    Ok(total)
}

/// Graph form of the CV² importance loss for one block's `[batch, experts]`
/// probabilities.
pub fn load_balance_graph(g: &mut Graph, probs: Var) -> Result<Var> {
    let (b, _) = g.value(probs).as_matrix();
    let ones = g.constant(crate::tensor::Tensor::ones(vec![1, b]));
    let importance = g.matmul(ones, probs)?;
    let mean = g.mean(importance)?;
    let centered = g.sub(importance, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq)?;
    let mean_sq = g.mul(mean, mean)?;
    g.div(var, mean_sq)
}
