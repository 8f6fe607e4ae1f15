//! Timestep gating: sinusoidal embeddings, per-block softmax probabilities,
//! sparse TopK selection and the derived task-expert activation maps.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ablation::Ablations;
use crate::error::{Error, Result};
use crate::prior::BinaryMap;
use crate::tensor::{softmax_in_place, softplus, top_k_indices};

/// Base period of the sinusoidal frequencies.
pub const MAX_PERIOD: f64 = 10_000.0;

/// Raw sinusoidal embedding of integer `t`: `[cos(t·f_0..), sin(t·f_0..)]`
/// with `f_i = MAX_PERIOD^(−i/(dim/2))`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-MAX_PERIOD.ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Ok(out)
}

/// Softmax of one block's gate logits.
pub fn gate_probs(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Keep the `k` largest entries of `p` (lowest index wins ties) and zero the rest.
pub fn topk_select(p: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > p.len() {
        return Err(Error::InvalidArgument(format!("top-k with k={k} over {} experts", p.len())));
    }
    let mut g = vec![0.0; p.len()];
    for j in top_k_indices(p, k) {
        g[j] = p[j];
    }
    Ok(g)
}

/// Divide the retained entries by their sum.
pub fn renormalize(g: &mut [f64]) {
    let s: f64 = g.iter().sum();
    if s > 0.0 {
        g.iter_mut().for_each(|v| *v /= s);
    }
}

/// Noisy TopK: `TopK(Softmax(h + softplus(noise_logits)·ε), k)` with ε ~ N(0, 1).
/// Only available with the noisy-gating ablation enabled.
pub fn noisy_topk<R: Rng + ?Sized>(
    clean_logits: &[f64],
    noise_logits: &[f64],
    k: usize,
    renorm: bool,
    ablations: &Ablations,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !ablations.noisy_gating {
        return Err(Error::AblationDisabled("noisy gating"));
    }
    if clean_logits.len() != noise_logits.len() {
        return Err(Error::ShapeMismatch {
            op: "noisy_topk",
            lhs: vec![clean_logits.len()],
            rhs: vec![noise_logits.len()],
        });
    }
    let noisy: Vec<f64> = clean_logits
        .iter()
        .zip(noise_logits)
        .map(|(h, s)| {
            let e: f64 = rng.sample(StandardNormal);
            h + softplus(*s) * e
        })
        .collect();
    let mut g = topk_select(&gate_probs(&noisy), k)?;
    if renorm {
        renormalize(&mut g);
    }
    Ok(g)
}

/// `1[g_tot > 0]`, checking that every block keeps exactly `k` experts.
pub fn activation_map(g_tot: &[f64], experts: usize, top_k: usize) -> Result<Vec<u8>> {
    if experts == 0 || g_tot.len() % experts != 0 {
        return Err(Error::InvalidArgument(format!(
            "g_tot of length {} is not a whole number of {experts}-expert blocks",
            g_tot.len()
        )));
    }
    let w: Vec<u8> = g_tot.iter().map(|&v| u8::from(v > 0.0)).collect();
    for (b, block) in w.chunks(experts).enumerate() {
        let on = block.iter().filter(|&&x| x == 1).count();
        if on != top_k {
            return Err(Error::InvalidArgument(format!(
                "block {b} has {on} active experts, expected {top_k}"
            )));
        }
    }
    Ok(w)
}

/// Gating outputs of all blocks for one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub blocks: usize,
    pub experts: usize,
    pub top_k: usize,
    probs: Vec<f64>,
    gates: Vec<f64>,
}

impl GateState {
    /// From per-block logits laid out block-major (`N·M` values).
    pub fn from_logits(logits: &[f64], experts: usize, top_k: usize, renorm: bool) -> Result<Self> {
        if experts == 0 || logits.len() % experts != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} logits for {experts} experts per block",
                logits.len()
            )));
        }
        let mut probs = Vec::with_capacity(logits.len());
        let mut gates = Vec::with_capacity(logits.len());
        for block in logits.chunks(experts) {
            let p = gate_probs(block);
            let mut g = topk_select(&p, top_k)?;
            if renorm {
                renormalize(&mut g);
            }
            probs.extend(p);
            gates.extend(g);
        }
        Self::from_parts(probs, gates, experts, top_k)
    }

    pub fn from_parts(probs: Vec<f64>, gates: Vec<f64>, experts: usize, top_k: usize) -> Result<Self> {
        if probs.len() != gates.len() || experts == 0 || probs.len() % experts != 0 {
            return Err(Error::ShapeMismatch {
                op: "gate_state",
                lhs: vec![probs.len()],
                rhs: vec![gates.len()],
            });
        }
        Ok(Self {
            blocks: probs.len() / experts,
            experts,
            top_k,
            probs,
            gates,
        })
    }

    /// p_tot: concatenated block probabilities, summing to N.
    pub fn p_tot(&self) -> &[f64] {
        &self.probs
    }

    /// g_tot: concatenated sparse gate outputs.
    pub fn g_tot(&self) -> &[f64] {
        &self.gates
    }

    pub fn block_probs(&self, block: usize) -> &[f64] {
        &self.probs[block * self.experts..(block + 1) * self.experts]
    }

    pub fn block_gates(&self, block: usize) -> &[f64] {
        &self.gates[block * self.experts..(block + 1) * self.experts]
    }

    pub fn activation_map(&self) -> Result<Vec<u8>> {
        activation_map(&self.gates, self.experts, self.top_k)
    }
}

/// Stack per-timestep activation rows (t = 1..T in order) into a `T × NM` map.
pub fn stack_activation_maps(states: &[GateState]) -> Result<BinaryMap> {
    let rows = states.iter().map(GateState::activation_map).collect::<Result<Vec<_>>>()?;
    BinaryMap::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_norm_and_parity() {
        assert!(sinusoidal_embedding(3, 7).is_err());
        for t in [1, 17, 999] {
            let e = sinusoidal_embedding(t, 64).unwrap();
            let n2: f64 = e.iter().map(|x| x * x).sum();
            assert!((n2 - 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_examples() {
        let third = 1.0 / 3.0;
        assert_eq!(topk_select(&[third; 3], 2).unwrap(), vec![third, third, 0.0]);
        assert_eq!(topk_select(&[0.5, 0.2, 0.3], 2).unwrap(), vec![0.5, 0.0, 0.3]);
        assert_eq!(topk_select(&[0.5, 0.2, 0.3], 3).unwrap(), vec![0.5, 0.2, 0.3]);
        assert!(topk_select(&[1.0], 2).is_err());
    }

    #[test]
    fn closed_form_softmax() {
        let p = gate_probs(&[0.7, 0.7, 0.7 + 2f64.ln()]);
        for (a, b) in p.iter().zip([0.25, 0.25, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn noisy_requires_flag_and_vanishes_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.3, -0.2, 0.9];
        assert!(matches!(
            noisy_topk(&logits, &[0.0; 3], 2, false, &Ablations::default(), &mut rng),
            Err(Error::AblationDisabled(_))
        ));
        let on = Ablations {
            noisy_gating: true,
            ..Default::default()
        };
        let g = noisy_topk(&logits, &[-800.0; 3], 2, false, &on, &mut rng).unwrap();
        assert_eq!(g, topk_select(&gate_probs(&logits), 2).unwrap());
    }

    #[test]
    fn activation_map_checks_counts() {
        let third = 1.0 / 3.0;
        let g: Vec<f64> = [third, third, 0.0].repeat(3);
        assert_eq!(activation_map(&g, 3, 2).unwrap(), [1, 1, 0].repeat(3));
        assert!(activation_map(&[0.5, 0.0, 0.0], 3, 2).is_err());
        let s = GateState::from_logits(&[0.0; 6], 3, 2, true).unwrap();
        assert!((s.p_tot().iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(s.block_gates(1), &[0.5, 0.5, 0.0]);
    }
}
