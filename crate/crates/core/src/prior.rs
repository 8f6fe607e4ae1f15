//! Task-expert prior activation maps: the channel-shift mask that decides
//! which of the `N·M` experts each timestep should use, plus the random
//! allocation baseline.
//!
//! Columns are 0-indexed here (`block * M + expert` for gate maps, plain
//! channel order for the prior). Row `t − 1` holds timestep `t`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default exponent of the channel-shift schedule.
pub const DEFAULT_ALPHA: f64 = 4.0;

/// Dense `rows × cols` binary matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMap {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols || r.iter().any(|&b| b > 1) {
                return Err(Error::InvalidArgument("binary map rows must be equal-length 0/1 vectors".into()));
            }
            bits.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            bits,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] == 1
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.cols + c] = u8::from(on);
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [u8] {
        &mut self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<u8> {
        (0..self.rows).map(|r| self.bits[r * self.cols + c]).collect()
    }

    pub fn row_count(&self, r: usize) -> usize {
        self.row(r).iter().map(|&b| b as usize).sum()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn hamming(&self, other: &BinaryMap) -> Result<usize> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch {
                op: "hamming",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count())
    }

    /// Columns that are set in every row.
    pub fn always_on_columns(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&c| (0..self.rows).all(|r| self.get(r, c)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PriorKind {
    ChannelShift,
    RandomAllocation { seed: u64 },
}

/// `T × NM` prior activation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorMask {
    pub blocks: usize,
    pub experts: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub kind: PriorKind,
    map: BinaryMap,
}

fn validate(blocks: usize, experts: usize, top_k: usize, steps: usize, alpha: f64) -> Result<()> {
    if blocks == 0 || experts == 0 || steps == 0 || top_k == 0 {
        return Err(Error::InvalidArgument(format!(
            "prior dimensions must be positive (N={blocks}, M={experts}, k={top_k}, T={steps})"
        )));
    }
    if top_k >= experts {
        return Err(Error::InvalidArgument(format!(
            "k={top_k} must be below M={experts} for sparse routing"
        )));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Half-open active interval `[lo, hi)` (0-indexed) of the channel-shift row
/// for 1-based timestep `t`: channel c (1-based) is on iff
/// round(S·((t−1)/T)^α) < c ≤ round(S·(t/T)^α) + kN with S = N(M−k).
fn shift_interval(blocks: usize, experts: usize, top_k: usize, steps: usize, alpha: f64, t: usize) -> (usize, usize) {
    let span = (blocks * (experts - top_k)) as f64;
    let edge = |s: usize| (span * (s as f64 / steps as f64).powf(alpha)).round() as usize;
    (edge(t - 1), edge(t) + top_k * blocks)
}

impl PriorMask {
    /// Channel-shift prior for `blocks` blocks of `experts` experts each.
    pub fn build(blocks: usize, experts: usize, top_k: usize, steps: usize, alpha: f64) -> Result<Self> {
        validate(blocks, experts, top_k, steps, alpha)?;
        let cols = blocks * experts;
        let mut map = BinaryMap::zeros(steps, cols);
        for t in 1..=steps {
            let (lo, hi) = shift_interval(blocks, experts, top_k, steps, alpha, t);
            for c in lo..hi.min(cols) {
                map.set(t - 1, c, true);
            }
        }
        Ok(Self {
            blocks,
            experts,
            top_k,
            alpha,
            kind: PriorKind::ChannelShift,
            map,
        })
    }

    /// Random-allocation baseline (only defined for M=3, k=2): per block one
    /// always-on expert, one expert following a distinct randomly chosen
    /// column among the first N of the channel-shift map, and one expert on
    /// the complement of that column.
    pub fn random_allocation(blocks: usize, experts: usize, top_k: usize, steps: usize, seed: u64) -> Result<Self> {
        if (experts, top_k) != (3, 2) {
            return Err(Error::InvalidArgument(format!(
                "random allocation is defined for M=3, k=2 only (got M={experts}, k={top_k})"
            )));
        }
        let base = Self::build(blocks, experts, top_k, steps, DEFAULT_ALPHA)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<usize> = (0..blocks).collect();
        picks.shuffle(&mut rng);
        let mut map = BinaryMap::zeros(steps, blocks * experts);
        for (b, &src) in picks.iter().enumerate() {
            for r in 0..steps {
                let on = base.map.get(r, src);
                map.set(r, b * 3, true);
                map.set(r, b * 3 + 1, on);
                map.set(r, b * 3 + 2, !on);
            }
        }
        Ok(Self {
            blocks,
            experts,
            top_k,
            alpha: DEFAULT_ALPHA,
            kind: PriorKind::RandomAllocation { seed },
            map,
        })
    }

    pub fn map(&self) -> &BinaryMap {
        &self.map
    }

    pub fn steps(&self) -> usize {
        self.map.rows()
    }

    pub fn channels(&self) -> usize {
        self.map.cols()
    }

    /// Row for 1-based timestep `t`.
    pub fn row(&self, t: usize) -> Result<&[u8]> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(self.map.row(t - 1))
    }

    /// δ_t = (ones in row t) − kN.
    pub fn surplus(&self, t: usize) -> Result<usize> {
        let ones = self.row(t)?.iter().map(|&b| b as usize).sum::<usize>();
        Ok(ones.saturating_sub(self.top_k * self.blocks))
    }

    pub fn shared_columns(&self) -> Vec<usize> {
        self.map.always_on_columns()
    }

    /// Structural invariants of the channel-shift construction.
    pub fn check_invariants(&self) -> Result<()> {
        let kn = self.top_k * self.blocks;
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        let mut total_surplus = 0;
        let mut prev: Option<(usize, usize)> = None;
        for r in 0..self.steps() {
            let row = self.map.row(r);
            let ones: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1).collect();
            if ones.len() < kn {
                return fail(format!("row {} has {} < kN={kn} ones", r + 1, ones.len()));
            }
            total_surplus += ones.len() - kn;
            if self.kind == PriorKind::ChannelShift {
                let (lo, hi) = (ones[0], ones[ones.len() - 1] + 1);
                if hi - lo != ones.len() {
                    return fail(format!("row {} is not contiguous", r + 1));
                }
                if let Some((plo, phi)) = prev {
                    if lo < plo || hi < phi {
                        return fail(format!("row {} interval moved backwards", r + 1));
                    }
                }
                prev = Some((lo, hi));
            }
        }
        if self.kind == PriorKind::ChannelShift && total_surplus != self.blocks * (self.experts - self.top_k) {
            return fail(format!("surplus sums to {total_surplus}"));
        }
        let bound = shared_expert_lower_bound(self.blocks, self.experts, self.top_k);
        if self.shared_columns().len() < bound {
            return fail(format!("only {} shared columns, bound {bound}", self.shared_columns().len()));
        }
        Ok(())
    }
}

/// Lower bound max(N(2k − M), 0) on experts shared by every timestep.
pub fn shared_expert_lower_bound(blocks: usize, experts: usize, top_k: usize) -> usize {
    let v = blocks as i64 * (2 * top_k as i64 - experts as i64);
    v.max(0) as usize
}
