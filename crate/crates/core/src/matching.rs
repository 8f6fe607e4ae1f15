//! Column alignment between gate and prior activation maps: L1 cost
//! matrices and minimum-cost perfect matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::BinaryMap;

/// A bijection `perm[i] = j` sending gate column `i` to prior column `j`,
/// with the matching cost under the cost matrix it was solved on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    perm: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    pub fn new(perm: Vec<usize>, cost: f64) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &j in &perm {
            if j >= perm.len() || seen[j] {
                return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
            }
            seen[j] = true;
        }
        Ok(Self { perm, cost })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            cost: 0.0,
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &j) in self.perm.iter().enumerate() {
            inv[j] = i;
        }
        Self {
            perm: inv,
            cost: self.cost,
        }
    }

    /// Cost of this permutation under `cost`.
    pub fn evaluate(&self, cost: &[Vec<f64>]) -> f64 {
        self.perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }
}

/// `out[i][j] = |u_i − v_j|`.
pub fn cdist(u: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cdist",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    Ok(u.iter().map(|a| v.iter().map(|b| (a - b).abs()).collect()).collect())
}

/// Σ_t cdist(gate_t, prior_t), computed as the column-pair Hamming distance
/// |g_i| + |p_j| − 2⟨g_i, p_j⟩.
pub fn assignment_cost(gate: &BinaryMap, prior: &BinaryMap) -> Result<Vec<Vec<f64>>> {
    if (gate.rows(), gate.cols()) != (prior.rows(), prior.cols()) {
        return Err(Error::ShapeMismatch {
            op: "assignment_cost",
            lhs: vec![gate.rows(), gate.cols()],
            rhs: vec![prior.rows(), prior.cols()],
        });
    }
    let n = gate.cols();
    let gcols: Vec<Vec<u8>> = (0..n).map(|c| gate.column(c)).collect();
    let pcols: Vec<Vec<u8>> = (0..n).map(|c| prior.column(c)).collect();
    let count = |c: &[u8]| c.iter().map(|&b| b as usize).sum::<usize>();
    let gsum: Vec<usize> = gcols.iter().map(|c| count(c)).collect();
    let psum: Vec<usize> = pcols.iter().map(|c| count(c)).collect();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let both: usize = gcols[i].iter().zip(&pcols[j]).map(|(a, b)| (a & b) as usize).sum();
                    (gsum[i] + psum[j] - 2 * both) as f64
                })
                .collect()
        })
        .collect())
}

fn check_square(cost: &[Vec<f64>]) -> Result<usize> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::ShapeMismatch {
                op: "hungarian",
                lhs: vec![n, n],
                rhs: vec![n, row.len()],
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hungarian cost matrix".into()));
        }
    }
    Ok(n)
}

/// Shortest-augmenting-path Hungarian algorithm with row/column potentials,
/// O(n³). Returns `row → column`.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1]; // column j -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[matched[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[rows[i]][cols[j]]).sum();
    (assign, total)
}

/// Minimum-cost perfect matching on a square cost matrix. Among optimal
/// matchings the lexicographically smallest permutation is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = check_square(cost)?;
    let all: Vec<usize> = (0..n).collect();
    let (_, best) = solve(cost, &all, &all);
    let tol = 1e-9 * best.abs().max(1.0);

    // fix rows in order, each to the smallest column that still admits an optimum
    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut fixed = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let (_, rest) = solve(cost, &rest_rows, &rest_cols);
            if fixed + cost[i][j] + rest <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("some column extends the optimal prefix");
        let j = free.remove(pos);
        fixed += cost[i][j];
        perm.push(j);
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Assignment::new(perm, total)
}

/// p̃[π(i)] = p[i].
pub fn permute_probs(p: &[f64], assignment: &Assignment) -> Result<Vec<f64>> {
    if p.len() != assignment.len() {
        return Err(Error::ShapeMismatch {
            op: "permute_probs",
            lhs: vec![p.len()],
            rhs: vec![assignment.len()],
        });
    }
    let mut out = vec![0.0; p.len()];
    for (i, &j) in assignment.perm().iter().enumerate() {
        out[j] = p[i];
    }
    Ok(out)
}

/// Apply the column permutation to a binary map: column `i` moves to `π(i)`.
pub fn permute_columns(map: &BinaryMap, assignment: &Assignment) -> Result<BinaryMap> {
    if map.cols() != assignment.len() {
        return Err(Error::ShapeMismatch {
            op: "permute_columns",
            lhs: vec![map.rows(), map.cols()],
            rhs: vec![assignment.len()],
        });
    }
    let mut out = BinaryMap::zeros(map.rows(), map.cols());
    for r in 0..map.rows() {
        for (i, &j) in assignment.perm().iter().enumerate() {
            out.set(r, j, map.get(r, i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let c = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a.perm(), &[0, 1]);
        assert_eq!(a.cost, 1.0);

        let target = [2, 0, 3, 1];
        let c: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if target[i] == j { 0.0 } else { 1.0 }).collect())
            .collect();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.perm(), &target);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let c = vec![vec![0.0; 3]; 3];
        assert_eq!(hungarian(&c).unwrap().perm(), &[0, 1, 2]);
        let c = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]];
        // several zero-cost matchings; (1, 0, 2) is the smallest
        assert_eq!(hungarian(&c).unwrap().perm(), &[1, 0, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert!(Assignment::new(vec![0, 0], 0.0).is_err());
        assert!(cdist(&[1.0], &[1.0, 0.0]).is_err());
        assert!(hungarian(&[]).unwrap().is_empty());
    }

    #[test]
    fn cdist_examples() {
        assert_eq!(cdist(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![vec![0.0; 2]; 2]);
        assert_eq!(cdist(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn permute_roundtrip() {
        let a = Assignment::new(vec![2, 0, 1], 0.0).unwrap();
        let p = [0.5, 0.3, 0.2];
        let q = permute_probs(&p, &a).unwrap();
        assert_eq!(q, vec![0.3, 0.2, 0.5]);
        assert_eq!(permute_probs(&q, &a.inverse()).unwrap(), p.to_vec());
        assert_eq!(permute_probs(&p, &Assignment::identity(3)).unwrap(), p.to_vec());
        assert!(permute_probs(&p, &Assignment::identity(2)).is_err());
    }
}
