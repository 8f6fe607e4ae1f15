//! Squared maximum mean discrepancy with an RBF kernel.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median Euclidean distance over distinct pairs of the pooled set.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pool: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let m = median(d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased MMD² estimate with `k(a, b) = exp(−‖a − b‖² / (2σ²))`.
pub fn mmd2_with_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("MMD needs non-empty sample sets".into()));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("MMD samples have inconsistent dimension".into()));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for u in a {
            for v in b {
                s += (-gamma * sq_dist(u, v)).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok((mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0))
}

/// Biased MMD² with the median-distance bandwidth of the pooled samples.
pub fn eval_mmd(samples: &[Vec<f64>], heldout: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidArgument("MMD needs non-empty sample sets".into()));
    }
    mmd2_with_bandwidth(samples, heldout, median_bandwidth(samples, heldout))
}

/// `quantile` of MMD² between random halves (`n` each) of `pool`, the null
/// distribution for two sets of `n` draws from the same source.
pub fn permutation_threshold<R: Rng + ?Sized>(
    pool: &[Vec<f64>],
    n: usize,
    trials: usize,
    quantile: f64,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 || pool.len() < 2 * n || trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "permutation threshold needs a pool of at least {} and trials > 0",
            2 * n
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut stats = Vec::with_capacity(trials);
    for _ in 0..trials {
        idx.shuffle(rng);
        let a: Vec<Vec<f64>> = idx[..n].iter().map(|&i| pool[i].clone()).collect();
        let b: Vec<Vec<f64>> = idx[n..2 * n].iter().map(|&i| pool[i].clone()).collect();
        stats.push(eval_mmd(&a, &b)?);
    }
    stats.sort_by(f64::total_cmp);
    let pos = ((quantile * trials as f64).ceil() as usize).clamp(1, trials) - 1;
    Ok(stats[pos])
}
