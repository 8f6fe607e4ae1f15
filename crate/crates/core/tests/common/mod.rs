//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use switchdit::prior::BinaryMap;

/// Nearest integer, halves away from zero, written without `f64::round`.
pub fn round_half_away(x: f64) -> i64 {
    let f = x.abs().floor();
    let r = if x.abs() - f >= 0.5 { f + 1.0 } else { f };
    (r as i64) * if x < 0.0 { -1 } else { 1 }
}

/// Literal re-evaluation of the channel-shift inequality for 1-based t, c.
pub fn prior_bit(n: usize, m: usize, k: usize, t_max: usize, alpha: f64, t: usize, c: usize) -> bool {
    let s = (n * (m - k)) as f64;
    let lo = round_half_away(s * ((t as f64 - 1.0) / t_max as f64).powf(alpha));
    let hi = round_half_away(s * (t as f64 / t_max as f64).powf(alpha)) + (k * n) as i64;
    lo < c as i64 && c as i64 <= hi
}

pub fn prior_oracle(n: usize, m: usize, k: usize, t_max: usize, alpha: f64) -> Vec<Vec<u8>> {
    (1..=t_max)
        .map(|t| (1..=n * m).map(|c| u8::from(prior_bit(n, m, k, t_max, alpha, t, c))).collect())
        .collect()
}

/// Minimum over all permutations, by Heap's algorithm.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut p: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut best = eval(&p);
    let mut c = vec![0; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            best = best.min(eval(&p));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Σ_t [|g_{t,i} − p_{t,j}|]_{ij}, one timestep at a time.
pub fn literal_cost(gate: &BinaryMap, prior: &BinaryMap) -> Vec<Vec<f64>> {
    let n = gate.cols();
    let mut c = vec![vec![0.0; n]; n];
    for t in 0..gate.rows() {
        for (i, row) in c.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += (f64::from(gate.row(t)[i]) - f64::from(prior.row(t)[j])).abs();
            }
        }
    }
    c
}

pub fn random_map<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> BinaryMap {
    let bits: Vec<Vec<u8>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0..2)).collect()).collect();
    BinaryMap::from_rows(&bits).unwrap()
}

/// ½ Σ p ln(p/a) + ½ Σ q ln(q/a) with a = (p+q)/2.
pub fn jsd_direct(p: &[f64], q: &[f64]) -> f64 {
    let kl = |x: &[f64], a: &[f64]| x.iter().zip(a).filter(|(v, _)| **v > 0.0).map(|(v, m)| v * (v / m).ln()).sum::<f64>();
    let a: Vec<f64> = p.iter().zip(q).map(|(x, y)| 0.5 * (x + y)).collect();
    0.5 * kl(p, &a) + 0.5 * kl(q, &a)
}

pub fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}
