//! Test-only oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use imix::pipeline::{PipelineConfig, Preset};
use imix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-11;

/// Dense two-phase simplex with Bland's rule:
/// minimize `c·x` subject to `a x = b`, `x ≥ 0`. Returns the optimum, or
/// `None` when infeasible. Redundant rows are tolerated.
pub fn lp_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<f64> {
    let (rows, n) = (a.len(), c.len());
    // tableau columns: n structural, rows artificial, 1 rhs
    let width = n + rows + 1;
    let mut t: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(r, (row, &rhs))| {
            let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
            let mut line = vec![0.0; width];
            for j in 0..n {
                line[j] = sign * row[j];
            }
            line[n + r] = 1.0;
            line[width - 1] = sign * rhs;
            line
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + rows).collect();

    // phase 1: minimize the sum of artificials
    let mut cost1 = vec![0.0; width - 1];
    cost1[n..n + rows].iter_mut().for_each(|x| *x = 1.0);
    simplex(&mut t, &mut basis, &cost1, n + rows);
    let infeas: f64 = basis
        .iter()
        .zip(&t)
        .filter(|(&j, _)| j >= n)
        .map(|(_, row)| row[width - 1])
        .sum();
    if infeas > 1e-9 {
        return None;
    }
    // drive remaining artificials out of the basis, dropping redundant rows
    let mut r = 0;
    while r < t.len() {
        if basis[r] >= n {
            match (0..n).find(|&j| t[r][j].abs() > 1e-9) {
                Some(j) => pivot(&mut t, &mut basis, r, j),
                None => {
                    t.remove(r);
                    basis.remove(r);
                    continue;
                }
            }
        }
        r += 1;
    }
    // phase 2 over structural columns only
    let mut cost2 = c.to_vec();
    cost2.resize(width - 1, 0.0);
    simplex(&mut t, &mut basis, &cost2, n);
    Some(basis.iter().zip(&t).map(|(&j, row)| cost2[j] * row[width - 1]).sum())
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, j: usize) {
    let p = t[r][j];
    t[r].iter_mut().for_each(|x| *x /= p);
    let pr = t[r].clone();
    for (k, row) in t.iter_mut().enumerate() {
        if k != r && row[j] != 0.0 {
            let f = row[j];
            row.iter_mut().zip(&pr).for_each(|(x, y)| *x -= f * y);
        }
    }
    basis[r] = j;
}

/// Bland's rule: entering column is the smallest index with negative
/// reduced cost; leaving row the smallest basis index among ratio ties.
fn simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) {
    let rhs = t.first().map_or(0, |r| r.len() - 1);
    loop {
        let reduced = |j: usize| -> f64 { cost[j] - basis.iter().zip(t.iter()).map(|(&b, row)| cost[b] * row[j]).sum::<f64>() };
        let Some(enter) = (0..allowed).find(|&j| !basis.contains(&j) && reduced(j) < -EPS) else {
            return;
        };
        let mut leave: Option<usize> = None;
        for r in 0..t.len() {
            if t[r][enter] > EPS {
                let ratio = t[r][rhs] / t[r][enter];
                leave = match leave {
                    None => Some(r),
                    Some(l) => {
                        let best = t[l][rhs] / t[l][enter];
                        if ratio < best - EPS || (ratio <= best + EPS && basis[r] < basis[l]) {
                            Some(r)
                        } else {
                            Some(l)
                        }
                    }
                };
            }
        }
        let Some(leave) = leave else {
            panic!("unbounded LP");
        };
        pivot(t, basis, leave, enter);
    }
}

/// Transport problem phrased as a generic LP for [`lp_min`].
pub fn transport_lp(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Option<f64> {
    let (m, n) = (supply.len(), demand.len());
    let c: Vec<f64> = cost.iter().flatten().copied().collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for s in 0..m {
        let mut row = vec![0.0; m * n];
        (0..n).for_each(|d| row[s * n + d] = 1.0);
        a.push(row);
        b.push(supply[s]);
    }
    for d in 0..n {
        let mut row = vec![0.0; m * n];
        (0..m).for_each(|s| row[s * n + d] = 1.0);
        a.push(row);
        b.push(demand[d]);
    }
    lp_min(&c, &a, &b)
}

/// Brute-force top-k by a score function, ties to the smaller key.
pub fn brute_top_k(vectors: &Matrix, q: &[f32], k: usize, cosine: bool) -> Vec<u32> {
    let qn = if cosine { norm(q) } else { 1.0 };
    let mut scored: Vec<(f32, u32)> = vectors
        .iter_rows()
        .enumerate()
        .map(|(r, v)| {
            let mut s: f32 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            if cosine {
                s /= norm(v) * qn;
            }
            (s, r as u32)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, r)| r).collect()
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

pub fn random_matrix(rows: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_flat(dim, (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// The planted benchmark: 5k users, 2k items, 20 groups, 3 groups per
/// user, 30% holdout, two clusters per planted group.
pub fn benchmark() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        preset: Preset::Synthetic,
        ..Default::default()
    };
    cfg.split.holdout_fraction = 0.3;
    cfg
}

/// The benchmark with at most five training edges per user.
pub fn sparse_benchmark() -> PipelineConfig {
    let mut cfg = benchmark();
    cfg.split.max_train_edges_per_user = Some(5);
    cfg
}

/// Relative change of `a` over `b`.
pub fn relative(a: f64, b: f64) -> f64 {
    (a - b) / b
}
