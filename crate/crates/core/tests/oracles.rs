//! Library results against independent oracles.

mod common;

use common::{lp_min, transport_lp};
use imix::embed::{loss_and_grad, DenseParams, Gradients, Node, Pair};
use imix::eval::transport::solve;
use imix::eval::{diversity, emd_fit};
use imix::mixture::{normalized_centroid, smoothed_query_embedding, NeighborTerm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn lp_oracle_solves_textbook_problem() {
    // min −x − y  s.t. x + y ≤ 4, x + 3y ≤ 6 (slack form)
    let c = [-1.0, -1.0, 0.0, 0.0];
    let a = vec![vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 3.0, 0.0, 1.0]];
    assert!((lp_min(&c, &a, &[4.0, 6.0]).unwrap() + 4.0).abs() < 1e-12);
    assert_eq!(lp_min(&[1.0], &[vec![1.0], vec![1.0]], &[1.0, 2.0]), None);
}

fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

#[test]
fn transport_matches_lp_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let m = rng.random_range(1..=5);
        let n = rng.random_range(1..=8);
        let supply = simplex_point(&mut rng, m);
        let demand = vec![1.0 / n as f64; n];
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        let plan = solve(&supply, &demand, &cost).unwrap();
        let oracle = transport_lp(&supply, &demand, &cost).unwrap();
        assert!((plan.cost - oracle).abs() < 1e-9, "{} vs {oracle}", plan.cost);
        for (s, row) in plan.flow.iter().enumerate() {
            assert!(row.iter().all(|&f| f >= 0.0));
            assert!((row.iter().sum::<f64>() - supply[s]).abs() < 1e-9);
        }
        for d in 0..n {
            assert!((plan.flow.iter().map(|r| r[d]).sum::<f64>() - demand[d]).abs() < 1e-9);
        }
    }
}

#[test]
fn emd_with_one_component_is_mean_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let d = 6;
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let items: Vec<Vec<f32>> = (0..7)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let refs: Vec<&[f32]> = items.iter().map(Vec::as_slice).collect();
        let got = emd_fit(&vec![(1.0, u.clone())], &refs).unwrap();
        let want: f64 = items
            .iter()
            .map(|i| {
                let n = i.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                i.iter()
                    .zip(&u)
                    .map(|(&a, b)| (f64::from(a) / n - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 7.0;
        assert!((got - want).abs() < 1e-9);
    }
}

fn random_params(rng: &mut ChaCha8Rng, users: usize, items: usize, dim: usize) -> DenseParams {
    let mut row = || (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    DenseParams {
        users: (0..users).map(|_| row()).collect(),
        items: (0..items).map(|_| row()).collect(),
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..40 {
        let dim = rng.random_range(1..=8);
        let params = random_params(&mut rng, 4, 6, dim);
        let pos = Pair { user: rng.random_range(0..4), item: rng.random_range(0..6) };
        let negs: Vec<Pair> = (0..rng.random_range(0..6))
            .map(|_| Pair { user: rng.random_range(0..4), item: rng.random_range(0..6) })
            .collect();
        let mut grads = Gradients::new(dim);
        loss_and_grad(&params, pos, &negs, &mut grads);
        let nodes: Vec<Node> = (0..4).map(Node::User).chain((0..6).map(Node::Item)).collect();
        for node in nodes {
            for k in 0..dim {
                let mut plus = params.clone();
                plus.get_mut(node)[k] += h;
                let mut minus = params.clone();
                minus.get_mut(node)[k] -= h;
                let mut scratch = Gradients::new(dim);
                let fd = (loss_and_grad(&plus, pos, &negs, &mut scratch) - loss_and_grad(&minus, pos, &negs, &mut scratch))
                    / (2.0 * h);
                let an = grads.get(node).map_or(0.0, |g| g[k]);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-4 || (an - fd).abs() < 1e-9, "{node:?}[{k}]: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn diversity_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vs: Vec<Vec<f32>> = (0..10)
        .map(|_| (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let unit: Vec<Vec<f64>> = vs
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            v.iter().map(|&x| f64::from(x) / n).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..5).map(|k| unit.iter().map(|u| u[k]).sum::<f64>() / 10.0).collect();
    let want = unit
        .iter()
        .map(|u| u.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / 10.0;
    assert!((diversity(vs.iter().map(Vec::as_slice)) - want).abs() < 1e-12);
}

#[test]
fn smoothed_query_matches_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let own_items: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let own = normalized_centroid(own_items.iter().map(Vec::as_slice), d).unwrap();
    let c1: Vec<f64> = {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let terms = [
        NeighborTerm { p_mle: 0.3, centroid: Some(&c1) },
        NeighborTerm { p_mle: 0.0, centroid: None },
    ];
    let lambda = 0.8;
    let got = smoothed_query_embedding(Some(&own), &terms, 2, lambda, d).unwrap();
    let raw: Vec<f64> = (0..d)
        .map(|k| (1.0 - lambda) * own[k] + lambda / 2.0 * 0.3 * c1[k])
        .collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    for k in 0..d {
        assert!((got[k] - raw[k] / n).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transport_is_optimal_and_feasible(
        m in 1usize..5,
        n in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let supply = simplex_point(&mut rng, m);
        let demand = simplex_point(&mut rng, n);
        let cost: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
        let plan = solve(&supply, &demand, &cost).unwrap();
        let oracle = transport_lp(&supply, &demand, &cost).unwrap();
        prop_assert!((plan.cost - oracle).abs() < 1e-9);
        prop_assert!(plan.cost >= 0.0);
    }
}
