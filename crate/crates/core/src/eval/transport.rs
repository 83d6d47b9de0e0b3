//! Exact balanced transportation solver (successive shortest paths).
//!
//! Supply nodes ship to demand nodes over uncapacitated arcs; each round
//! finds a cheapest augmenting path in the residual network with
//! Bellman–Ford, so backward arcs (negative cost) are handled exactly.

use crate::error::{Error, Result};

const MARGINAL_TOL: f64 = 1e-9;
const FLOW_EPS: f64 = 1e-15;
/// Minimum improvement accepted by a relaxation; stops rounding noise from
/// closing zero-cost cycles.
const RELAX_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: f64,
    /// `flow[s][d]`, non-negative.
    pub flow: Vec<Vec<f64>>,
}

/// Minimizes `Σ flow[s][d]·cost[s][d]` subject to row sums = `supply` and
/// column sums = `demand`.
pub fn solve(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<TransportPlan> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 {
        return Err(Error::arg("transport problem needs supply and demand nodes"));
    }
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(Error::arg("cost matrix shape does not match marginals"));
    }
    if supply.iter().chain(demand).any(|&x| !(x >= 0.0 && x.is_finite()))
        || cost.iter().flatten().any(|c| !c.is_finite())
    {
        return Err(Error::arg("marginals must be finite and non-negative, costs finite"));
    }
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    if (total_s - total_d).abs() > MARGINAL_TOL {
        return Err(Error::InfeasibleMarginals {
            supply: total_s,
            demand: total_d,
        });
    }

    let mut left_s = supply.to_vec();
    let mut left_d = demand.to_vec();
    let mut flow = vec![vec![0f64; n]; m];
    // nodes: supplies 0..m, demands m..m+n
    let nodes = m + n;
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        for s in 0..m {
            if left_s[s] > FLOW_EPS {
                dist[s] = 0.0;
            }
        }
        if dist[..m].iter().all(|d| d.is_infinite()) {
            break;
        }
        for _ in 0..nodes {
            let mut relaxed = false;
            for s in 0..m {
                for d in 0..n {
                    // forward s → d
                    if dist[s] + cost[s][d] < dist[m + d] - RELAX_EPS {
                        dist[m + d] = dist[s] + cost[s][d];
                        pred[m + d] = s;
                        relaxed = true;
                    }
                    // backward d → s along existing flow
                    if flow[s][d] > FLOW_EPS && dist[m + d] - cost[s][d] < dist[s] - RELAX_EPS {
                        dist[s] = dist[m + d] - cost[s][d];
                        pred[s] = m + d;
                        relaxed = true;
                    }
                }
            }
            if !relaxed {
                break;
            }
        }
        let Some(sink) = (0..n)
            .filter(|&d| left_d[d] > FLOW_EPS && dist[m + d].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]).then(a.cmp(&b)))
        else {
            break;
        };
        // walk back to the originating supply, tracking the bottleneck
        let mut amount = left_d[sink];
        let mut node = m + sink;
        let mut path = Vec::new();
        while pred[node] != usize::MAX {
            let p = pred[node];
            if node < m {
                // backward arc: cancel flow on (node, p − m)
                amount = amount.min(flow[node][p - m]);
            }
            path.push((p, node));
            node = p;
            if path.len() > nodes {
                unreachable!("negative cycle in residual network");
            }
        }
        let source = node;
        amount = amount.min(left_s[source]);
        for &(from, to) in &path {
            if from < m {
                flow[from][to - m] += amount;
            } else {
                flow[to][from - m] -= amount;
                if flow[to][from - m] < FLOW_EPS {
                    flow[to][from - m] = 0.0;
                }
            }
        }
        left_s[source] -= amount;
        left_d[sink] -= amount;
    }
    let cost_total = flow
        .iter()
        .zip(cost)
        .map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c).sum::<f64>())
        .sum();
    Ok(TransportPlan {
        cost: cost_total,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_route() {
        let plan = solve(&[1.0], &[1.0], &[vec![0.37]]).unwrap();
        assert_eq!(plan.cost, 0.37);
        assert_eq!(plan.flow, vec![vec![1.0]]);
    }

    #[test]
    fn zero_cost_when_colocated() {
        let cost = vec![vec![0.0, 2.0, 2.0], vec![2.0, 0.0, 2.0], vec![2.0, 2.0, 0.0]];
        let plan = solve(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], &cost).unwrap();
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn needs_rerouting() {
        // greedy would send s0→d0 first; optimum uses s0→d1, s1→d0
        let cost = vec![vec![1.0, 2.0], vec![5.0, 100.0]];
        let plan = solve(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!((plan.cost - (0.5 * 2.0 + 0.5 * 5.0)).abs() < 1e-12, "{}", plan.cost);
    }

    #[test]
    fn marginals_hold() {
        let supply = [0.1, 0.6, 0.3];
        let demand = [0.25; 4];
        let cost = vec![
            vec![0.3, 1.2, 0.8, 0.1],
            vec![0.9, 0.2, 0.4, 1.1],
            vec![0.5, 0.7, 0.05, 0.6],
        ];
        let plan = solve(&supply, &demand, &cost).unwrap();
        for (s, row) in plan.flow.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - supply[s]).abs() < 1e-9);
            assert!(row.iter().all(|&f| f >= 0.0));
        }
        for d in 0..4 {
            assert!((plan.flow.iter().map(|r| r[d]).sum::<f64>() - demand[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_unbalanced() {
        assert!(matches!(
            solve(&[0.5], &[1.0], &[vec![1.0]]),
            Err(Error::InfeasibleMarginals { .. })
        ));
    }
}
