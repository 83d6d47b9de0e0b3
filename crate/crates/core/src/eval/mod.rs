//! Recall@K, candidate diversity and earth mover's goodness-of-fit, plus
//! the macro-averaged report that ties them together.

pub mod transport;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::HoldoutSplit;
use crate::retrieve::CandidateSet;
use crate::vecmath;

/// Fraction of `holdout` found among the first `k` candidates; `None` for
/// an empty holdout.
pub fn recall_at_k(candidates: &[u32], holdout: &[u32], k: usize) -> Option<f64> {
    if holdout.is_empty() || k == 0 {
        return None;
    }
    let hits = candidates
        .iter()
        .take(k)
        .filter(|c| holdout.contains(c))
        .count();
    Some(hits as f64 / holdout.len() as f64)
}

/// Mean Euclidean distance of unit-normalized candidate vectors from their
/// mean. Zero-norm vectors are used as-is.
pub fn diversity<'a>(vectors: impl IntoIterator<Item = &'a [f32]>) -> f64 {
    let unit: Vec<Vec<f64>> = vectors.into_iter().map(vecmath::unit64).collect();
    if unit.is_empty() {
        return 0.0;
    }
    let dim = unit[0].len();
    let mut mean = vec![0f64; dim];
    for v in &unit {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= unit.len() as f64);
    unit.iter().map(|v| vecmath::euclidean64(v, &mean)).sum::<f64>() / unit.len() as f64
}

pub fn candidate_diversity(set: &CandidateSet, table: &EmbeddingTable) -> f64 {
    diversity(set.items().map(|i| table.item(i)))
}

/// Weighted point set representing a user: `(mass, vector)` pairs.
pub type Representation = Vec<(f64, Vec<f64>)>;

/// Earth mover's distance between a user's representation and the uniform
/// distribution over `items` (unit-normalized), with Euclidean costs.
pub fn emd_fit(rep: &Representation, items: &[&[f32]]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::arg("goodness of fit needs at least one held-out item"));
    }
    let supply: Vec<f64> = rep.iter().map(|(p, _)| *p).collect();
    let demand = vec![1.0 / items.len() as f64; items.len()];
    let unit: Vec<Vec<f64>> = items.iter().map(|v| vecmath::unit64(v)).collect();
    let cost: Vec<Vec<f64>> = rep
        .iter()
        .map(|(_, q)| unit.iter().map(|i| vecmath::euclidean64(q, i)).collect())
        .collect();
    Ok(transport::solve(&supply, &demand, &cost)?.cost)
}

/// A single unit-normalized embedding carrying all the mass.
pub fn unimodal_representation(user_vec: &[f32]) -> Representation {
    vec![(1.0, vecmath::unit64(user_vec))]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub recall: Vec<f64>,
    pub diversity: Vec<Option<f64>>,
    pub emd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub recall_at: BTreeMap<usize, f64>,
    pub diversity_at: BTreeMap<usize, f64>,
    pub emd: f64,
    pub n_users: usize,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Largest held-out sample per user used for the goodness of fit.
    pub emd_holdout_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![10, 20, 50],
            emd_holdout_cap: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::arg("evaluation cutoffs must be non-empty and ≥ 1"));
        }
        if self.emd_holdout_cap == 0 {
            return Err(Error::arg("emd holdout cap must be ≥ 1"));
        }
        Ok(())
    }
}

/// Macro-averages per-user metrics over users with a non-empty holdout.
///
/// `candidates(user, k)` yields the size-`k` candidate set; `represent(user)`
/// the weighted embeddings scored by the goodness of fit.
pub fn evaluate<C, R>(
    strategy: &str,
    split: &HoldoutSplit,
    table: &EmbeddingTable,
    cfg: &EvalConfig,
    candidates: C,
    represent: R,
) -> Result<EvalReport>
where
    C: Fn(u32, usize) -> Result<CandidateSet> + Sync,
    R: Fn(u32) -> Result<Representation> + Sync,
{
    cfg.validate()?;
    let users = split.eval_users();
    if users.is_empty() {
        return Err(Error::NoEligibleUsers);
    }
    let per_user: Vec<UserMetrics> = users
        .par_iter()
        .map(|&u| {
            let holdout = split.holdout_of(u);
            let mut recall = Vec::with_capacity(cfg.ks.len());
            let mut div = Vec::with_capacity(cfg.ks.len());
            for &k in &cfg.ks {
                let set = candidates(u, k)?;
                let items: Vec<u32> = set.items().collect();
                recall.push(recall_at_k(&items, holdout, k).expect("non-empty holdout"));
                div.push((!set.is_empty()).then(|| candidate_diversity(&set, table)));
            }
            let sample: Vec<&[f32]> = holdout
                .iter()
                .take(cfg.emd_holdout_cap)
                .map(|&i| table.item(i))
                .collect();
            let emd = emd_fit(&represent(u)?, &sample)?;
            Ok(UserMetrics {
                user: u,
                recall,
                diversity: div,
                emd,
            })
        })
        .collect::<Result<_>>()?;

    let n = per_user.len() as f64;
    let mut recall_at = BTreeMap::new();
    let mut diversity_at = BTreeMap::new();
    for (j, &k) in cfg.ks.iter().enumerate() {
        recall_at.insert(k, per_user.iter().map(|m| m.recall[j]).sum::<f64>() / n);
        let ds: Vec<f64> = per_user.iter().filter_map(|m| m.diversity[j]).collect();
        diversity_at.insert(k, ds.iter().sum::<f64>() / ds.len().max(1) as f64);
    }
    let emd = per_user.iter().map(|m| m.emd).sum::<f64>() / n;
    Ok(EvalReport {
        strategy: strategy.to_string(),
        recall_at,
        diversity_at,
        emd,
        n_users: per_user.len(),
        per_user,
    })
}

/// Tab-separated report: one header row and one row per strategy.
pub fn reports_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    out.push_str("strategy");
    for k in first.recall_at.keys() {
        let _ = write!(out, "\tR@{k}");
    }
    for k in first.diversity_at.keys() {
        let _ = write!(out, "\tD@{k}");
    }
    out.push_str("\tEMD\tusers\n");
    for r in reports {
        out.push_str(&r.strategy);
        for v in r.recall_at.values().chain(r.diversity_at.values()) {
            let _ = write!(out, "\t{v:.6}");
        }
        let _ = writeln!(out, "\t{:.6}\t{}", r.emd, r.n_users);
    }
    out
}

/// Human-readable table with recall as percentages.
pub fn reports_pretty(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let _ = write!(out, "{:<12}", "Approach");
    for k in first.recall_at.keys() {
        let _ = write!(out, "{:>9}", format!("R@{k}"));
    }
    for k in first.diversity_at.keys() {
        let _ = write!(out, "{:>8}", format!("D@{k}"));
    }
    let _ = writeln!(out, "{:>8}", "EMD");
    for r in reports {
        let _ = write!(out, "{:<12}", r.strategy);
        for v in r.recall_at.values() {
            let _ = write!(out, "{:>8.2}%", 100.0 * v);
        }
        for v in r.diversity_at.values() {
            let _ = write!(out, "{v:>8.3}");
        }
        let _ = writeln!(out, "{:>8.3}", r.emd);
    }
    out
}
