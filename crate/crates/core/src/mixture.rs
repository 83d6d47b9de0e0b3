//! Per-user mixture representations over item clusters.
//!
//! For each user we estimate a truncated cluster distribution from their own
//! engagements, average the same estimate over their nearest neighbouring
//! users, interpolate the two with weight `lambda`, and build one unit-norm
//! query embedding per cluster in the resulting support. The same `lambda`
//! interpolates the cluster distribution and the per-cluster embeddings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::VectorIndex;
use crate::cluster::ClusterModel;
use crate::codec;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::EngagementGraph;
use crate::vecmath;

const MIXTURE_MAGIC: &[u8; 4] = b"IMMX";
const DEGENERATE_NORM: f64 = 1e-12;

/// Sparse probability vector over cluster ids, sorted by id, no zero entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterDist(Vec<(u32, f64)>);

impl ClusterDist {
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.retain(|&(_, p)| p != 0.0);
        pairs.sort_by_key(|&(c, _)| c);
        ClusterDist(pairs)
    }

    pub fn get(&self, cluster: u32) -> f64 {
        self.0
            .binary_search_by_key(&cluster, |&(c, _)| c)
            .map_or(0.0, |k| self.0[k].1)
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.0
    }

    pub fn support(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().map(|&(c, _)| c)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|&(_, p)| p).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    /// Truncation size: clusters kept in the user's own estimate.
    pub m: usize,
    pub lambda: f64,
    /// Neighbouring users averaged into the smoothed estimate.
    pub neighbors: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            m: 5,
            lambda: 0.8,
            neighbors: 10,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::arg("mixture size m must be ≥ 1"));
        }
        check_lambda(self.lambda)?;
        if self.neighbors == 0 {
            return Err(Error::arg("neighbour count must be ≥ 1"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} not in [0, 1]")));
    }
    Ok(())
}

/// Number of the user's training items falling in each cluster.
pub fn cluster_counts(user: u32, g: &EngagementGraph, clusters: &ClusterModel) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for &i in g.items_of(user) {
        *counts.entry(clusters.cluster_of(i)).or_insert(0) += 1;
    }
    counts
}

/// Keeps the `m` largest counts (ties to the smaller cluster id) and
/// normalizes over what was kept.
pub fn truncated_mle(counts: &BTreeMap<u32, usize>, m: usize) -> ClusterDist {
    let mut ranked: Vec<(u32, usize)> = counts.iter().map(|(&c, &n)| (c, n)).filter(|&(_, n)| n > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(m);
    let total: usize = ranked.iter().map(|&(_, n)| n).sum();
    ClusterDist::from_pairs(
        ranked
            .into_iter()
            .map(|(c, n)| (c, n as f64 / total as f64))
            .collect(),
    )
}

pub fn mle_distribution(user: u32, g: &EngagementGraph, clusters: &ClusterModel, m: usize) -> Result<ClusterDist> {
    if m == 0 {
        return Err(Error::arg("mixture size m must be ≥ 1"));
    }
    if g.user_degree(user) == 0 {
        return Err(Error::EmptyProfile { user });
    }
    Ok(truncated_mle(&cluster_counts(user, g, clusters), m))
}

/// Top-`k` users nearest to `user` in `user_index`, excluding `user`.
/// `k` is clamped to the number of other users.
pub fn nearest_users(user: u32, user_vec: &[f32], user_index: &VectorIndex, k: usize) -> Result<Vec<u32>> {
    let others = user_index.len().saturating_sub(1);
    let k = if k > others {
        log::warn!("neighbour count {k} exceeds {others} other users; clamping");
        others
    } else {
        k
    };
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(user_index
        .query(user_vec, k, &[user])?
        .into_iter()
        .map(|h| h.key)
        .collect())
}

/// Uniform average of the neighbours' own estimates.
pub fn knn_average(neighbors: &[u32], mle: &[ClusterDist]) -> ClusterDist {
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    for &n in neighbors {
        for &(c, p) in mle[n as usize].entries() {
            *acc.entry(c).or_insert(0.0) += p;
        }
    }
    let k = neighbors.len() as f64;
    ClusterDist::from_pairs(acc.into_iter().map(|(c, s)| (c, s / k)).collect())
}

pub fn knn_distribution(
    user: u32,
    user_vec: &[f32],
    user_index: &VectorIndex,
    k: usize,
    mle: &[ClusterDist],
) -> Result<(ClusterDist, Vec<u32>)> {
    if k == 0 {
        return Err(Error::arg("neighbour count must be ≥ 1"));
    }
    let neighbors = nearest_users(user, user_vec, user_index, k)?;
    Ok((knn_average(&neighbors, mle), neighbors))
}

/// `(1 − λ)·p_mle + λ·p_knn` over the union support.
pub fn smooth_distribution(p_mle: &ClusterDist, p_knn: &ClusterDist, lambda: f64) -> Result<ClusterDist> {
    check_lambda(lambda)?;
    let support: std::collections::BTreeSet<u32> = p_mle.support().chain(p_knn.support()).collect();
    Ok(ClusterDist::from_pairs(
        support
            .into_iter()
            .map(|c| (c, (1.0 - lambda) * p_mle.get(c) + lambda * p_knn.get(c)))
            .collect(),
    ))
}

/// Normalized sum of the given item vectors.
pub fn normalized_centroid<'a>(vectors: impl IntoIterator<Item = &'a [f32]>, dim: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0f64; dim];
    let mut any = false;
    for v in vectors {
        any = true;
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s += f64::from(x));
    }
    if !any || vecmath::normalize64(&mut sum) == 0.0 {
        return None;
    }
    Some(sum)
}

/// Normalized centroid of the user's training items in `cluster`.
pub fn user_cluster_centroid(
    user: u32,
    cluster: u32,
    g: &EngagementGraph,
    clusters: &ClusterModel,
    table: &EmbeddingTable,
) -> Result<Vec<f64>> {
    let relevant: Vec<&[f32]> = g
        .items_of(user)
        .iter()
        .filter(|&&i| clusters.cluster_of(i) == cluster)
        .map(|&i| table.item(i))
        .collect();
    if relevant.is_empty() {
        return Err(Error::AbsentCentroid { user, cluster });
    }
    normalized_centroid(relevant, table.dim()).ok_or(Error::DegenerateCentroid { user, cluster })
}

/// All of one user's per-cluster centroids, sorted by cluster id.
fn user_centroids(user: u32, g: &EngagementGraph, clusters: &ClusterModel, table: &EmbeddingTable) -> Vec<(u32, Vec<f64>)> {
    let mut by_cluster: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &i in g.items_of(user) {
        let sum = by_cluster
            .entry(clusters.cluster_of(i))
            .or_insert_with(|| vec![0.0; table.dim()]);
        sum.iter_mut().zip(table.item(i)).for_each(|(s, &x)| *s += f64::from(x));
    }
    by_cluster
        .into_iter()
        .filter_map(|(c, mut v)| (vecmath::normalize64(&mut v) > 0.0).then_some((c, v)))
        .collect()
}

/// Neighbour contribution `(p_mle(c|u'), centroid(c, u'))`; an absent
/// centroid only ever pairs with zero probability.
pub struct NeighborTerm<'a> {
    pub p_mle: f64,
    pub centroid: Option<&'a [f64]>,
}

/// Normalized `(1 − λ)·own + (λ/|K|)·Σ p_mle(c|u')·centroid(c, u')`, where an
/// absent own centroid contributes nothing.
pub fn smoothed_query_embedding(
    own: Option<&[f64]>,
    neighbors: &[NeighborTerm<'_>],
    n_neighbors: usize,
    lambda: f64,
    dim: usize,
) -> Result<Vec<f64>, f64> {
    let mut num = vec![0f64; dim];
    if let Some(own) = own {
        num.iter_mut().zip(own).for_each(|(n, &x)| *n = (1.0 - lambda) * x);
    }
    if n_neighbors > 0 && lambda > 0.0 {
        let w = lambda / n_neighbors as f64;
        for t in neighbors {
            if let (Some(c), true) = (t.centroid, t.p_mle > 0.0) {
                num.iter_mut().zip(c).for_each(|(n, &x)| *n += w * t.p_mle * x);
            }
        }
    }
    let norm = vecmath::normalize64(&mut num);
    if norm < DEGENERATE_NORM {
        return Err(norm);
    }
    Ok(num)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub cluster: u32,
    pub p_mle: f64,
    pub p_knn: f64,
    pub p_smoothed: f64,
    /// Unit-norm query embedding for this cluster.
    pub query: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMixture {
    pub user: u32,
    /// Sorted by cluster id; exactly the support of `p_smoothed`.
    pub components: Vec<Component>,
    pub neighbors: Vec<u32>,
}

impl UserMixture {
    pub fn smoothed(&self) -> ClusterDist {
        ClusterDist::from_pairs(self.components.iter().map(|c| (c.cluster, c.p_smoothed)).collect())
    }

    pub fn component(&self, cluster: u32) -> Option<&Component> {
        self.components.iter().find(|c| c.cluster == cluster)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTable {
    pub config: MixtureConfig,
    pub dim: usize,
    pub users: Vec<UserMixture>,
}

/// Builds one mixture per user of `g`.
pub fn build_mixtures(
    g: &EngagementGraph,
    clusters: &ClusterModel,
    table: &EmbeddingTable,
    user_index: &VectorIndex,
    cfg: &MixtureConfig,
) -> Result<MixtureTable> {
    cfg.validate()?;
    let n = g.n_users();
    let dim = table.dim();
    let mle: Vec<ClusterDist> = (0..n as u32)
        .into_par_iter()
        .map(|u| mle_distribution(u, g, clusters, cfg.m))
        .collect::<Result<_>>()?;
    let centroids: Vec<Vec<(u32, Vec<f64>)>> = (0..n as u32)
        .into_par_iter()
        .map(|u| user_centroids(u, g, clusters, table))
        .collect();
    let lookup = |u: u32, c: u32| -> Option<&[f64]> {
        let row = &centroids[u as usize];
        row.binary_search_by_key(&c, |(k, _)| *k)
            .ok()
            .map(|k| row[k].1.as_slice())
    };

    let users = (0..n as u32)
        .into_par_iter()
        .map(|u| {
            let (mut p_knn, neighbors) = knn_distribution(u, table.user(u), user_index, cfg.neighbors, &mle)?;
            if neighbors.is_empty() {
                // a lone user has nobody to borrow from
                p_knn = mle[u as usize].clone();
            }
            let p_mle = &mle[u as usize];
            let p_smoothed = smooth_distribution(p_mle, &p_knn, cfg.lambda)?;
            let mut components = Vec::with_capacity(p_smoothed.len());
            let mut dropped = false;
            for &(c, ps) in p_smoothed.entries() {
                let terms: Vec<NeighborTerm> = neighbors
                    .iter()
                    .map(|&v| NeighborTerm {
                        p_mle: mle[v as usize].get(c),
                        centroid: lookup(v, c),
                    })
                    .collect();
                match smoothed_query_embedding(lookup(u, c), &terms, neighbors.len(), cfg.lambda, dim) {
                    Ok(query) => components.push(Component {
                        cluster: c,
                        p_mle: p_mle.get(c),
                        p_knn: p_knn.get(c),
                        p_smoothed: ps,
                        query,
                    }),
                    Err(norm) => {
                        log::warn!("{}", Error::DegenerateEmbedding { user: u, cluster: c });
                        log::debug!("numerator norm {norm:e}");
                        dropped = true;
                    }
                }
            }
            if dropped {
                let total: f64 = components.iter().map(|c| c.p_smoothed).sum();
                if total == 0.0 {
                    return Err(Error::DegenerateEmbedding {
                        user: u,
                        cluster: p_smoothed.support().next().unwrap_or(0),
                    });
                }
                components.iter_mut().for_each(|c| c.p_smoothed /= total);
            }
            Ok(UserMixture {
                user: u,
                components,
                neighbors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureTable {
        config: *cfg,
        dim,
        users,
    })
}

impl MixtureTable {
    pub fn get(&self, user: u32) -> &UserMixture {
        &self.users[user as usize]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| {
            codec::write_header(w, MIXTURE_MAGIC)?;
            w.write_u32::<LittleEndian>(self.config.m as u32)?;
            w.write_f64::<LittleEndian>(self.config.lambda)?;
            w.write_u32::<LittleEndian>(self.config.neighbors as u32)?;
            w.write_u32::<LittleEndian>(self.dim as u32)?;
            w.write_u32::<LittleEndian>(self.users.len() as u32)?;
            for um in &self.users {
                w.write_u32::<LittleEndian>(um.user)?;
                w.write_u32::<LittleEndian>(um.neighbors.len() as u32)?;
                for &n in &um.neighbors {
                    w.write_u32::<LittleEndian>(n)?;
                }
                w.write_u32::<LittleEndian>(um.components.len() as u32)?;
                for c in &um.components {
                    w.write_u32::<LittleEndian>(c.cluster)?;
                    w.write_f64::<LittleEndian>(c.p_mle)?;
                    w.write_f64::<LittleEndian>(c.p_knn)?;
                    w.write_f64::<LittleEndian>(c.p_smoothed)?;
                    for &x in &c.query {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = codec::open(path)?;
        codec::read_header(&mut r, MIXTURE_MAGIC, path)?;
        let config = MixtureConfig {
            m: r.read_u32::<LittleEndian>()? as usize,
            lambda: r.read_f64::<LittleEndian>()?,
            neighbors: r.read_u32::<LittleEndian>()? as usize,
        };
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut users = Vec::with_capacity(n);
        for _ in 0..n {
            let user = r.read_u32::<LittleEndian>()?;
            let nn = r.read_u32::<LittleEndian>()? as usize;
            let mut neighbors = vec![0u32; nn];
            r.read_u32_into::<LittleEndian>(&mut neighbors)?;
            let nc = r.read_u32::<LittleEndian>()? as usize;
            let mut components = Vec::with_capacity(nc);
            for _ in 0..nc {
                let cluster = r.read_u32::<LittleEndian>()?;
                let p_mle = r.read_f64::<LittleEndian>()?;
                let p_knn = r.read_f64::<LittleEndian>()?;
                let p_smoothed = r.read_f64::<LittleEndian>()?;
                let mut query = vec![0f64; dim];
                r.read_f64_into::<LittleEndian>(&mut query)?;
                components.push(Component {
                    cluster,
                    p_mle,
                    p_knn,
                    p_smoothed,
                    query,
                });
            }
            users.push(UserMixture {
                user,
                components,
                neighbors,
            });
        }
        Ok(MixtureTable { config, dim, users })
    }

    /// `user <TAB> cluster <TAB> p_mle <TAB> p_knn <TAB> p_smoothed`.
    pub fn write_text<W: Write + ?Sized>(&self, g: &EngagementGraph, w: &mut W) -> std::io::Result<()> {
        for um in &self.users {
            for c in &um.components {
                writeln!(
                    w,
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    g.users().name(um.user),
                    c.cluster,
                    c.p_mle,
                    c.p_knn,
                    c.p_smoothed
                )?;
            }
        }
        Ok(())
    }
}
