//! Candidate generation: sample cluster counts from a user's mixture and run
//! one nearest-neighbour query per sampled cluster, plus the single-query
//! unimodal baseline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ann::{self, Backend, GraphParams, Hit, Metric, VectorIndex};
use crate::cluster::ClusterModel;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::EngagementGraph;
use crate::mixture::{ClusterDist, UserMixture};
use crate::vecmath::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Cluster(u32),
    Unimodal,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Cluster(c) => write!(f, "{c}"),
            Source::Unimodal => f.write_str("unimodal"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub item: u32,
    pub source: Source,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub user: u32,
    pub requested: usize,
    /// Score descending, ties to the smaller item id; no duplicate items.
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn items(&self) -> impl Iterator<Item = u32> + '_ {
        self.candidates.iter().map(|c| c.item)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// `user <TAB> rank <TAB> item <TAB> cluster <TAB> score`, rank from 1.
    pub fn write_tsv<W: Write + ?Sized>(&self, g: &EngagementGraph, w: &mut W) -> std::io::Result<()> {
        for (rank, c) in self.candidates.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                g.users().name(self.user),
                rank + 1,
                g.items().name(c.item),
                c.source,
                c.score
            )?;
        }
        Ok(())
    }
}

/// Parses candidate rows written by [`CandidateSet::write_tsv`] into one set
/// per user of `g`, each with `requested = n`.
pub fn read_candidates_tsv<R: std::io::BufRead>(reader: R, g: &EngagementGraph, n: usize) -> Result<Vec<CandidateSet>> {
    let mut sets: Vec<CandidateSet> = (0..g.n_users() as u32)
        .map(|user| CandidateSet {
            user,
            requested: n,
            candidates: Vec::new(),
        })
        .collect();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let bad = |msg: String| Error::Parse { line: k + 1, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        let [user, rank, item, source, score] = cols[..] else {
            return Err(bad(format!("expected 5 columns, found {}", cols.len())));
        };
        let user = g.users().id(user).ok_or_else(|| bad(format!("unknown user {user:?}")))?;
        let item = g.items().id(item).ok_or_else(|| bad(format!("unknown item {item:?}")))?;
        let source = match source {
            "unimodal" => Source::Unimodal,
            c => Source::Cluster(c.parse().map_err(|_| bad(format!("bad cluster {c:?}")))?),
        };
        let score: f32 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        let set = &mut sets[user as usize];
        if rank.parse::<usize>().ok() != Some(set.candidates.len() + 1) {
            return Err(bad(format!("rank {rank} out of sequence")));
        }
        set.candidates.push(Candidate { item, source, score });
    }
    Ok(sets)
}

/// Independent, reproducible stream per user.
pub fn user_rng(seed: u64, user: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(user));
    rng
}

/// Multinomial draw: `n` categorical samples with replacement.
pub fn sample_cluster_counts<R: Rng>(p: &ClusterDist, n: usize, rng: &mut R) -> Result<BTreeMap<u32, usize>> {
    if n == 0 {
        return Err(Error::arg("candidate count n must be ≥ 1"));
    }
    let entries = p.entries();
    let weights = WeightedIndex::new(entries.iter().map(|&(_, w)| w))
        .map_err(|e| Error::arg(format!("cluster distribution not samplable: {e}")))?;
    let mut z = BTreeMap::new();
    for _ in 0..n {
        *z.entry(entries[weights.sample(rng)].0).or_insert(0) += 1;
    }
    Ok(z)
}

/// Item indexes used at retrieval time: one over all items, one per cluster.
#[derive(Debug, Clone)]
pub struct ItemIndexes {
    pub global: VectorIndex,
    pub per_cluster: Vec<VectorIndex>,
}

impl ItemIndexes {
    pub fn build(
        table: &EmbeddingTable,
        clusters: &ClusterModel,
        metric: Metric,
        backend: Backend,
        params: &GraphParams,
    ) -> Result<Self> {
        let all: Vec<u32> = (0..table.items.rows() as u32).collect();
        let global = VectorIndex::build(all, &table.items, metric, backend, params)?;
        let per_cluster = clusters
            .members
            .iter()
            .map(|ms| {
                let rows: Vec<&[f32]> = ms.iter().map(|&i| table.item(i)).collect();
                VectorIndex::build(ms.clone(), &Matrix::from_rows(table.dim(), &rows), metric, backend, params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ItemIndexes { global, per_cluster })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut all = Vec::with_capacity(self.per_cluster.len() + 1);
        all.push(self.global.clone());
        all.extend(self.per_cluster.iter().cloned());
        ann::save_many(path, &all)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let mut all = ann::read_many(path)?;
        if all.is_empty() {
            return Err(Error::format(path, "no indexes in file"));
        }
        let global = all.remove(0);
        Ok(ItemIndexes {
            global,
            per_cluster: all,
        })
    }
}

fn finish(user: u32, n: usize, best: HashMap<u32, Candidate>) -> CandidateSet {
    let mut candidates: Vec<Candidate> = best.into_values().collect();
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    candidates.truncate(n);
    CandidateSet {
        user,
        requested: n,
        candidates,
    }
}

fn merge(best: &mut HashMap<u32, Candidate>, hits: &[Hit], source: Source) {
    for h in hits {
        let cand = Candidate {
            item: h.key,
            source,
            score: h.score,
        };
        best.entry(h.key)
            .and_modify(|old| {
                if cand.score > old.score {
                    *old = cand;
                }
            })
            .or_insert(cand);
    }
}

/// Samples `n` cluster draws from the mixture's smoothed distribution and
/// retrieves `z_c` items from each sampled cluster with its query embedding.
/// `exclude` must be sorted (typically the user's training items).
pub fn retrieve_mixture<R: Rng>(
    mixture: &UserMixture,
    indexes: &[VectorIndex],
    n: usize,
    exclude: &[u32],
    rng: &mut R,
) -> Result<CandidateSet> {
    let z = sample_cluster_counts(&mixture.smoothed(), n, rng)?;
    let queries: HashMap<u32, Vec<f32>> = mixture
        .components
        .iter()
        .map(|c| (c.cluster, vecmath::to_f32(&c.query)))
        .collect();
    let index_of = |c: u32| -> Result<&VectorIndex> {
        indexes
            .get(c as usize)
            .ok_or_else(|| Error::arg(format!("no index for cluster {c}")))
    };

    let mut best: HashMap<u32, Candidate> = HashMap::new();
    let mut open = Vec::new();
    for (&c, &zc) in &z {
        let hits = index_of(c)?.query(&queries[&c], zc, exclude)?;
        if hits.len() == zc {
            open.push((c, zc));
        } else {
            log::debug!("cluster {c}: {} eligible items for {zc} draws", hits.len());
        }
        merge(&mut best, &hits, Source::Cluster(c));
    }

    let deficit = n.saturating_sub(best.len());
    let open_mass: usize = open.iter().map(|&(_, zc)| zc).sum();
    if deficit > 0 && open_mass > 0 {
        for &(c, zc) in &open {
            let extra = (deficit * zc).div_ceil(open_mass);
            let hits = index_of(c)?.query(&queries[&c], zc + extra, exclude)?;
            merge(&mut best, &hits, Source::Cluster(c));
        }
    }
    Ok(finish(mixture.user, n, best))
}

/// Greedy top-`n` with a single user embedding.
pub fn retrieve_unimodal(user: u32, user_vec: &[f32], index: &VectorIndex, n: usize, exclude: &[u32]) -> Result<CandidateSet> {
    let hits = index.query(user_vec, n, exclude)?;
    let mut best = HashMap::new();
    merge(&mut best, &hits, Source::Unimodal);
    Ok(finish(user, n, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Component;

    fn two_cluster_setup() -> (Vec<VectorIndex>, UserMixture) {
        // cluster 0 holds items 0..4 near +x, cluster 1 holds 4..8 near +y
        let c0 = Matrix::from_rows(2, &[[1.0f32, 0.1], [1.0, 0.2], [1.0, 0.3], [1.0, 0.4]]);
        let c1 = Matrix::from_rows(2, &[[0.1f32, 1.0], [0.2, 1.0], [0.3, 1.0], [0.4, 1.0]]);
        let idx = vec![
            VectorIndex::exact(vec![0, 1, 2, 3], &c0, Metric::InnerProduct).unwrap(),
            VectorIndex::exact(vec![4, 5, 6, 7], &c1, Metric::InnerProduct).unwrap(),
        ];
        let mix = UserMixture {
            user: 0,
            components: vec![
                Component {
                    cluster: 0,
                    p_mle: 0.5,
                    p_knn: 0.5,
                    p_smoothed: 0.5,
                    query: vec![1.0, 0.0],
                },
                Component {
                    cluster: 1,
                    p_mle: 0.5,
                    p_knn: 0.5,
                    p_smoothed: 0.5,
                    query: vec![0.0, 1.0],
                },
            ],
            neighbors: vec![],
        };
        (idx, mix)
    }

    #[test]
    fn forced_single_cluster_counts() {
        let p = ClusterDist::from_pairs(vec![(3, 1.0)]);
        let z = sample_cluster_counts(&p, 17, &mut user_rng(0, 0)).unwrap();
        assert_eq!(z, BTreeMap::from([(3, 17)]));
        assert!(matches!(sample_cluster_counts(&p, 0, &mut user_rng(0, 0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn balanced_counts_converge() {
        let p = ClusterDist::from_pairs(vec![(1, 0.5), (2, 0.5)]);
        let n = 100_000;
        let z = sample_cluster_counts(&p, n, &mut user_rng(5, 1)).unwrap();
        assert_eq!(z.values().sum::<usize>(), n);
        assert!((z[&1] as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn single_cluster_mixture_equals_plain_query() {
        let (idx, mut mix) = two_cluster_setup();
        mix.components.truncate(1);
        mix.components[0].p_smoothed = 1.0;
        let got = retrieve_mixture(&mix, &idx, 3, &[], &mut user_rng(1, 0)).unwrap();
        let plain = idx[0].query(&[1.0, 0.0], 3, &[]).unwrap();
        assert_eq!(got.items().collect::<Vec<_>>(), plain.iter().map(|h| h.key).collect::<Vec<_>>());
    }

    #[test]
    fn counts_split_across_clusters_match_oracle() {
        let (idx, mix) = two_cluster_setup();
        for seed in 0..20 {
            let z = sample_cluster_counts(&mix.smoothed(), 4, &mut user_rng(seed, 0)).unwrap();
            let got = retrieve_mixture(&mix, &idx, 4, &[], &mut user_rng(seed, 0)).unwrap();
            // oracle: enumerate every item of each cluster and keep the top z_c by score
            let mut want = Vec::new();
            for (&c, &zc) in &z {
                let q = &mix.components[c as usize].query;
                let mut scored: Vec<(f32, u32)> = (0..4)
                    .map(|k| {
                        let key = idx[c as usize].keys()[k];
                        let v = idx[c as usize].stored(k);
                        ((v[0] as f64 * q[0] + v[1] as f64 * q[1]) as f32, key)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                want.extend(scored.iter().take(zc).map(|s| s.1));
            }
            want.sort_unstable();
            let mut have: Vec<u32> = got.items().collect();
            have.sort_unstable();
            assert_eq!(have, want);
        }
    }

    #[test]
    fn exclusion_and_topup() {
        let (idx, mix) = two_cluster_setup();
        // excluding most of cluster 0 forces the deficit onto cluster 1
        let excl = [0, 1, 2];
        for seed in 0..10 {
            let got = retrieve_mixture(&mix, &idx, 4, &excl, &mut user_rng(seed, 0)).unwrap();
            assert!(got.items().all(|i| !excl.contains(&i)));
            let mut items: Vec<u32> = got.items().collect();
            items.dedup();
            assert_eq!(items.len(), got.len());
            assert!(got.len() <= 4);
        }
    }

    #[test]
    fn unimodal_matches_index() {
        let m = Matrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 1.0], [0.7, 0.7]]);
        let idx = VectorIndex::exact(vec![0, 1, 2], &m, Metric::Cosine).unwrap();
        let got = retrieve_unimodal(0, &[0.0, 1.0], &idx, 10, &[]).unwrap();
        assert_eq!(got.items().collect::<Vec<_>>(), vec![1, 2, 0]);
        let got = retrieve_unimodal(0, &[0.0, 1.0], &idx, 10, &[1]).unwrap();
        assert_eq!(got.items().collect::<Vec<_>>(), vec![2, 0]);
    }

    #[test]
    fn tsv_round_trip() {
        let g = EngagementGraph::from_raw_edges([("a", "x", 0), ("b", "y", 0), ("b", "z", 0)]).unwrap();
        let set = CandidateSet {
            user: 1,
            requested: 3,
            candidates: vec![
                Candidate { item: 2, source: Source::Cluster(7), score: 0.1 + 0.2 },
                Candidate { item: 0, source: Source::Unimodal, score: -1.5e-7 },
            ],
        };
        let mut buf = Vec::new();
        set.write_tsv(&g, &mut buf).unwrap();
        let back = read_candidates_tsv(&buf[..], &g, 3).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].is_empty());
        assert_eq!(back[1], set);
        assert!(matches!(
            read_candidates_tsv("b\t2\tx\t0\t1.0\n".as_bytes(), &g, 3),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
