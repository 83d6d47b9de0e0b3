//! In-memory end-to-end run: split, train, cluster, index, mix, retrieve, evaluate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ann::VectorIndex;
use crate::cluster::{spherical_kmeans, ClusterModel};
use crate::embed::{train, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, unimodal_representation, EvalReport, Representation};
use crate::graph::{split_holdout, EngagementGraph, HoldoutSplit};
use crate::mixture::{build_mixtures, MixtureConfig, MixtureTable};
use crate::retrieve::{retrieve_mixture, retrieve_unimodal, user_rng, CandidateSet, ItemIndexes};

use super::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One embedding per user, greedy top-n.
    Unimodal,
    /// Unsmoothed mixture (λ = 0).
    Mixture,
    /// Neighbour-smoothed mixture at the configured λ.
    KnnEmbed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Unimodal, Strategy::Mixture, Strategy::KnnEmbed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Unimodal => "unimodal",
            Strategy::Mixture => "mixture",
            Strategy::KnnEmbed => "knn-embed",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown strategy {s:?} (unimodal, mixture, knn-embed)")))
    }
}

/// Holdout split plus the optional sparsification of its training side.
pub fn make_split(g: &EngagementGraph, cfg: &PipelineConfig) -> Result<HoldoutSplit> {
    let split = split_holdout(g, cfg.split.holdout_fraction, cfg.seed)?;
    match cfg.split.max_train_edges_per_user {
        Some(cap) => split.sparsify(cap, cfg.seed.wrapping_add(1)),
        None => Ok(split),
    }
}

pub fn cluster_items(table: &EmbeddingTable, cfg: &PipelineConfig) -> Result<ClusterModel> {
    spherical_kmeans(&table.items, cfg.k_clusters(), cfg.cluster.epochs, cfg.seed)
}

pub fn user_index(table: &EmbeddingTable, cfg: &PipelineConfig) -> Result<VectorIndex> {
    let keys = (0..table.users.rows() as u32).collect();
    VectorIndex::build(keys, &table.users, cfg.index.user_metric, cfg.index.backend, &cfg.index.graph)
}

pub fn item_indexes(table: &EmbeddingTable, clusters: &ClusterModel, cfg: &PipelineConfig) -> Result<ItemIndexes> {
    ItemIndexes::build(table, clusters, cfg.index.item_metric, cfg.index.backend, &cfg.index.graph)
}

/// Mixture settings for a strategy; `None` for the unimodal baseline.
pub fn mixture_config(strategy: Strategy, cfg: &PipelineConfig) -> Option<MixtureConfig> {
    match strategy {
        Strategy::Unimodal => None,
        Strategy::Mixture => Some(MixtureConfig { lambda: 0.0, ..cfg.mixture }),
        Strategy::KnnEmbed => Some(cfg.mixture),
    }
}

/// Everything downstream of the split that the strategies share.
pub struct Models {
    pub split: HoldoutSplit,
    pub table: EmbeddingTable,
    pub clusters: ClusterModel,
    pub items: ItemIndexes,
    pub users: VectorIndex,
}

impl Models {
    pub fn fit(split: HoldoutSplit, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let table = train(&split.train, &cfg.train)?;
        let clusters = cluster_items(&table, cfg)?;
        let items = item_indexes(&table, &clusters, cfg)?;
        let users = user_index(&table, cfg)?;
        Ok(Models {
            split,
            table,
            clusters,
            items,
            users,
        })
    }

    pub fn mixtures(&self, mix: &MixtureConfig) -> Result<MixtureTable> {
        build_mixtures(&self.split.train, &self.clusters, &self.table, &self.users, mix)
    }

    /// Size-`n` candidates for `user` under `strategy`.
    pub fn candidates(
        &self,
        strategy: Strategy,
        mixtures: Option<&MixtureTable>,
        user: u32,
        n: usize,
        cfg: &PipelineConfig,
    ) -> Result<CandidateSet> {
        candidates(
            strategy,
            &self.split.train,
            &self.table,
            &self.items,
            mixtures,
            user,
            n,
            cfg,
        )
    }

    pub fn evaluate(&self, strategy: Strategy, mixtures: Option<&MixtureTable>, cfg: &PipelineConfig) -> Result<EvalReport> {
        evaluate(
            strategy.name(),
            &self.split,
            &self.table,
            &cfg.eval,
            |u, k| self.candidates(strategy, mixtures, u, k, cfg),
            |u| representation(strategy, &self.table, mixtures, u),
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub fn candidates(
    strategy: Strategy,
    train: &EngagementGraph,
    table: &EmbeddingTable,
    items: &ItemIndexes,
    mixtures: Option<&MixtureTable>,
    user: u32,
    n: usize,
    cfg: &PipelineConfig,
) -> Result<CandidateSet> {
    let exclude: &[u32] = if cfg.retrieve.exclude_train {
        train.items_of(user)
    } else {
        &[]
    };
    match (strategy, mixtures) {
        (Strategy::Unimodal, _) => retrieve_unimodal(user, table.user(user), &items.global, n, exclude),
        (_, Some(mix)) => {
            let mut rng = user_rng(cfg.seed, user);
            retrieve_mixture(mix.get(user), &items.per_cluster, n, exclude, &mut rng)
        }
        (_, None) => Err(Error::arg(format!("strategy {strategy} needs a mixture table"))),
    }
}

pub fn representation(
    strategy: Strategy,
    table: &EmbeddingTable,
    mixtures: Option<&MixtureTable>,
    user: u32,
) -> Result<Representation> {
    match (strategy, mixtures) {
        (Strategy::Unimodal, _) => Ok(unimodal_representation(table.user(user))),
        (_, Some(mix)) => Ok(mix
            .get(user)
            .components
            .iter()
            .map(|c| (c.p_smoothed, c.query.clone()))
            .collect()),
        (_, None) => Err(Error::arg(format!("strategy {strategy} needs a mixture table"))),
    }
}

/// Fits once and reports every strategy, in [`Strategy::ALL`] order.
pub fn run_experiment(g: &EngagementGraph, cfg: &PipelineConfig) -> Result<Vec<EvalReport>> {
    let models = Models::fit(make_split(g, cfg)?, cfg)?;
    Strategy::ALL
        .into_iter()
        .map(|s| {
            let mix = mixture_config(s, cfg).map(|m| models.mixtures(&m)).transpose()?;
            models.evaluate(s, mix.as_ref(), cfg)
        })
        .collect()
}
