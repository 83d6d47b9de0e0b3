use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::{Backend, GraphParams, Metric};
use crate::embed::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::mixture::MixtureConfig;
use crate::synth::SynthConfig;

/// Dataset presets. Each picks a default cluster count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    HepTh,
    Dblp,
    Twitter,
    Synthetic,
}

impl Preset {
    pub fn default_clusters(self) -> usize {
        match self {
            Preset::HepTh => 2000,
            Preset::Dblp => 10_000,
            Preset::Twitter => 40_000,
            Preset::Synthetic => 35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Edge list read by `ingest`. Relative paths resolve against the config file.
    pub graph: Option<PathBuf>,
    /// Artifact directory. `IMIX_MODEL_DIR` overrides it from the CLI.
    pub model_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            graph: None,
            model_dir: PathBuf::from("model"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub holdout_fraction: f64,
    /// Keep at most this many training edges per user (sparsified variant).
    pub max_train_edges_per_user: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            holdout_fraction: 0.2,
            max_train_edges_per_user: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Falls back to the preset's count when absent.
    pub k: Option<usize>,
    pub epochs: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: None, epochs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub backend: Backend,
    /// Similarity used to retrieve items.
    pub item_metric: Metric,
    /// Similarity used to find neighbouring users.
    pub user_metric: Metric,
    pub graph: GraphParams,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            backend: Backend::Exact,
            item_metric: Metric::InnerProduct,
            user_metric: Metric::Cosine,
            graph: GraphParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    /// Candidates written per user by the `retrieve` stage.
    pub n: usize,
    /// Drop the user's training items from the candidates.
    pub exclude_train: bool,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig {
            n: 50,
            exclude_train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: Preset,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub index: IndexConfig,
    pub mixture: MixtureConfig,
    pub retrieve: RetrieveConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            preset: Preset::HepTh,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            index: IndexConfig::default(),
            mixture: MixtureConfig::default(),
            retrieve: RetrieveConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative graph path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(g), Some(dir)) = (cfg.paths.graph.as_mut(), path.parent()) {
            if g.is_relative() {
                *g = dir.join(&*g);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn k_clusters(&self) -> usize {
        self.cluster.k.unwrap_or_else(|| self.preset.default_clusters())
    }

    /// Every cutoff the eval stage needs candidates for, plus the retrieve size.
    pub fn retrieval_sizes(&self) -> Vec<usize> {
        let mut ns = self.eval.ks.clone();
        ns.push(self.retrieve.n);
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.split.holdout_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split.holdout_fraction {f} not in (0, 1)")));
        }
        if self.split.max_train_edges_per_user == Some(0) {
            return Err(Error::Config("split.max_train_edges_per_user must be ≥ 1".into()));
        }
        if self.k_clusters() == 0 || self.cluster.epochs == 0 {
            return Err(Error::Config("cluster.k and cluster.epochs must be ≥ 1".into()));
        }
        if self.retrieve.n == 0 {
            return Err(Error::Config("retrieve.n must be ≥ 1".into()));
        }
        if self.index.graph.max_degree < 2 || self.index.graph.query_breadth == 0 {
            return Err(Error::Config("index.graph needs max_degree ≥ 2 and query_breadth ≥ 1".into()));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.train.validate().map_err(wrap)?;
        self.mixture.validate().map_err(wrap)?;
        self.eval.validate().map_err(wrap)?;
        Ok(())
    }
}
