//! On-disk stages. Each stage reads its prerequisites' artifacts from the
//! model directory, writes its own atomically and records them in
//! `manifest.json` together with a cumulative configuration hash.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::ann::VectorIndex;
use crate::cluster::ClusterModel;
use crate::codec::write_atomic;
use crate::embed::{train, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, reports_pretty, reports_tsv, EvalReport};
use crate::graph::{EngagementGraph, HoldoutSplit};
use crate::mixture::{build_mixtures, MixtureTable};
use crate::retrieve::{read_candidates_tsv, CandidateSet, ItemIndexes};

use super::experiment::{
    candidates, cluster_items, item_indexes, make_split, mixture_config, representation, user_index, Strategy,
};
use super::PipelineConfig;

pub const MANIFEST: &str = "manifest.json";
const GRAPH: &str = "graph.bin";
const TRAIN: &str = "train.bin";
const HOLDOUT: &str = "holdout.bin";
const EMBEDDINGS: &str = "embeddings.bin";
const CLUSTERS: &str = "clusters.bin";
const ITEM_INDEX: &str = "item-index.bin";
const USER_INDEX: &str = "user-index.bin";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_TXT: &str = "report.txt";
const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Split,
    Train,
    Cluster,
    Index,
    Mixtures,
    Retrieve,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Train,
        Stage::Cluster,
        Stage::Index,
        Stage::Mixtures,
        Stage::Retrieve,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Cluster => "cluster",
            Stage::Index => "index",
            Stage::Mixtures => "mixtures",
            Stage::Retrieve => "retrieve",
            Stage::Eval => "eval",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn prerequisites(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Ingest => &[],
            Split => &[Ingest],
            Train => &[Split],
            Cluster => &[Train],
            Index => &[Train, Cluster],
            Mixtures => &[Split, Train, Cluster, Index],
            Retrieve => &[Split, Train, Cluster, Index, Mixtures],
            Eval => &[Split, Train, Mixtures, Retrieve],
        }
    }

    fn position(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }

    /// The slice of the configuration this stage depends on directly.
    fn own_config(self, cfg: &PipelineConfig) -> Result<serde_json::Value> {
        Ok(match self {
            Stage::Ingest => match &cfg.paths.graph {
                Some(path) => json!({ "graph_sha256": hash_file(path)? }),
                None => json!({ "synth": cfg.synth }),
            },
            Stage::Split => json!({ "seed": cfg.seed, "split": cfg.split }),
            Stage::Train => json!({ "train": cfg.train }),
            Stage::Cluster => json!({ "seed": cfg.seed, "k": cfg.k_clusters(), "epochs": cfg.cluster.epochs }),
            Stage::Index => json!({ "index": cfg.index }),
            Stage::Mixtures => json!({ "mixture": cfg.mixture }),
            Stage::Retrieve => json!({
                "seed": cfg.seed,
                "retrieve": cfg.retrieve,
                "sizes": cfg.retrieval_sizes(),
            }),
            Stage::Eval => json!({ "eval": cfg.eval }),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of this stage's configuration chained with every earlier stage's.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Output file (relative to the model directory) → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST), |w| w.write_all(text.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::format(path, e.to_string()))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Cumulative configuration hashes of every stage, in pipeline order.
fn config_hashes(cfg: &PipelineConfig) -> Result<Vec<(String, serde_json::Value)>> {
    let mut prev = String::new();
    Stage::ALL
        .into_iter()
        .map(|s| {
            let own = s.own_config(cfg)?;
            let mut h = Sha256::new();
            h.update(prev.as_bytes());
            h.update(s.name().as_bytes());
            h.update(own.to_string().as_bytes());
            prev = hex(&h.finalize());
            Ok((prev.clone(), own))
        })
        .collect()
}

fn strategy_file(dir: &str, strategy: Strategy, n: usize) -> String {
    format!("{dir}/{strategy}-{n}.tsv")
}

fn mixture_file(strategy: Strategy) -> String {
    format!("mixture-{strategy}.bin")
}

/// Reads artifacts from a model directory after checking the manifest.
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: PipelineConfig,
    manifest: Manifest,
    hashes: Vec<(String, serde_json::Value)>,
}

impl Workspace {
    pub fn open(dir: &Path, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(dir)?;
        Ok(Workspace {
            dir: dir.to_path_buf(),
            cfg: cfg.clone(),
            manifest: Manifest::load(dir)?,
            hashes: config_hashes(cfg)?,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Fails unless every prerequisite ran with the current configuration
    /// and its files are unchanged.
    pub fn check_ready(&self, stage: Stage) -> Result<()> {
        for &p in stage.prerequisites() {
            self.verify(p).map_err(|e| match e {
                Error::MissingStage { .. } => Error::MissingStage {
                    stage: stage.name().into(),
                    prerequisite: p.name().into(),
                },
                e => e,
            })?;
        }
        Ok(())
    }

    /// Checks that `stage` ran with the current configuration and that its
    /// recorded outputs are intact.
    pub fn verify(&self, stage: Stage) -> Result<()> {
        let Some(rec) = self.manifest.stages.get(&stage) else {
            return Err(Error::MissingStage {
                stage: stage.name().into(),
                prerequisite: stage.name().into(),
            });
        };
        let stale = |reason: String| Error::StaleArtifact {
            stage: stage.name().into(),
            reason,
        };
        if rec.config_hash != self.hashes[stage.position()].0 {
            return Err(stale("its configuration or input changed since it ran".into()));
        }
        for (file, sha) in &rec.outputs {
            let path = self.path(file);
            if !path.exists() {
                return Err(stale(format!("{file} is missing")));
            }
            if &hash_file(&path)? != sha {
                return Err(stale(format!("{file} was modified")));
            }
        }
        Ok(())
    }

    fn record(&mut self, stage: Stage, outputs: Vec<String>) -> Result<()> {
        let mut files = BTreeMap::new();
        for f in outputs {
            let sha = hash_file(&self.path(&f))?;
            files.insert(f, sha);
        }
        let (config_hash, config) = self.hashes[stage.position()].clone();
        // anything downstream was built from the previous artifacts
        self.manifest.stages.retain(|&s, _| s < stage);
        self.manifest.stages.insert(
            stage,
            StageRecord {
                config_hash,
                config,
                outputs: files,
            },
        );
        self.manifest.save(&self.dir)
    }

    pub fn graph(&self) -> Result<EngagementGraph> {
        EngagementGraph::read(&self.path(GRAPH))
    }

    pub fn split(&self) -> Result<HoldoutSplit> {
        let train = EngagementGraph::read(&self.path(TRAIN))?;
        let holdout = HoldoutSplit::read_holdout(&self.path(HOLDOUT), train.n_items())?;
        if holdout.len() != train.n_users() {
            return Err(Error::format(self.path(HOLDOUT), "user count differs from the training graph"));
        }
        Ok(HoldoutSplit { train, holdout })
    }

    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::read(&self.path(EMBEDDINGS))
    }

    pub fn clusters(&self) -> Result<ClusterModel> {
        ClusterModel::read(&self.path(CLUSTERS))
    }

    pub fn item_indexes(&self) -> Result<ItemIndexes> {
        ItemIndexes::read(&self.path(ITEM_INDEX))
    }

    pub fn user_index(&self) -> Result<VectorIndex> {
        VectorIndex::read(&self.path(USER_INDEX))
    }

    pub fn mixtures(&self, strategy: Strategy) -> Result<Option<MixtureTable>> {
        match strategy {
            Strategy::Unimodal => Ok(None),
            s => MixtureTable::read(&self.path(&mixture_file(s))).map(Some),
        }
    }

    pub fn candidates(&self, strategy: Strategy, n: usize, g: &EngagementGraph) -> Result<Vec<CandidateSet>> {
        let path = self.path(&strategy_file("candidates", strategy, n));
        let r = BufReader::new(File::open(&path).map_err(|e| Error::format(&path, e.to_string()))?);
        read_candidates_tsv(r, g, n)
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        self.check_ready(stage)?;
        log::info!("stage {stage}");
        let outputs = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Split => self.split_stage()?,
            Stage::Train => self.train_stage()?,
            Stage::Cluster => self.cluster_stage()?,
            Stage::Index => self.index_stage()?,
            Stage::Mixtures => self.mixtures_stage()?,
            Stage::Retrieve => self.retrieve_stage()?,
            Stage::Eval => self.eval_stage()?,
        };
        self.record(stage, outputs)
    }

    /// Runs `from` and every later stage.
    pub fn run_from(&mut self, from: Stage) -> Result<()> {
        for s in Stage::ALL.into_iter().filter(|&s| s >= from) {
            self.run(s)?;
        }
        Ok(())
    }

    fn ingest(&self) -> Result<Vec<String>> {
        let g = match &self.cfg.paths.graph {
            Some(path) => EngagementGraph::load_edge_list(path)?,
            None => {
                log::info!("no graph path configured; generating the synthetic graph");
                self.cfg.synth.generate()?.graph
            }
        };
        log::info!("{} users, {} items, {} edges", g.n_users(), g.n_items(), g.n_edges());
        g.save(&self.path(GRAPH))?;
        Ok(vec![GRAPH.into()])
    }

    fn split_stage(&self) -> Result<Vec<String>> {
        let split = make_split(&self.graph()?, &self.cfg)?;
        log::info!(
            "{} training edges, {} held out",
            split.train.n_edges(),
            split.n_holdout()
        );
        split.train.save(&self.path(TRAIN))?;
        split.save_holdout(&self.path(HOLDOUT))?;
        Ok(vec![TRAIN.into(), HOLDOUT.into()])
    }

    fn train_stage(&self) -> Result<Vec<String>> {
        let split = self.split()?;
        let table = train(&split.train, &self.cfg.train)?;
        table.save(&self.path(EMBEDDINGS))?;
        Ok(vec![EMBEDDINGS.into()])
    }

    fn cluster_stage(&self) -> Result<Vec<String>> {
        let clusters = cluster_items(&self.embeddings()?, &self.cfg)?;
        if let Some(obj) = clusters.objective_trace.last() {
            log::info!("{} clusters, objective {obj:.4}", clusters.k());
        }
        clusters.save(&self.path(CLUSTERS))?;
        Ok(vec![CLUSTERS.into()])
    }

    fn index_stage(&self) -> Result<Vec<String>> {
        let table = self.embeddings()?;
        let clusters = self.clusters()?;
        item_indexes(&table, &clusters, &self.cfg)?.save(&self.path(ITEM_INDEX))?;
        user_index(&table, &self.cfg)?.save(&self.path(USER_INDEX))?;
        Ok(vec![ITEM_INDEX.into(), USER_INDEX.into()])
    }

    fn mixtures_stage(&self) -> Result<Vec<String>> {
        let split = self.split()?;
        let table = self.embeddings()?;
        let clusters = self.clusters()?;
        let users = self.user_index()?;
        let mut out = Vec::new();
        for s in Strategy::ALL {
            if let Some(mix) = mixture_config(s, &self.cfg) {
                let name = mixture_file(s);
                build_mixtures(&split.train, &clusters, &table, &users, &mix)?.save(&self.path(&name))?;
                out.push(name);
            }
        }
        Ok(out)
    }

    fn retrieve_stage(&self) -> Result<Vec<String>> {
        let split = self.split()?;
        let table = self.embeddings()?;
        let items = self.item_indexes()?;
        std::fs::create_dir_all(self.path("candidates"))?;
        let mut out = Vec::new();
        for s in Strategy::ALL {
            let mix = self.mixtures(s)?;
            for n in self.cfg.retrieval_sizes() {
                let sets: Vec<CandidateSet> = (0..split.train.n_users() as u32)
                    .into_par_iter()
                    .map(|u| candidates(s, &split.train, &table, &items, mix.as_ref(), u, n, &self.cfg))
                    .collect::<Result<_>>()?;
                let name = strategy_file("candidates", s, n);
                write_atomic(&self.path(&name), |w| {
                    sets.iter().try_for_each(|set| set.write_tsv(&split.train, w))
                })?;
                out.push(name);
            }
        }
        Ok(out)
    }

    fn eval_stage(&self) -> Result<Vec<String>> {
        let reports = self.evaluate()?;
        let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
        write_atomic(&self.path(REPORT_TSV), |w| w.write_all(reports_tsv(&reports).as_bytes()))?;
        write_atomic(&self.path(REPORT_TXT), |w| w.write_all(reports_pretty(&reports).as_bytes()))?;
        write_atomic(&self.path(REPORT_JSON), |w| w.write_all(json.as_bytes()))?;
        Ok(vec![REPORT_TSV.into(), REPORT_TXT.into(), REPORT_JSON.into()])
    }

    /// Scores the stored candidate files of every strategy.
    pub fn evaluate(&self) -> Result<Vec<EvalReport>> {
        let split = self.split()?;
        let table = self.embeddings()?;
        Strategy::ALL
            .into_iter()
            .map(|s| {
                let mix = self.mixtures(s)?;
                let per_k: BTreeMap<usize, Vec<CandidateSet>> = self
                    .cfg
                    .eval
                    .ks
                    .iter()
                    .map(|&k| Ok((k, self.candidates(s, k, &split.train)?)))
                    .collect::<Result<_>>()?;
                evaluate(
                    s.name(),
                    &split,
                    &table,
                    &self.cfg.eval,
                    |u, k| Ok(per_k[&k][u as usize].clone()),
                    |u| representation(s, &table, mix.as_ref(), u),
                )
            })
            .collect()
    }
}

/// Runs every stage in order into `dir`.
pub fn run_pipeline(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<EvalReport>> {
    let mut ws = Workspace::open(dir, cfg)?;
    ws.run_from(Stage::Ingest)?;
    ws.evaluate()
}
