//! Configuration, in-memory experiments and the on-disk stage runner.

mod config;
mod experiment;
mod stages;

pub use config::{ClusterConfig, IndexConfig, Paths, PipelineConfig, Preset, RetrieveConfig, SplitConfig};
pub use experiment::{
    candidates, cluster_items, item_indexes, make_split, mixture_config, representation, run_experiment, user_index,
    Models, Strategy,
};
pub use stages::{run_pipeline, Manifest, Stage, StageRecord, Workspace, MANIFEST, REPORT_TSV, REPORT_TXT};
