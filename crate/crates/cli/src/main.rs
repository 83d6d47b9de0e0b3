use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imix::codec::write_atomic;
use imix::pipeline::{PipelineConfig, Preset, Stage, Strategy, Workspace, MANIFEST, REPORT_TXT};
use imix::{Backend, EmbeddingTable, Error};

#[derive(Parser)]
#[command(name = "imix", version, about = "Multi-interest candidate retrieval pipeline")]
struct Cli {
    /// More logging (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted multi-interest edge list.
    Synth(SynthArgs),
    /// Read the edge list (or generate the synthetic graph) into the model dir.
    Ingest(Common),
    /// Hold out a fraction of each user's engagements.
    Split(Common),
    /// Train user and item embeddings.
    Train(Common),
    /// Spherical k-means over item embeddings.
    Cluster(Common),
    /// Build item and user nearest-neighbour indexes.
    Index(Common),
    /// Build the unsmoothed and smoothed user mixtures.
    Mixtures(Common),
    /// Retrieve candidates for every user and strategy.
    Retrieve(RetrieveArgs),
    /// Score stored candidates against the holdout.
    Eval(Common),
    /// Run every stage, optionally starting later.
    Run(RunArgs),
    /// Print the effective configuration as TOML.
    Config(Common),
    /// Print the stage manifest.
    Status(Common),
    /// Dump trained embeddings as text.
    ExportEmbeddings(ExportArgs),
    /// Dump a mixture table as text.
    ExportMixtures(ExportMixturesArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config file (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, env = "IMIX_MODEL_DIR")]
    model_dir: Option<PathBuf>,
    /// Edge list: `user item [time]` per line.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    /// Pipeline and training seed
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Number of item clusters.
    #[arg(long)]
    clusters: Option<usize>,
    /// Mixture truncation size.
    #[arg(long)]
    m: Option<usize>,
    /// Smoothing weight in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Neighbouring users averaged into the smoothed mixture.
    #[arg(long)]
    neighbors: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training threads (1 is deterministic).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Any config key, e.g. `--set split.holdout_fraction=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output edge list.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write `item <TAB> group` for the planted groups.
    #[arg(long)]
    groups_out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    /// Also print this strategy's candidates (user, rank, item, cluster, score).
    #[arg(long, value_enum)]
    print: Option<StrategyArg>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "ingest")]
    from: StageArg,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "items")]
    side: Side,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMixturesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "knn-embed")]
    strategy: StrategyArg,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Users,
    Items,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    HepTh,
    Dblp,
    Twitter,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Exact,
    LayeredGraph,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Unimodal,
    Mixture,
    KnnEmbed,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Ingest,
    Split,
    Train,
    Cluster,
    Index,
    Mixtures,
    Retrieve,
    Eval,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Unimodal => Strategy::Unimodal,
            StrategyArg::Mixture => Strategy::Mixture,
            StrategyArg::KnnEmbed => Strategy::KnnEmbed,
        }
    }
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        Stage::ALL[s as usize]
    }
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if !self.sets.is_empty() {
            let mut table: toml::Table = toml::from_str(&cfg.to_toml()).expect("config round-trips");
            for kv in &self.sets {
                set_key(&mut table, kv)?;
            }
            let text = toml::to_string(&table).expect("table serializes");
            cfg = PipelineConfig::from_toml(&text)?;
        }
        if let Some(p) = &self.graph {
            cfg.paths.graph = Some(p.clone());
        }
        if let Some(d) = &self.model_dir {
            cfg.paths.model_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(p) = self.preset {
            cfg.preset = match p {
                PresetArg::HepTh => Preset::HepTh,
                PresetArg::Dblp => Preset::Dblp,
                PresetArg::Twitter => Preset::Twitter,
                PresetArg::Synthetic => Preset::Synthetic,
            };
        }
        if let Some(b) = self.backend {
            cfg.index.backend = match b {
                BackendArg::Exact => Backend::Exact,
                BackendArg::LayeredGraph => Backend::LayeredGraph,
            };
        }
        cfg.cluster.k = self.clusters.or(cfg.cluster.k);
        cfg.mixture.m = self.m.unwrap_or(cfg.mixture.m);
        cfg.mixture.lambda = self.lambda.unwrap_or(cfg.mixture.lambda);
        cfg.mixture.neighbors = self.neighbors.unwrap_or(cfg.mixture.neighbors);
        cfg.train.dim = self.dim.unwrap_or(cfg.train.dim);
        cfg.train.epochs = self.epochs.unwrap_or(cfg.train.epochs);
        cfg.train.threads = self.threads.unwrap_or(cfg.train.threads);
        cfg.validate()?;
        Ok(cfg)
    }

    fn workspace(&self) -> Result<Workspace, Error> {
        let cfg = self.config()?;
        Workspace::open(&cfg.paths.model_dir.clone(), &cfg)
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is parsed as TOML and
/// falls back to a plain string.
fn set_key(table: &mut toml::Table, kv: &str) -> Result<(), Error> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config("empty --set key".into()))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn output(path: Option<&PathBuf>, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), Error> {
    match path {
        Some(p) => write_atomic(p, |w| fill(w)),
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            match fill(&mut w).and_then(|()| w.flush()) {
                // a closed pipe (`| head`) is not an error
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn run_stage(common: &Common, stage: Stage) -> Result<Workspace, Error> {
    let mut ws = common.workspace()?;
    ws.run(stage)?;
    Ok(ws)
}

fn print_report(ws: &Workspace) -> Result<(), Error> {
    let text = std::fs::read_to_string(ws.dir.join(REPORT_TXT))?;
    print!("{text}");
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = a.common.config()?;
            let s = cfg.synth.generate()?;
            write_atomic(&a.out, |w| s.graph.write_edge_list(w))?;
            if let Some(p) = &a.groups_out {
                write_atomic(p, |w| {
                    for (i, g) in s.item_group.iter().enumerate() {
                        writeln!(w, "{}\t{g}", s.graph.items().name(i as u32))?;
                    }
                    Ok(())
                })?;
            }
            log::info!(
                "{} users, {} items, {} edges",
                s.graph.n_users(),
                s.graph.n_items(),
                s.graph.n_edges()
            );
        }
        Command::Ingest(c) => drop(run_stage(&c, Stage::Ingest)?),
        Command::Split(c) => drop(run_stage(&c, Stage::Split)?),
        Command::Train(c) => drop(run_stage(&c, Stage::Train)?),
        Command::Cluster(c) => drop(run_stage(&c, Stage::Cluster)?),
        Command::Index(c) => drop(run_stage(&c, Stage::Index)?),
        Command::Mixtures(c) => drop(run_stage(&c, Stage::Mixtures)?),
        Command::Retrieve(a) => {
            let ws = run_stage(&a.common, Stage::Retrieve)?;
            if let Some(s) = a.print {
                let split = ws.split()?;
                let sets = ws.candidates(s.into(), ws.cfg.retrieve.n, &split.train)?;
                output(None, |w| sets.iter().try_for_each(|set| set.write_tsv(&split.train, w)))?;
            }
        }
        Command::Eval(c) => print_report(&run_stage(&c, Stage::Eval)?)?,
        Command::Run(a) => {
            let mut ws = a.common.workspace()?;
            ws.run_from(a.from.into())?;
            print_report(&ws)?;
        }
        Command::Config(c) => print!("{}", c.config()?.to_toml()),
        Command::Status(c) => {
            let ws = c.workspace()?;
            for s in Stage::ALL {
                let state = match ws.manifest().stages.get(&s) {
                    None => "not run".to_string(),
                    Some(rec) => match ws.verify(s) {
                        Ok(()) => format!("ok {}", &rec.config_hash[..12]),
                        Err(e) => format!("stale: {e}"),
                    },
                };
                println!("{:<9} {state}", s.name());
            }
            log::debug!("manifest at {}", ws.dir.join(MANIFEST).display());
        }
        Command::ExportEmbeddings(a) => {
            let ws = a.common.workspace()?;
            ws.verify(Stage::Split)?;
            ws.verify(Stage::Train)?;
            let split = ws.split()?;
            let table = ws.embeddings()?;
            let (matrix, vocab) = match a.side {
                Side::Users => (&table.users, split.train.users()),
                Side::Items => (&table.items, split.train.items()),
            };
            output(a.out.as_ref(), |w| EmbeddingTable::write_text(matrix, vocab, w))?;
        }
        Command::ExportMixtures(a) => {
            let ws = a.common.workspace()?;
            ws.verify(Stage::Split)?;
            ws.verify(Stage::Mixtures)?;
            let split = ws.split()?;
            let Some(mix) = ws.mixtures(a.strategy.into())? else {
                return Err(Error::InvalidArgument("the unimodal strategy has no mixtures".into()));
            };
            output(a.out.as_ref(), |w| mix.write_text(&split.train, w))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
