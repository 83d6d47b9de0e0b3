//! Unimodal user/item co-embedding trained with a dot-product scorer, a
//! negative-sampling logistic objective and per-parameter Adagrad.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::graph::{EngagementGraph, Vocab};
use crate::vecmath::{self, Matrix};

const EMBED_MAGIC: &[u8; 4] = b"IMEB";
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Dense user and item vectors sharing one `dim`-dimensional space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Matrix,
    pub items: Matrix,
    pub trained_epochs: usize,
}

impl EmbeddingTable {
    /// I.i.d. uniform init in `[-0.5/dim, 0.5/dim]`, users first then items.
    pub fn init(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 0.5 / dim as f32;
        let mut draw = |n: usize| {
            Matrix::from_flat(
                dim,
                (0..n * dim).map(|_| rng.random_range(-half..=half)).collect(),
            )
        };
        let users = draw(n_users);
        let items = draw(n_items);
        EmbeddingTable {
            users,
            items,
            trained_epochs: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn user(&self, u: u32) -> &[f32] {
        self.users.row(u as usize)
    }

    pub fn item(&self, i: u32) -> &[f32] {
        self.items.row(i as usize)
    }

    pub fn all_finite(&self) -> bool {
        self.users
            .as_flat()
            .iter()
            .chain(self.items.as_flat())
            .all(|x| x.is_finite())
    }

    /// Mean objective over fixed `(positive, negatives)` samples.
    pub fn mean_loss(&self, samples: &[(Pair, Vec<Pair>)]) -> f64 {
        let view = TableView(self);
        let mut grads = Gradients::new(self.dim());
        let total: f64 = samples
            .iter()
            .map(|(pos, negs)| loss_and_grad(&view, *pos, negs, &mut grads))
            .sum();
        total / samples.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| {
            codec::write_header(w, EMBED_MAGIC)?;
            w.write_u32::<LittleEndian>(self.users.rows() as u32)?;
            w.write_u32::<LittleEndian>(self.items.rows() as u32)?;
            w.write_u32::<LittleEndian>(self.dim() as u32)?;
            w.write_u32::<LittleEndian>(self.trained_epochs as u32)?;
            codec::write_f32s(w, self.users.as_flat())?;
            codec::write_f32s(w, self.items.as_flat())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = codec::open(path)?;
        codec::read_header(&mut r, EMBED_MAGIC, path)?;
        let n_users = r.read_u32::<LittleEndian>()? as usize;
        let n_items = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let trained_epochs = r.read_u32::<LittleEndian>()? as usize;
        if dim == 0 {
            return Err(Error::format(path, "zero dimension"));
        }
        let users = Matrix::from_flat(dim, codec::read_f32s(&mut r, n_users * dim)?);
        let items = Matrix::from_flat(dim, codec::read_f32s(&mut r, n_items * dim)?);
        Ok(EmbeddingTable {
            users,
            items,
            trained_epochs,
        })
    }

    /// Plain-text `id <TAB> v1 v2 … vd`, one row per entity.
    pub fn write_text<W: Write + ?Sized>(matrix: &Matrix, vocab: &Vocab, w: &mut W) -> std::io::Result<()> {
        for (k, row) in matrix.iter_rows().enumerate() {
            write!(w, "{}\t", vocab.name(k as u32))?;
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Relevance score `u · i`.
pub fn score(user: &[f32], item: &[f32]) -> Result<f64> {
    if user.len() != item.len() {
        return Err(Error::DimensionMismatch {
            expected: user.len(),
            got: item.len(),
        });
    }
    Ok(user
        .iter()
        .zip(item)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub user: u32,
    pub item: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    User(u32),
    Item(u32),
}

/// Read access to parameter rows in double precision.
pub trait Params {
    fn dim(&self) -> usize;
    fn load(&self, node: Node, out: &mut [f64]);
}

/// Owned double-precision parameters, handy for checking gradients.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

impl DenseParams {
    pub fn get_mut(&mut self, node: Node) -> &mut Vec<f64> {
        match node {
            Node::User(u) => &mut self.users[u as usize],
            Node::Item(i) => &mut self.items[i as usize],
        }
    }
}

impl Params for DenseParams {
    fn dim(&self) -> usize {
        self.users.first().or(self.items.first()).map_or(0, Vec::len)
    }

    fn load(&self, node: Node, out: &mut [f64]) {
        let src = match node {
            Node::User(u) => &self.users[u as usize],
            Node::Item(i) => &self.items[i as usize],
        };
        out.copy_from_slice(src);
    }
}

struct TableView<'a>(&'a EmbeddingTable);

impl Params for TableView<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn load(&self, node: Node, out: &mut [f64]) {
        let src = match node {
            Node::User(u) => self.0.user(u),
            Node::Item(i) => self.0.item(i),
        };
        out.iter_mut().zip(src).for_each(|(o, &s)| *o = f64::from(s));
    }
}

/// Per-node gradient accumulator; a node touched by several pairs gets the
/// sum of its contributions.
#[derive(Debug, Clone)]
pub struct Gradients {
    dim: usize,
    nodes: Vec<Node>,
    values: Vec<f64>,
}

impl Gradients {
    pub fn new(dim: usize) -> Self {
        Gradients {
            dim,
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
    }

    fn slot(&mut self, node: Node) -> usize {
        match self.nodes.iter().position(|&n| n == node) {
            Some(k) => k,
            None => {
                self.nodes.push(node);
                self.values.resize(self.nodes.len() * self.dim, 0.0);
                self.nodes.len() - 1
            }
        }
    }

    pub fn get(&self, node: Node) -> Option<&[f64]> {
        let k = self.nodes.iter().position(|&n| n == node)?;
        Some(&self.values[k * self.dim..(k + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Node, &[f64])> {
        self.nodes
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim.max(1)))
    }
}

/// `ln σ(x)` without overflow or `ln 0`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative-sampling loss `−[ln σ(f(e)) + Σ ln σ(−f(e'))]` for one positive
/// edge and its corrupted edges; gradients land in `grads`.
pub fn loss_and_grad<P: Params>(
    params: &P,
    positive: Pair,
    negatives: &[Pair],
    grads: &mut Gradients,
) -> f64 {
    let dim = params.dim();
    grads.dim = dim;
    grads.clear();
    let mut u = vec![0.0; dim];
    let mut i = vec![0.0; dim];
    let mut loss = 0.0;
    let pairs = std::iter::once((positive, true)).chain(negatives.iter().map(|&p| (p, false)));
    for (pair, is_pos) in pairs {
        params.load(Node::User(pair.user), &mut u);
        params.load(Node::Item(pair.item), &mut i);
        let s = vecmath::dot64(&u, &i);
        // d(loss)/ds
        let coef = if is_pos {
            loss -= log_sigmoid(s);
            sigmoid(s) - 1.0
        } else {
            loss -= log_sigmoid(-s);
            sigmoid(s)
        };
        let k = grads.slot(Node::User(pair.user));
        grads.values[k * dim..(k + 1) * dim]
            .iter_mut()
            .zip(&i)
            .for_each(|(g, &x)| *g += coef * x);
        let k = grads.slot(Node::Item(pair.item));
        grads.values[k * dim..(k + 1) * dim]
            .iter_mut()
            .zip(&u)
            .for_each(|(g, &x)| *g += coef * x);
    }
    loss
}

/// Draws corrupted edges: a fair coin picks the side to replace, then the
/// replacement is uniform with probability `uniform_fraction`, otherwise
/// proportional to training degree.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n_users: u32,
    n_items: u32,
    user_degree: WeightedIndex<u32>,
    item_degree: WeightedIndex<u32>,
    uniform_fraction: f64,
}

impl NegativeSampler {
    pub fn new(g: &EngagementGraph, uniform_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&uniform_fraction) {
            return Err(Error::arg(format!(
                "uniform negative fraction {uniform_fraction} not in [0, 1]"
            )));
        }
        Self::from_degrees(
            (0..g.n_users() as u32).map(|u| g.user_degree(u) as u32).collect(),
            (0..g.n_items() as u32).map(|i| g.item_degree(i) as u32).collect(),
            uniform_fraction,
        )
    }

    pub fn from_degrees(user_deg: Vec<u32>, item_deg: Vec<u32>, uniform_fraction: f64) -> Result<Self> {
        let weights = |d: &[u32]| {
            WeightedIndex::new(d.iter().copied()).map_err(|_| Error::EmptyGraph)
        };
        Ok(NegativeSampler {
            n_users: user_deg.len() as u32,
            n_items: item_deg.len() as u32,
            user_degree: weights(&user_deg)?,
            item_degree: weights(&item_deg)?,
            uniform_fraction,
        })
    }

    pub fn draw_item<R: Rng>(&self, rng: &mut R) -> u32 {
        if rng.random_bool(self.uniform_fraction) {
            rng.random_range(0..self.n_items)
        } else {
            self.item_degree.sample(rng) as u32
        }
    }

    pub fn draw_user<R: Rng>(&self, rng: &mut R) -> u32 {
        if rng.random_bool(self.uniform_fraction) {
            rng.random_range(0..self.n_users)
        } else {
            self.user_degree.sample(rng) as u32
        }
    }

    pub fn sample_into<R: Rng>(&self, edge: Pair, count: usize, rng: &mut R, out: &mut Vec<Pair>) {
        out.clear();
        for _ in 0..count {
            if rng.random_bool(0.5) {
                out.push(Pair {
                    user: self.draw_user(rng),
                    item: edge.item,
                });
            } else {
                out.push(Pair {
                    user: edge.user,
                    item: self.draw_item(rng),
                });
            }
        }
    }

    pub fn sample<R: Rng>(&self, edge: Pair, count: usize, rng: &mut R) -> Vec<Pair> {
        let mut out = Vec::with_capacity(count);
        self.sample_into(edge, count, rng, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives_per_edge: usize,
    pub learning_rate: f64,
    pub uniform_negative_fraction: f64,
    pub seed: u64,
    /// 1 selects the deterministic single-threaded path.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 100,
            epochs: 20,
            negatives_per_edge: 5,
            learning_rate: 0.1,
            uniform_negative_fraction: 0.5,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.negatives_per_edge == 0 || self.threads == 0 {
            return Err(Error::arg("dim, negatives_per_edge and threads must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.uniform_negative_fraction) {
            return Err(Error::arg("uniform_negative_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// f32 matrix whose cells tolerate unsynchronized concurrent updates.
struct SharedMatrix {
    dim: usize,
    cells: Vec<AtomicU32>,
}

impl SharedMatrix {
    fn from_matrix(m: &Matrix) -> Self {
        SharedMatrix {
            dim: m.dim(),
            cells: m.as_flat().iter().map(|x| AtomicU32::new(x.to_bits())).collect(),
        }
    }

    fn zeros(rows: usize, dim: usize) -> Self {
        SharedMatrix {
            dim,
            cells: (0..rows * dim).map(|_| AtomicU32::new(0)).collect(),
        }
    }

    #[inline]
    fn get(&self, idx: usize) -> f32 {
        f32::from_bits(self.cells[idx].load(Ordering::Relaxed))
    }

    #[inline]
    fn set(&self, idx: usize, v: f32) {
        self.cells[idx].store(v.to_bits(), Ordering::Relaxed)
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::from_flat(self.dim, (0..self.cells.len()).map(|k| self.get(k)).collect())
    }
}

/// Parameters plus Adagrad squared-gradient accumulators.
pub struct Trainer {
    dim: usize,
    lr: f64,
    users: SharedMatrix,
    items: SharedMatrix,
    user_acc: SharedMatrix,
    item_acc: SharedMatrix,
}

impl Params for Trainer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn load(&self, node: Node, out: &mut [f64]) {
        let (m, row) = self.locate(node);
        let base = row * self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            *o = f64::from(m.get(base + k));
        }
    }
}

impl Trainer {
    pub fn new(init: &EmbeddingTable, learning_rate: f64) -> Self {
        Trainer {
            dim: init.dim(),
            lr: learning_rate,
            users: SharedMatrix::from_matrix(&init.users),
            items: SharedMatrix::from_matrix(&init.items),
            user_acc: SharedMatrix::zeros(init.users.rows(), init.dim()),
            item_acc: SharedMatrix::zeros(init.items.rows(), init.dim()),
        }
    }

    fn locate(&self, node: Node) -> (&SharedMatrix, usize) {
        match node {
            Node::User(u) => (&self.users, u as usize),
            Node::Item(i) => (&self.items, i as usize),
        }
    }

    fn accumulator(&self, node: Node) -> (&SharedMatrix, usize) {
        match node {
            Node::User(u) => (&self.user_acc, u as usize),
            Node::Item(i) => (&self.item_acc, i as usize),
        }
    }

    /// One Adagrad step on a positive edge and its negatives. Returns the
    /// pre-update loss, or `None` if anything became non-finite.
    pub fn step(&self, positive: Pair, negatives: &[Pair], grads: &mut Gradients) -> Option<f64> {
        let loss = loss_and_grad(self, positive, negatives, grads);
        if !loss.is_finite() {
            return None;
        }
        for (node, g) in grads.iter() {
            let (params, row) = self.locate(node);
            let (acc, _) = self.accumulator(node);
            let base = row * self.dim;
            for (k, &gk) in g.iter().enumerate() {
                let a = f64::from(acc.get(base + k)) + gk * gk;
                acc.set(base + k, a as f32);
                let p = f64::from(params.get(base + k)) - self.lr * gk / (a.sqrt() + ADAGRAD_EPS);
                if !p.is_finite() {
                    return None;
                }
                params.set(base + k, p as f32);
            }
        }
        Some(loss)
    }

    /// Squared-gradient sum for one parameter row.
    pub fn accumulator_row(&self, node: Node) -> Vec<f32> {
        let (acc, row) = self.accumulator(node);
        (0..self.dim).map(|k| acc.get(row * self.dim + k)).collect()
    }

    pub fn snapshot(&self, trained_epochs: usize) -> EmbeddingTable {
        EmbeddingTable {
            users: self.users.to_matrix(),
            items: self.items.to_matrix(),
            trained_epochs,
        }
    }
}

/// Trains embeddings for every user and item of `g`.
pub fn train(g: &EngagementGraph, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    train_with_trace(g, cfg).map(|(t, _)| t)
}

/// Like [`train`], also returning the mean training loss of each epoch.
pub fn train_with_trace(g: &EngagementGraph, cfg: &TrainConfig) -> Result<(EmbeddingTable, Vec<f64>)> {
    cfg.validate()?;
    if g.n_edges() == 0 {
        return Err(Error::EmptyGraph);
    }
    let init = EmbeddingTable::init(g.n_users(), g.n_items(), cfg.dim, cfg.seed);
    let sampler = NegativeSampler::new(g, cfg.uniform_negative_fraction)?;
    let trainer = Trainer::new(&init, cfg.learning_rate);
    let mut edges: Vec<Pair> = g
        .edges()
        .map(|e| Pair {
            user: e.user,
            item: e.item,
        })
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ed6e);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        edges.shuffle(&mut order_rng);
        let run_shard = |shard: &[Pair], offset: usize, worker: u64| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((epoch as u64) << 16 | worker),
            );
            let mut negs = Vec::with_capacity(cfg.negatives_per_edge);
            let mut grads = Gradients::new(cfg.dim);
            let mut total = 0.0;
            for (k, &edge) in shard.iter().enumerate() {
                sampler.sample_into(edge, cfg.negatives_per_edge, &mut rng, &mut negs);
                total += trainer.step(edge, &negs, &mut grads).ok_or(Error::NonFinite {
                    epoch,
                    edge: offset + k,
                })?;
            }
            Ok(total)
        };

        let total = if cfg.threads == 1 {
            run_shard(&edges, 0, 0)?
        } else {
            let shard_len = edges.len().div_ceil(cfg.threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = edges
                    .chunks(shard_len)
                    .enumerate()
                    .map(|(w, shard)| {
                        let run = &run_shard;
                        s.spawn(move || run(shard, w * shard_len, w as u64))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training worker panicked"))
                    .sum::<Result<f64>>()
            })?
        };
        let mean = total / edges.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        trace.push(mean);
    }

    let table = trainer.snapshot(cfg.epochs);
    if !table.all_finite() {
        return Err(Error::NonFinite {
            epoch: cfg.epochs.saturating_sub(1),
            edge: edges.len(),
        });
    }
    Ok((table, trace))
}
