//! Hierarchical navigable small-world graph over the rows of a matrix.
//!
//! Similarity is the plain dot product of stored rows; larger is closer.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::{dot, Matrix};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Links per node on upper layers; layer 0 allows twice as many.
    pub max_degree: usize,
    pub construction_breadth: usize,
    pub query_breadth: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            max_degree: 16,
            construction_breadth: 100,
            query_breadth: 64,
            seed: 0x1a7e,
        }
    }
}

/// Heap entry ordered by similarity, ties broken toward the smaller row.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored(f32, u32);

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayeredGraph {
    pub(crate) params: GraphParams,
    entry: u32,
    top_level: usize,
    /// `links[node][layer]`, present for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
}

impl LayeredGraph {
    pub(crate) fn build(vectors: &Matrix, params: &GraphParams) -> Self {
        let n = vectors.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.max_degree.max(2) as f64).ln();
        let mut g = LayeredGraph {
            params: params.clone(),
            entry: 0,
            top_level: 0,
            links: Vec::with_capacity(n),
        };
        for node in 0..n as u32 {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let level = ((-u.ln() * level_mult) as usize).min(MAX_LEVEL);
            g.insert(vectors, node, level);
        }
        g
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.max_degree
        } else {
            self.params.max_degree
        }
    }

    fn insert(&mut self, vectors: &Matrix, node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        if node == 0 {
            self.entry = 0;
            self.top_level = level;
            return;
        }
        let q = vectors.row(node as usize);
        let mut eps = vec![Scored(dot(q, vectors.row(self.entry as usize)), self.entry)];
        for layer in (level + 1..=self.top_level).rev() {
            eps = self.search_layer(vectors, q, &eps, 1, layer);
        }
        for layer in (0..=level.min(self.top_level)).rev() {
            let found = self.search_layer(vectors, q, &eps, self.params.construction_breadth, layer);
            let chosen = select_neighbors(vectors, &found, self.cap(layer).min(self.params.max_degree));
            self.links[node as usize][layer] = chosen.clone();
            for nb in chosen {
                self.links[nb as usize][layer].push(node);
                if self.links[nb as usize][layer].len() > self.cap(layer) {
                    self.shrink(vectors, nb, layer);
                }
            }
            eps = found;
        }
        if level > self.top_level {
            self.top_level = level;
            self.entry = node;
        }
    }

    fn shrink(&mut self, vectors: &Matrix, node: u32, layer: usize) {
        let base = vectors.row(node as usize);
        let mut cands: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| Scored(dot(base, vectors.row(nb as usize)), nb))
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        self.links[node as usize][layer] = select_neighbors(vectors, &cands, self.cap(layer));
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(&self, vectors: &Matrix, q: &[f32], entry: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        let mut frontier: BinaryHeap<Scored> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entry {
            if !std::mem::replace(&mut visited[e.1 as usize], true) {
                frontier.push(e);
                best.push(Reverse(e));
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(cur) = frontier.pop() {
            let worst = best.peek().map(|r| r.0);
            if best.len() >= ef && worst.is_some_and(|w| cur < w) {
                break;
            }
            for &nb in &self.links[cur.1 as usize][layer] {
                if std::mem::replace(&mut visited[nb as usize], true) {
                    continue;
                }
                let s = Scored(dot(q, vectors.row(nb as usize)), nb);
                if best.len() < ef || best.peek().is_some_and(|w| s > w.0) {
                    frontier.push(s);
                    best.push(Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// `(similarity, row)` pairs for up to `ef` rows near `q`.
    pub(crate) fn search(&self, vectors: &Matrix, q: &[f32], ef: usize) -> Vec<(f32, u32)> {
        let mut eps = vec![Scored(dot(q, vectors.row(self.entry as usize)), self.entry)];
        for layer in (1..=self.top_level).rev() {
            eps = self.search_layer(vectors, q, &eps, 1, layer);
        }
        self.search_layer(vectors, q, &eps, ef, 0)
            .into_iter()
            .map(|s| (s.0, s.1))
            .collect()
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.params.max_degree as u32)?;
        w.write_u32::<LittleEndian>(self.params.construction_breadth as u32)?;
        w.write_u32::<LittleEndian>(self.params.query_breadth as u32)?;
        w.write_u64::<LittleEndian>(self.params.seed)?;
        w.write_u32::<LittleEndian>(self.entry)?;
        w.write_u32::<LittleEndian>(self.top_level as u32)?;
        for layers in &self.links {
            w.write_u8(layers.len() as u8)?;
            for nbs in layers {
                w.write_u32::<LittleEndian>(nbs.len() as u32)?;
                for &nb in nbs {
                    w.write_u32::<LittleEndian>(nb)?;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Self> {
        let params = GraphParams {
            max_degree: r.read_u32::<LittleEndian>()? as usize,
            construction_breadth: r.read_u32::<LittleEndian>()? as usize,
            query_breadth: r.read_u32::<LittleEndian>()? as usize,
            seed: r.read_u64::<LittleEndian>()?,
        };
        let entry = r.read_u32::<LittleEndian>()?;
        let top_level = r.read_u32::<LittleEndian>()? as usize;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let n_layers = r.read_u8()? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let len = r.read_u32::<LittleEndian>()? as usize;
                let mut nbs = vec![0u32; len];
                r.read_u32_into::<LittleEndian>(&mut nbs)?;
                if nbs.iter().any(|&x| x as usize >= n) {
                    return Err(Error::format(path, "graph link out of range"));
                }
                layers.push(nbs);
            }
            links.push(layers);
        }
        if entry as usize >= n || links[entry as usize].len() != top_level + 1 {
            return Err(Error::format(path, "inconsistent graph entry point"));
        }
        Ok(LayeredGraph {
            params,
            entry,
            top_level,
            links,
        })
    }
}

/// Diversifying neighbour choice: keep a candidate only if it is closer to
/// the base than to every neighbour already kept, then fill up with the
/// best of the rejected ones. `cands` must be sorted best first.
fn select_neighbors(vectors: &Matrix, cands: &[Scored], m: usize) -> Vec<u32> {
    let mut kept: Vec<u32> = Vec::with_capacity(m);
    let mut rejected = Vec::new();
    for &Scored(sim_base, c) in cands {
        if kept.len() >= m {
            break;
        }
        let cv = vectors.row(c as usize);
        if kept.iter().all(|&k| dot(cv, vectors.row(k as usize)) < sim_base) {
            kept.push(c);
        } else {
            rejected.push(c);
        }
    }
    for c in rejected {
        if kept.len() >= m {
            break;
        }
        kept.push(c);
    }
    kept
}
