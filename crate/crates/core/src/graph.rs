//! Bipartite user→item engagement graph: loading, interning, holdout splits
//! and the binary graph/holdout file formats.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 4] = b"IMGR";
const HOLDOUT_MAGIC: &[u8; 4] = b"IMHO";

/// Bijection between raw string ids and dense ids `0..n`, assigned in
/// lexicographic (byte) order of the raw ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = names.into_iter().collect();
        let names: Vec<String> = set.into_iter().collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Vocab { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub user: u32,
    pub item: u32,
    pub time: u64,
}

/// Immutable bipartite graph. User and item ids live in separate spaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngagementGraph {
    users: Vocab,
    items: Vocab,
    /// Per user: item ids sorted ascending, no duplicates.
    adjacency: Vec<Vec<u32>>,
    /// Parallel to `adjacency`.
    times: Vec<Vec<u64>>,
    reverse: Vec<Vec<u32>>,
    n_edges: usize,
}

impl EngagementGraph {
    /// Builds a graph from raw `(user, item, time)` triples. Duplicate
    /// `(user, item)` pairs collapse to the smallest time.
    pub fn from_raw_edges<I, S>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, u64)>,
        S: Into<String>,
    {
        let mut dedup: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (u, i, t) in edges {
            dedup
                .entry((u.into(), i.into()))
                .and_modify(|old| *old = (*old).min(t))
                .or_insert(t);
        }
        if dedup.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let users = Vocab::from_names(dedup.keys().map(|(u, _)| u.clone()));
        let items = Vocab::from_names(dedup.keys().map(|(_, i)| i.clone()));
        let mut adj: Vec<Vec<(u32, u64)>> = vec![Vec::new(); users.len()];
        for ((u, i), t) in &dedup {
            let uid = users.id(u).expect("interned");
            let iid = items.id(i).expect("interned");
            adj[uid as usize].push((iid, *t));
        }
        Ok(Self::from_adjacency(users, items, adj))
    }

    /// `adjacency[u]` may be in any order but must not contain duplicates.
    fn from_adjacency(users: Vocab, items: Vocab, mut adjacency: Vec<Vec<(u32, u64)>>) -> Self {
        let mut reverse = vec![Vec::new(); items.len()];
        let mut n_edges = 0;
        let mut adj = Vec::with_capacity(adjacency.len());
        let mut times = Vec::with_capacity(adjacency.len());
        for (u, row) in adjacency.iter_mut().enumerate() {
            row.sort_unstable();
            debug_assert!(row.windows(2).all(|w| w[0].0 != w[1].0));
            for &(i, _) in row.iter() {
                reverse[i as usize].push(u as u32);
            }
            n_edges += row.len();
            adj.push(row.iter().map(|&(i, _)| i).collect());
            times.push(row.iter().map(|&(_, t)| t).collect());
        }
        EngagementGraph {
            users,
            items,
            adjacency: adj,
            times,
            reverse,
            n_edges,
        }
    }

    /// Reads a `user <TAB> item [<TAB> time]` edge list. Blank lines and
    /// lines starting with `#` are skipped; a missing time column means 0.
    pub fn load_edge_list(path: &Path) -> Result<Self> {
        let reader = codec::open(path)?;
        Self::parse_edge_list(reader)
    }

    pub fn parse_edge_list<R: BufRead>(reader: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line_no = lineno + 1;
            let mut fields = line.split_whitespace();
            let (Some(u), Some(i)) = (fields.next(), fields.next()) else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected at least two columns".into(),
                });
            };
            let t = match fields.next() {
                None => 0,
                Some(t) => t.parse::<u64>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad time `{t}`: {e}"),
                })?,
            };
            if fields.next().is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "more than three columns".into(),
                });
            }
            rows.push((u.to_string(), i.to_string(), t));
        }
        Self::from_raw_edges(rows)
    }

    pub fn users(&self) -> &Vocab {
        &self.users
    }

    pub fn items(&self) -> &Vocab {
        &self.items
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Sorted item ids engaged by `user`.
    pub fn items_of(&self, user: u32) -> &[u32] {
        &self.adjacency[user as usize]
    }

    pub fn times_of(&self, user: u32) -> &[u64] {
        &self.times[user as usize]
    }

    pub fn users_of(&self, item: u32) -> &[u32] {
        &self.reverse[item as usize]
    }

    pub fn user_degree(&self, user: u32) -> usize {
        self.adjacency[user as usize].len()
    }

    pub fn item_degree(&self, item: u32) -> usize {
        self.reverse[item as usize].len()
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.items_of(user).binary_search(&item).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.adjacency
            .iter()
            .zip(&self.times)
            .enumerate()
            .flat_map(|(u, (items, times))| {
                items.iter().zip(times).map(move |(&item, &time)| Edge {
                    user: u as u32,
                    item,
                    time,
                })
            })
    }

    /// Writes the edge list back out in the input TSV format.
    pub fn write_edge_list<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        for e in self.edges() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.users.name(e.user),
                self.items.name(e.item),
                e.time
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| self.write_binary(w))
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        codec::write_header(w, GRAPH_MAGIC)?;
        w.write_u32::<LittleEndian>(self.n_users() as u32)?;
        w.write_u32::<LittleEndian>(self.n_items() as u32)?;
        w.write_u64::<LittleEndian>(self.n_edges as u64)?;
        for name in self.users.names().iter().chain(self.items.names()) {
            codec::write_str(w, name)?;
        }
        for (items, times) in self.adjacency.iter().zip(&self.times) {
            codec::write_varint(w, items.len() as u64)?;
            let mut prev = 0u32;
            for (&item, &time) in items.iter().zip(times) {
                codec::write_varint(w, u64::from(item - prev))?;
                codec::write_varint(w, time)?;
                prev = item;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = codec::open(path)?;
        Self::read_binary(&mut r, path)
    }

    fn read_binary<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        codec::read_header(r, GRAPH_MAGIC, path)?;
        let n_users = r.read_u32::<LittleEndian>()? as usize;
        let n_items = r.read_u32::<LittleEndian>()? as usize;
        let n_edges = r.read_u64::<LittleEndian>()? as usize;
        let read_vocab = |r: &mut R, n: usize| -> Result<Vocab> {
            let names = (0..n)
                .map(|_| codec::read_str(r))
                .collect::<std::io::Result<Vec<_>>>()?;
            if names.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::format(path, "vocabulary not strictly sorted"));
            }
            Ok(Vocab::from_names(names))
        };
        let users = read_vocab(r, n_users)?;
        let items = read_vocab(r, n_items)?;
        let mut adjacency = Vec::with_capacity(n_users);
        for _ in 0..n_users {
            let deg = codec::read_varint(r)? as usize;
            let mut row = Vec::with_capacity(deg);
            let mut prev = 0u64;
            for k in 0..deg {
                let delta = codec::read_varint(r)?;
                if k > 0 && delta == 0 {
                    return Err(Error::format(path, "duplicate edge in adjacency"));
                }
                let item = prev + delta;
                if item >= n_items as u64 {
                    return Err(Error::format(path, format!("item id {item} out of range")));
                }
                row.push((item as u32, codec::read_varint(r)?));
                prev = item;
            }
            adjacency.push(row);
        }
        let g = Self::from_adjacency(users, items, adjacency);
        if g.n_edges != n_edges {
            return Err(Error::format(path, "edge count does not match header"));
        }
        Ok(g)
    }
}

/// A training graph plus per-user held-out relevant items. The training graph
/// keeps the full user and item vocabulary of the source graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub train: EngagementGraph,
    /// Per user: sorted held-out item ids (possibly empty).
    pub holdout: Vec<Vec<u32>>,
}

/// Moves `⌈fraction·degree⌉` (capped at `degree − 1`) uniformly chosen edges
/// of every user with degree ≥ 2 into the holdout.
pub fn split_holdout(g: &EngagementGraph, fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("holdout fraction {fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_adj = Vec::with_capacity(g.n_users());
    let mut holdout = Vec::with_capacity(g.n_users());
    for u in 0..g.n_users() as u32 {
        let items = g.items_of(u);
        let times = g.times_of(u);
        let deg = items.len();
        let n_held = if deg < 2 {
            0
        } else {
            ((fraction * deg as f64).ceil() as usize).min(deg - 1)
        };
        let mut held = vec![false; deg];
        for k in index::sample(&mut rng, deg, n_held) {
            held[k] = true;
        }
        let mut row = Vec::with_capacity(deg - n_held);
        let mut out = Vec::with_capacity(n_held);
        for k in 0..deg {
            if held[k] {
                out.push(items[k]);
            } else {
                row.push((items[k], times[k]));
            }
        }
        train_adj.push(row);
        holdout.push(out);
    }
    Ok(HoldoutSplit {
        train: EngagementGraph::from_adjacency(g.users.clone(), g.items.clone(), train_adj),
        holdout,
    })
}

impl HoldoutSplit {
    pub fn holdout_of(&self, user: u32) -> &[u32] {
        &self.holdout[user as usize]
    }

    pub fn n_holdout(&self) -> usize {
        self.holdout.iter().map(Vec::len).sum()
    }

    /// Users with at least one held-out item.
    pub fn eval_users(&self) -> Vec<u32> {
        (0..self.holdout.len() as u32)
            .filter(|&u| !self.holdout[u as usize].is_empty())
            .collect()
    }

    /// Keeps at most `max_edges` uniformly chosen training edges per user.
    /// Dropped edges are discarded; the holdout is unchanged.
    pub fn sparsify(&self, max_edges: usize, seed: u64) -> Result<HoldoutSplit> {
        if max_edges == 0 {
            return Err(Error::arg("max training edges per user must be ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &self.train;
        let adj = (0..g.n_users() as u32)
            .map(|u| {
                let items = g.items_of(u);
                let times = g.times_of(u);
                let keep = index::sample(&mut rng, items.len(), max_edges.min(items.len()));
                keep.into_iter().map(|k| (items[k], times[k])).collect()
            })
            .collect();
        Ok(HoldoutSplit {
            train: EngagementGraph::from_adjacency(g.users.clone(), g.items.clone(), adj),
            holdout: self.holdout.clone(),
        })
    }

    pub fn save_holdout(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| {
            codec::write_header(w, HOLDOUT_MAGIC)?;
            w.write_u32::<LittleEndian>(self.holdout.len() as u32)?;
            for row in &self.holdout {
                codec::write_varint(w, row.len() as u64)?;
                let mut prev = 0;
                for &i in row {
                    codec::write_varint(w, u64::from(i - prev))?;
                    prev = i;
                }
            }
            Ok(())
        })
    }

    pub fn read_holdout(path: &Path, n_items: usize) -> Result<Vec<Vec<u32>>> {
        let mut r = codec::open(path)?;
        codec::read_header(&mut r, HOLDOUT_MAGIC, path)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = codec::read_varint(&mut r)? as usize;
            let mut prev = 0u64;
            let mut row = Vec::with_capacity(len);
            for _ in 0..len {
                prev += codec::read_varint(&mut r)?;
                if prev >= n_items as u64 {
                    return Err(Error::format(path, "holdout item out of range"));
                }
                row.push(prev as u32);
            }
            out.push(row);
        }
        Ok(out)
    }
}
