//! Nearest-neighbour search over keyed vector sets.
//!
//! Two backends share one query contract: [`Backend::Exact`] scans every
//! vector and is the reference the other modules test against;
//! [`Backend::LayeredGraph`] is a hierarchical navigable small-world graph.
//! Results are sorted by score descending, ties broken by the smaller key.

mod layered;

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::vecmath::{self, Matrix};

pub use layered::GraphParams;
use layered::LayeredGraph;

const INDEX_MAGIC: &[u8; 4] = b"IMAX";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    InnerProduct,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    LayeredGraph,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub key: u32,
    pub score: f32,
}

/// Descending score, then ascending key.
pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.key.cmp(&b.key))
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    metric: Metric,
    keys: Vec<u32>,
    /// Unit-norm copies under [`Metric::Cosine`].
    vectors: Matrix,
    graph: Option<LayeredGraph>,
}

impl VectorIndex {
    /// Builds an index over `vectors`, row `r` carrying key `keys[r]`.
    pub fn build(
        keys: Vec<u32>,
        vectors: &Matrix,
        metric: Metric,
        backend: Backend,
        params: &GraphParams,
    ) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::arg("index needs at least one vector"));
        }
        if keys.len() != vectors.rows() {
            return Err(Error::arg(format!(
                "{} keys for {} vectors",
                keys.len(),
                vectors.rows()
            )));
        }
        let vectors = match metric {
            Metric::InnerProduct => vectors.clone(),
            Metric::Cosine => {
                let rows = vectors
                    .iter_rows()
                    .zip(&keys)
                    .map(|(r, &k)| vecmath::normalized(r).ok_or(Error::ZeroVector { item: k }))
                    .collect::<Result<Vec<_>>>()?;
                Matrix::from_rows(vectors.dim(), &rows)
            }
        };
        let graph = match backend {
            Backend::Exact => None,
            Backend::LayeredGraph => Some(LayeredGraph::build(&vectors, params)),
        };
        Ok(VectorIndex {
            metric,
            keys,
            vectors,
            graph,
        })
    }

    /// Convenience: exact backend, no graph parameters needed.
    pub fn exact(keys: Vec<u32>, vectors: &Matrix, metric: Metric) -> Result<Self> {
        Self::build(keys, vectors, metric, Backend::Exact, &GraphParams::default())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn backend(&self) -> Backend {
        if self.graph.is_some() {
            Backend::LayeredGraph
        } else {
            Backend::Exact
        }
    }

    pub fn keys(&self) -> &[u32] {
        &self.keys
    }

    /// The stored (possibly normalized) vector for row `r`.
    pub fn stored(&self, r: usize) -> &[f32] {
        self.vectors.row(r)
    }

    /// Top `k` keys not in `exclude` (any order), scored against `q`.
    pub fn query(&self, q: &[f32], k: usize, exclude: &[u32]) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::arg("k must be ≥ 1"));
        }
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: q.len(),
            });
        }
        let mut excluded = exclude.to_vec();
        excluded.sort_unstable();
        excluded.dedup();
        let q = match self.metric {
            Metric::InnerProduct => q.to_vec(),
            // a zero query scores every key 0 under either metric
            Metric::Cosine => vecmath::normalized(q).unwrap_or_else(|| q.to_vec()),
        };
        let is_excluded = |key: u32| excluded.binary_search(&key).is_ok();
        let mut hits = match &self.graph {
            Some(g) if k + excluded.len() < self.len() => {
                let ef = g.params.query_breadth.max(k + excluded.len());
                g.search(&self.vectors, &q, ef)
                    .into_iter()
                    .map(|(score, row)| Hit {
                        key: self.keys[row as usize],
                        score,
                    })
                    .filter(|h| !is_excluded(h.key))
                    .collect()
            }
            _ => self.scan(&q, &is_excluded),
        };
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    fn scan(&self, q: &[f32], is_excluded: &dyn Fn(u32) -> bool) -> Vec<Hit> {
        self.keys
            .iter()
            .zip(self.vectors.iter_rows())
            .filter(|(&key, _)| !is_excluded(key))
            .map(|(&key, v)| Hit {
                key,
                score: vecmath::dot(q, v),
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u8(match self.metric {
            Metric::InnerProduct => 0,
            Metric::Cosine => 1,
        })?;
        w.write_u8(u8::from(self.graph.is_some()))?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for &k in &self.keys {
            w.write_u32::<LittleEndian>(k)?;
        }
        codec::write_f32s(w, self.vectors.as_flat())?;
        if let Some(g) = &self.graph {
            g.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let metric = match r.read_u8()? {
            0 => Metric::InnerProduct,
            1 => Metric::Cosine,
            m => return Err(Error::format(path, format!("unknown metric tag {m}"))),
        };
        let has_graph = r.read_u8()? != 0;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        if dim == 0 || n == 0 {
            return Err(Error::format(path, "empty index"));
        }
        let mut keys = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut keys)?;
        let vectors = Matrix::from_flat(dim, codec::read_f32s(r, n * dim)?);
        let graph = if has_graph {
            Some(LayeredGraph::read_from(r, n, path)?)
        } else {
            None
        };
        Ok(VectorIndex {
            metric,
            keys,
            vectors,
            graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_many(path, std::slice::from_ref(self))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut v = read_many(path)?;
        if v.len() != 1 {
            return Err(Error::format(path, format!("expected 1 index, found {}", v.len())));
        }
        Ok(v.remove(0))
    }
}

/// Several indexes in one file (e.g. one per item cluster).
pub fn save_many(path: &Path, indexes: &[VectorIndex]) -> Result<()> {
    codec::write_atomic(path, |w| {
        codec::write_header(w, INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(indexes.len() as u32)?;
        indexes.iter().try_for_each(|idx| idx.write_to(w))
    })
}

pub fn read_many(path: &Path) -> Result<Vec<VectorIndex>> {
    let mut r = codec::open(path)?;
    codec::read_header(&mut r, INDEX_MAGIC, path)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n).map(|_| VectorIndex::read_from(&mut r, path)).collect()
}
