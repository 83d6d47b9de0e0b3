//! Spherical k-means over item embeddings.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec;
use crate::error::{Error, Result};
use crate::vecmath::{self, Matrix};

const CLUSTER_MAGIC: &[u8; 4] = b"IMCL";
const FINAL_ASSIGN_ROUNDS: usize = 10;

/// Unit-norm centroids plus a total item → cluster assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    pub assignment: Vec<u32>,
    pub members: Vec<Vec<u32>>,
    /// Σ cos(item, own centroid) after each epoch (and the final assignment).
    pub objective_trace: Vec<f64>,
}

/// Cosine of two unit vectors, accumulated in f64.
#[inline]
fn cos(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Best centroid for `v` and its cosine; ties go to the smaller id.
fn nearest(centroids: &Matrix, v: &[f32]) -> (u32, f64) {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let s = cos(v, row);
        if s > best.1 {
            best = (c as u32, s);
        }
    }
    best
}

fn normalize_items(items: &Matrix) -> Result<Matrix> {
    let rows = items
        .iter_rows()
        .enumerate()
        .map(|(k, r)| vecmath::normalized(r).ok_or(Error::ZeroVector { item: k as u32 }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(items.dim(), &rows))
}

/// Greedy k-means++ seeding with squared chord distance `2 − 2cos`: each
/// step draws `2 + ⌊ln k⌋` candidates by D² weighting and keeps the one that
/// lowers the total potential most.
fn seed_centroids(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let chord = |i: usize, j: usize| (2.0 - 2.0 * cos(x.row(i), x.row(j))).max(0.0);
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).into_par_iter().map(|i| chord(i, chosen[0])).collect();
    while chosen.len() < k {
        let candidates: Vec<usize> = match WeightedIndex::new(d2.iter().copied()) {
            Ok(w) => (0..trials).map(|_| w.sample(rng)).collect(),
            // every remaining point coincides with a chosen one
            Err(_) => vec![(0..n).find(|i| !chosen.contains(i)).expect("k ≤ n")],
        };
        let (next, next_d2) = candidates
            .into_iter()
            .map(|c| {
                let d: Vec<f64> = (0..n).into_par_iter().map(|i| d2[i].min(chord(i, c))).collect();
                let potential: f64 = d.iter().sum();
                (c, d, potential)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(c, d, _)| (c, d))
            .expect("at least one candidate");
        chosen.push(next);
        d2 = next_d2;
        d2[next] = 0.0;
    }
    let rows: Vec<&[f32]> = chosen.iter().map(|&i| x.row(i)).collect();
    Matrix::from_rows(x.dim(), &rows)
}

struct State {
    centroids: Matrix,
    assignment: Vec<u32>,
    fit: Vec<f64>,
}

impl State {
    fn assign(&mut self, x: &Matrix) -> bool {
        let best: Vec<(u32, f64)> = (0..x.rows())
            .into_par_iter()
            .map(|i| nearest(&self.centroids, x.row(i)))
            .collect();
        let mut changed = false;
        for (i, (c, s)) in best.into_iter().enumerate() {
            changed |= self.assignment[i] != c;
            self.assignment[i] = c;
            self.fit[i] = s;
        }
        changed
    }

    fn members(&self, k: usize) -> Vec<Vec<u32>> {
        let mut m = vec![Vec::new(); k];
        for (i, &c) in self.assignment.iter().enumerate() {
            m[c as usize].push(i as u32);
        }
        m
    }

    /// Moves the worst-fit item of a multi-member cluster into each empty
    /// cluster and centres that cluster on it. Returns whether anything moved.
    fn reseed_empty(&mut self, x: &Matrix, k: usize) -> bool {
        let mut sizes = vec![0usize; k];
        for &c in &self.assignment {
            sizes[c as usize] += 1;
        }
        let mut moved = false;
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let worst = (0..x.rows())
                .filter(|&i| sizes[self.assignment[i] as usize] > 1)
                .min_by(|&a, &b| self.fit[a].total_cmp(&self.fit[b]).then(a.cmp(&b)))
                .expect("k ≤ n leaves a multi-member cluster");
            sizes[self.assignment[worst] as usize] -= 1;
            sizes[empty] = 1;
            self.assignment[worst] = empty as u32;
            self.centroids.row_mut(empty).copy_from_slice(x.row(worst));
            self.fit[worst] = cos(x.row(worst), x.row(worst));
            moved = true;
        }
        moved
    }

    /// Normalized-mean update, keeping the old centroid for any cluster
    /// where rounding would lower that cluster's fit.
    fn update(&mut self, x: &Matrix, k: usize) {
        let members = self.members(k);
        let dim = x.dim();
        let updated: Vec<Option<Vec<f32>>> = members
            .par_iter()
            .enumerate()
            .map(|(c, ms)| {
                if ms.is_empty() {
                    return None;
                }
                let mut sum = vec![0f64; dim];
                for &i in ms {
                    sum.iter_mut()
                        .zip(x.row(i as usize))
                        .for_each(|(s, &v)| *s += f64::from(v));
                }
                if vecmath::normalize64(&mut sum) == 0.0 {
                    return None;
                }
                let cand = vecmath::to_f32(&sum);
                let old: f64 = ms.iter().map(|&i| cos(x.row(i as usize), self.centroids.row(c))).sum();
                let new: f64 = ms.iter().map(|&i| cos(x.row(i as usize), &cand)).sum();
                (new >= old).then_some(cand)
            })
            .collect();
        for (c, row) in updated.into_iter().enumerate() {
            if let Some(row) = row {
                self.centroids.row_mut(c).copy_from_slice(&row);
            }
        }
        for (i, &c) in self.assignment.iter().enumerate() {
            self.fit[i] = cos(x.row(i), self.centroids.row(c as usize));
        }
    }

    fn objective(&self) -> f64 {
        self.fit.iter().sum()
    }
}

/// Clusters the rows of `items` (row index = item id) into `k` groups.
pub fn spherical_kmeans(items: &Matrix, k: usize, epochs: usize, seed: u64) -> Result<ClusterModel> {
    let n = items.rows();
    if k == 0 || k > n {
        return Err(Error::arg(format!("cluster count {k} must be in 1..={n}")));
    }
    if epochs == 0 {
        return Err(Error::arg("k-means needs at least one epoch"));
    }
    let x = normalize_items(items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = State {
        centroids: seed_centroids(&x, k, &mut rng),
        assignment: vec![0; n],
        fit: vec![0.0; n],
    };
    let mut trace = Vec::with_capacity(epochs + 1);
    for epoch in 0..epochs {
        let changed = st.assign(&x);
        st.reseed_empty(&x, k);
        st.update(&x, k);
        trace.push(st.objective());
        log::debug!("k-means epoch {epoch}: objective {:.6}", st.objective());
        if epoch > 0 && !changed {
            break;
        }
    }
    // settle the assignment against the final centroids
    for _ in 0..FINAL_ASSIGN_ROUNDS {
        st.assign(&x);
        if !st.reseed_empty(&x, k) {
            break;
        }
    }
    trace.push(st.objective());
    let members = st.members(k);
    Ok(ClusterModel {
        centroids: st.centroids,
        assignment: st.assignment,
        members,
        objective_trace: trace,
    })
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn cluster_of(&self, item: u32) -> u32 {
        self.assignment[item as usize]
    }

    /// Nearest centroid by cosine; ties to the smaller cluster id.
    pub fn assign(&self, v: &[f32]) -> Result<u32> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let v = vecmath::normalized(v).unwrap_or_else(|| v.to_vec());
        Ok(nearest(&self.centroids, &v).0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, |w| {
            codec::write_header(w, CLUSTER_MAGIC)?;
            w.write_u32::<LittleEndian>(self.k() as u32)?;
            w.write_u32::<LittleEndian>(self.dim() as u32)?;
            w.write_u32::<LittleEndian>(self.assignment.len() as u32)?;
            codec::write_f32s(w, self.centroids.as_flat())?;
            for &c in &self.assignment {
                w.write_u32::<LittleEndian>(c)?;
            }
            w.write_u32::<LittleEndian>(self.objective_trace.len() as u32)?;
            for &o in &self.objective_trace {
                w.write_f64::<LittleEndian>(o)?;
            }
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = codec::open(path)?;
        codec::read_header(&mut r, CLUSTER_MAGIC, path)?;
        let k = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        if k == 0 || dim == 0 {
            return Err(Error::format(path, "empty cluster model"));
        }
        let centroids = Matrix::from_flat(dim, codec::read_f32s(&mut r, k * dim)?);
        let mut assignment = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut assignment)?;
        if assignment.iter().any(|&c| c as usize >= k) {
            return Err(Error::format(path, "assignment out of range"));
        }
        let t = r.read_u32::<LittleEndian>()? as usize;
        let mut objective_trace = vec![0f64; t];
        r.read_f64_into::<LittleEndian>(&mut objective_trace)?;
        let mut members = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c as usize].push(i as u32);
        }
        Ok(ClusterModel {
            centroids,
            assignment,
            members,
            objective_trace,
        })
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |&m| m as usize + 1);
    let kb = b.iter().max().map_or(0, |&m| m as usize + 1);
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize * kb + y as usize] += 1;
        rows[x as usize] += 1;
        cols[y as usize] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&v| pairs(v)).sum();
    let sum_a: f64 = rows.iter().map(|&v| pairs(v)).sum();
    let sum_b: f64 = cols.iter().map(|&v| pairs(v)).sum();
    let expected = sum_a * sum_b / pairs(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
