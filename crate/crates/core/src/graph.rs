//! Fuzzy neighborhood graphs: exact kNN, membership strengths, and the
//! fuzzy-set cross entropy between two graphs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::strength_cross_entropy;
use crate::bottleneck::k_smallest;
use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

pub const DEFAULT_K: usize = 15;

/// Per-point neighbor lists, ascending by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl KnnResult {
    pub fn n(&self) -> usize {
        self.indices.len()
    }
}

/// Unordered pairs `(i, j)` with `i < j`, sorted, each with a strength in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub k: usize,
    pub pairs: Vec<(usize, usize)>,
    pub strengths: Vec<f64>,
}

/// Brute-force kNN under the Euclidean metric. Ties go to the lower index.
pub fn knn(points: &Tensor, k: usize) -> Result<KnnResult> {
    if points.ndim() != 2 {
        return Err(Error::shape("knn", format!("expected [n, p], got {:?}", points.shape())));
    }
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..{n}")));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("knn points"));
    }
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        let pi = points.row(i);
        row.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(pi, points.row(j)), j)));
        let best = k_smallest(&mut row, k);
        indices.push(best.iter().map(|b| b.1).collect());
        distances.push(best.iter().map(|b| b.0.sqrt()).collect());
    }
    Ok(KnnResult { k, indices, distances })
}

/// Membership strengths: per point `z_ij = exp(-(d_ij - min_j d_ij))`, then
/// `mu(i,j) = (z_ij + z_ji) / 2` with a missing direction counting as 0.
pub fn membership_strengths(knn: &KnnResult) -> Result<FuzzyGraph> {
    let n = knn.n();
    let mut acc: HashMap<(usize, usize), f64> = HashMap::new();
    for i in 0..n {
        let (ids, ds) = (&knn.indices[i], &knn.distances[i]);
        if ids.len() != ds.len() || ids.is_empty() {
            return Err(Error::invalid(format!("malformed neighbor list for point {i}")));
        }
        let dmin = ds.iter().copied().fold(f64::INFINITY, f64::min);
        for (&j, &d) in ids.iter().zip(ds) {
            if j >= n || j == i {
                return Err(Error::invalid(format!("bad neighbor {j} for point {i}")));
            }
            let z = (-(d - dmin)).exp();
            *acc.entry((i.min(j), i.max(j))).or_insert(0.0) += z / 2.0;
        }
    }
    let mut entries: Vec<((usize, usize), f64)> = acc.into_iter().collect();
    entries.sort_unstable_by_key(|e| e.0);
    Ok(FuzzyGraph {
        n,
        k: knn.k,
        pairs: entries.iter().map(|e| e.0).collect(),
        strengths: entries.iter().map(|e| e.1.min(1.0)).collect(),
    })
}

/// `knn` followed by `membership_strengths`.
pub fn fuzzy_graph(points: &Tensor, k: usize) -> Result<FuzzyGraph> {
    membership_strengths(&knn(points, k)?)
}

/// Fuzzy-set cross entropy summed over the union of both pair sets; a pair
/// missing from one graph has strength 0 there. Strengths are clamped into
/// `[1e-6, 1 - 1e-6]` on both sides.
pub fn fuzzy_cross_entropy(mu: &FuzzyGraph, nu: &FuzzyGraph) -> Result<f64> {
    if mu.n != nu.n {
        return Err(Error::invalid(format!(
            "graphs over {} and {} points",
            mu.n, nu.n
        )));
    }
    let (mut a, mut b) = (0, 0);
    let mut total = 0.0;
    while a < mu.pairs.len() || b < nu.pairs.len() {
        let pa = mu.pairs.get(a);
        let pb = nu.pairs.get(b);
        let (m, v) = match (pa, pb) {
            (Some(x), Some(y)) if x == y => {
                a += 1;
                b += 1;
                (mu.strengths[a - 1], nu.strengths[b - 1])
            }
            (Some(x), Some(y)) if x < y => {
                a += 1;
                (mu.strengths[a - 1], 0.0)
            }
            (Some(_), None) => {
                a += 1;
                (mu.strengths[a - 1], 0.0)
            }
            _ => {
                b += 1;
                (0.0, nu.strengths[b - 1])
            }
        };
        total += strength_cross_entropy(m, v);
    }
    Ok(total)
}

impl FuzzyGraph {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds a graph from arbitrary pairs, normalizing each to `i < j`.
    pub fn from_pairs(n: usize, k: usize, mut edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        for e in edges.iter_mut() {
            if e.0 == e.1 || e.0 >= n || e.1 >= n {
                return Err(Error::invalid(format!("bad pair ({}, {}) for n = {n}", e.0, e.1)));
            }
            if !(0.0..=1.0).contains(&e.2) {
                return Err(Error::invalid(format!("strength {} outside [0, 1]", e.2)));
            }
            if e.0 > e.1 {
                std::mem::swap(&mut e.0, &mut e.1);
            }
        }
        edges.sort_by_key(|e| (e.0, e.1));
        if edges.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::invalid("duplicate pair"));
        }
        Ok(FuzzyGraph {
            n,
            k,
            pairs: edges.iter().map(|e| (e.0, e.1)).collect(),
            strengths: edges.iter().map(|e| e.2).collect(),
        })
    }

    /// Strength of a pair, 0 when absent.
    pub fn strength(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.pairs
            .binary_search(&key)
            .map_or(0.0, |pos| self.strengths[pos])
    }

    /// Text edge list: header `n k`, then `i j strength` per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.k);
        for (&(i, j), &m) in self.pairs.iter().zip(&self.strengths) {
            let _ = writeln!(s, "{i} {j} {m:e}");
        }
        s
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("<edge list>", detail);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 2 {
            return Err(bad(format!("header {header:?} is not `n k`")));
        }
        let n: usize = h[0].parse().map_err(|_| bad(format!("bad n {:?}", h[0])))?;
        let k: usize = h[1].parse().map_err(|_| bad(format!("bad k {:?}", h[1])))?;
        let mut edges = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = match f.as_slice() {
                [i, j, m] => i
                    .parse::<usize>()
                    .ok()
                    .zip(j.parse::<usize>().ok())
                    .zip(m.parse::<f64>().ok()),
                _ => None,
            };
            let ((i, j), m) = parsed.ok_or_else(|| bad(format!("bad edge line {line:?}")))?;
            edges.push((i, j, m));
        }
        Self::from_pairs(n, k, edges)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            other => other,
        })
    }

    /// Neighbor lists per point.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for (&(i, j), &m) in self.pairs.iter().zip(&self.strengths) {
            adj[i].push((j, m));
            adj[j].push((i, m));
        }
        adj
    }
}
