//! The neighborhood-preserving bottleneck: a table of reference points,
//! kernel-weighted kNN interpolation for unseen inputs, and per-class
//! k-means compression of the table into weighted representatives.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

pub const DEFAULT_K_PREDICT: usize = 15;

/// High-dimensional reference keys with their weights, cheap to clone.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    high: Arc<Tensor>,
    weight: Arc<Vec<f64>>,
    k: usize,
}

/// The neighbors chosen for one query and their normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub ids: Vec<usize>,
    pub dists: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ReferenceSet {
    pub fn new(high: Tensor, weight: Vec<f64>, k: usize) -> Result<Self> {
        if high.ndim() != 2 {
            return Err(Error::shape("references", format!("expected [R, p], got {:?}", high.shape())));
        }
        if weight.len() != high.rows() {
            return Err(Error::shape(
                "references",
                format!("{} weights for {} references", weight.len(), high.rows()),
            ));
        }
        if weight.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("reference weights must be positive"));
        }
        if k == 0 || k > high.rows() {
            return Err(Error::invalid(format!(
                "k_predict = {k} must lie in 1..={}",
                high.rows()
            )));
        }
        Ok(ReferenceSet {
            high: Arc::new(high),
            weight: Arc::new(weight),
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.high.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.high.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn high(&self) -> &Tensor {
        &self.high
    }

    pub fn high_row(&self, i: usize) -> &[f64] {
        self.high.row(i)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// The `k` nearest references as `(index, distance)`, ascending by
    /// distance with ties going to the lower index.
    pub fn nearest(&self, query: &[f64]) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim() {
            return Err(Error::shape(
                "nearest",
                format!("query has {} features, references have {}", query.len(), self.dim()),
            ));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query"));
        }
        let mut all: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (sq_dist(query, self.high.row(i)), i))
            .collect();
        Ok(k_smallest(&mut all, self.k)
            .into_iter()
            .map(|(d2, i)| (i, d2.sqrt()))
            .collect())
    }

    /// Neighbors of `query` with weights `v_i exp(-d_i)` normalized to sum 1.
    pub fn plan(&self, query: &[f64]) -> Result<Interpolation> {
        let nb = self.nearest(query)?;
        let dmin = nb[0].1;
        let raw: Vec<f64> = nb
            .iter()
            .map(|&(i, d)| self.weight[i] * (-(d - dmin)).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        Ok(Interpolation {
            ids: nb.iter().map(|p| p.0).collect(),
            dists: nb.iter().map(|p| p.1).collect(),
            weights: raw.iter().map(|w| w / z).collect(),
        })
    }

    pub(crate) fn with_k(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("k_predict = {k} must lie in 1..={}", self.len())));
        }
        Ok(ReferenceSet { k, ..self.clone() })
    }
}

/// Sorts `(key, index)` pairs and keeps the `k` smallest, lower index first
/// on equal keys.
pub(crate) fn k_smallest(items: &mut Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    items.clone()
}

/// Parameters of the bottleneck: reference keys, their learned low
/// embeddings, and reference weights.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    refs: ReferenceSet,
    pub low: Tensor,
}

/// Result of embedding one query.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckOutput {
    pub low: Vec<f64>,
    pub neighbor_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

impl EmbeddingTable {
    /// A full-data table: every reference has weight 1.
    pub fn new(high: Tensor, low: Tensor, k_predict: usize) -> Result<Self> {
        let r = high.rows();
        Self::weighted(high, low, vec![1.0; r], k_predict)
    }

    pub fn weighted(high: Tensor, low: Tensor, weight: Vec<f64>, k_predict: usize) -> Result<Self> {
        if low.ndim() != 2 || low.rows() != high.rows() {
            return Err(Error::shape(
                "embedding table",
                format!("high {:?} against low {:?}", high.shape(), low.shape()),
            ));
        }
        if high.ndim() == 2 && low.shape()[1] >= high.shape()[1] {
            return Err(Error::invalid(format!(
                "low dimension {} must be below high dimension {}",
                low.shape()[1],
                high.shape()[1]
            )));
        }
        let refs = ReferenceSet::new(high, weight, k_predict)?;
        Ok(EmbeddingTable { refs, low })
    }

    pub fn references(&self) -> &ReferenceSet {
        &self.refs
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn high_dim(&self) -> usize {
        self.refs.dim()
    }

    pub fn low_dim(&self) -> usize {
        self.low.shape()[1]
    }

    pub fn k_predict(&self) -> usize {
        self.refs.k()
    }

    pub fn set_k_predict(&mut self, k: usize) -> Result<()> {
        self.refs = self.refs.with_k(k)?;
        Ok(())
    }

    /// Replaces the high keys, keeping weights and `k`.
    pub fn set_high(&mut self, high: Tensor) -> Result<()> {
        if high.shape() != self.refs.high().shape() {
            return Err(Error::shape(
                "set_high",
                format!("{:?} replaces {:?}", high.shape(), self.refs.high().shape()),
            ));
        }
        self.refs = ReferenceSet::new(high, self.refs.weights().to_vec(), self.refs.k())?;
        Ok(())
    }

    pub fn is_full_data(&self) -> bool {
        self.refs.weights().iter().all(|&v| v == 1.0)
    }

    /// Interpolated low embedding of one high-dimensional vector.
    pub fn predict_embed(&self, u_high: &[f64]) -> Result<BottleneckOutput> {
        let plan = self.refs.plan(u_high)?;
        let mut low = vec![0.0; self.low_dim()];
        for (&id, &w) in plan.ids.iter().zip(&plan.weights) {
            for (o, &y) in low.iter_mut().zip(self.low.row(id)) {
                *o += w * y;
            }
        }
        Ok(BottleneckOutput {
            low,
            neighbor_ids: plan.ids,
            weights: plan.weights,
        })
    }

    /// Rows of the low table for training-set indices.
    pub fn gather_train_embed(&self, ids: &[usize]) -> Result<Tensor> {
        self.low.select_rows(ids)
    }
}

/// Outcome of Lloyd's algorithm.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// Lloyd's k-means on the given rows. Centers start at `k` distinct points
/// drawn by a seeded shuffle; an emptied cluster is re-seeded with the point
/// farthest from its current center. Stops when no center moves more than
/// `tol` or after `max_iter` rounds.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centers.len() == k {
            break;
        }
        if !centers.iter().any(|c| c.as_slice() == points[i]) {
            centers.push(points[i].to_vec());
        }
    }
    // Fewer distinct points than clusters: fill with duplicates.
    for &i in order.iter().cycle().take(k - centers.len()) {
        centers.push(points[i].to_vec());
    }

    let mut assignment = vec![0; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest_center(p, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(points[a], &centers[assignment[a]]);
                        let db = sq_dist(points[b], &centers[assignment[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                let old = assignment[far];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(points[far].iter()) {
                    *s -= v;
                }
                assignment[far] = c;
                counts[c] = 1;
                sums[c] = points[far].to_vec();
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift <= tol {
            break;
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        *a = nearest_center(p, &centers).0;
    }
    let mut sizes = vec![0; k];
    for &a in &assignment {
        sizes[a] += 1;
    }
    Ok(KMeans {
        centers,
        assignment,
        sizes,
        iterations,
    })
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Replaces a full-data table by per-class cluster representatives. Keys and
/// values are cluster means of the high and low rows; each weight is the
/// cluster size. Returns the new table and the class of each representative,
/// ordered by class then cluster. Empty final clusters are dropped.
pub fn compress_representatives(
    table: &EmbeddingTable,
    labels: &[usize],
    clusters_per_class: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Vec<usize>)> {
    if labels.len() != table.len() {
        return Err(Error::shape(
            "compress",
            format!("{} labels for {} references", labels.len(), table.len()),
        ));
    }
    if clusters_per_class == 0 {
        return Err(Error::invalid("clusters_per_class must be at least 1"));
    }
    if !table.is_full_data() {
        return Err(Error::invalid("table is already compressed"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let (p, d) = (table.high_dim(), table.low_dim());
    let mut high = Vec::new();
    let mut low = Vec::new();
    let mut weight = Vec::new();
    let mut rep_labels = Vec::new();
    for (&class, members) in &by_class {
        if members.len() < clusters_per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} points, fewer than {clusters_per_class} clusters",
                members.len()
            )));
        }
        let rows: Vec<&[f64]> = members.iter().map(|&i| table.refs.high_row(i)).collect();
        let km = kmeans(
            &rows,
            clusters_per_class,
            seed.wrapping_add(class as u64),
            KMEANS_MAX_ITER,
            KMEANS_TOL,
        )?;
        let mut low_sum = vec![vec![0.0; d]; clusters_per_class];
        for (&m, &a) in members.iter().zip(&km.assignment) {
            for (s, v) in low_sum[a].iter_mut().zip(table.low.row(m)) {
                *s += v;
            }
        }
        for c in 0..clusters_per_class {
            let size = km.sizes[c];
            if size == 0 {
                continue;
            }
            high.extend_from_slice(&km.centers[c]);
            low.extend(low_sum[c].iter().map(|s| s / size as f64));
            weight.push(size as f64);
            rep_labels.push(class);
        }
    }
    let r = weight.len();
    let k = table.k_predict().min(r);
    let out = EmbeddingTable::weighted(
        Tensor::new(vec![r, p], high)?,
        Tensor::new(vec![r, d], low)?,
        weight,
        k,
    )?;
    Ok((out, rep_labels))
}
