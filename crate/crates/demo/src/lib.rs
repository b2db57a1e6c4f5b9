//! Browser bindings: a two-moons point cloud, the neighborhood-preserving
//! interpolation over the plane, its fuzzy graph, and the ball-overlap curve.

use np_robust::analysis::ball_overlap_fraction;
use np_robust::bottleneck::EmbeddingTable;
use np_robust::data::{synth_manifold, SynthKind};
use np_robust::graph::fuzzy_graph;
use np_robust::tensor::Tensor;
use np_robust::trainer::{init_embeddings, TrainConfig};
use wasm_bindgen::prelude::*;

fn js(e: np_robust::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Moons {
    points: Tensor,
    labels: Vec<usize>,
    /// One-dimensional graph embedding of the points.
    embedding: Tensor,
}

#[wasm_bindgen]
impl Moons {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, noise: f64, seed: u64) -> Result<Moons, JsError> {
        let ds = synth_manifold(SynthKind::TwoMoons, n, noise, seed).map_err(js)?;
        let points = ds.flat();
        let cfg = TrainConfig {
            seed,
            init_epochs: 100,
            ..TrainConfig::default()
        };
        let embedding = init_embeddings(&points, 1, &cfg).map_err(js)?;
        Ok(Moons {
            points,
            labels: ds.labels,
            embedding,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Interleaved `x, y` in the unit square.
    pub fn points(&self) -> Vec<f64> {
        self.points.data().to_vec()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.iter().map(|&c| c as u32).collect()
    }

    /// Graph embedding per point, rescaled to `[0, 1]`.
    pub fn embedding(&self) -> Vec<f64> {
        unit_range(self.embedding.data())
    }

    /// Interpolated value on a `res x res` grid over the unit square, row by
    /// row from the top. With `by_class` the table holds each point's class,
    /// so the field is the soft decision; otherwise it holds the embedding.
    pub fn field(&self, k: usize, res: usize, by_class: bool) -> Result<Vec<f64>, JsError> {
        let values = if by_class {
            self.labels.iter().map(|&c| c as f64).collect()
        } else {
            unit_range(self.embedding.data())
        };
        let low = Tensor::new(vec![self.len(), 1], values).map_err(js)?;
        let k = k.clamp(1, self.len());
        let table = EmbeddingTable::new(self.points.clone(), low, k).map_err(js)?;
        let mut out = Vec::with_capacity(res * res);
        for r in 0..res {
            let y = 1.0 - (r as f64 + 0.5) / res as f64;
            for c in 0..res {
                let x = (c as f64 + 0.5) / res as f64;
                out.push(table.predict_embed(&[x, y]).map_err(js)?.low[0]);
            }
        }
        Ok(out)
    }

    /// Fuzzy graph as flat `i, j, strength` triples.
    pub fn edges(&self, k: usize) -> Result<Vec<f64>, JsError> {
        let k = k.clamp(1, self.len() - 1);
        let g = fuzzy_graph(&self.points, k).map_err(js)?;
        Ok(g.pairs
            .iter()
            .zip(&g.strengths)
            .flat_map(|(&(i, j), &s)| [i as f64, j as f64, s])
            .collect())
    }
}

fn unit_range(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.iter().map(|x| (x - lo) / span).collect()
}

/// Symmetric-difference fraction of two radius-`r` balls in `R^p` at
/// `steps + 1` offsets spread over `[0, 2r]`, as `eps, fraction` pairs.
#[wasm_bindgen]
pub fn overlap_curve(p: usize, r: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let steps = steps.max(1);
    let mut out = Vec::with_capacity(2 * (steps + 1));
    for i in 0..=steps {
        let eps = 2.0 * r * i as f64 / steps as f64;
        out.push(eps);
        out.push(ball_overlap_fraction(p, r, eps).map_err(js)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_field_is_a_probability() {
        let m = Moons::new(60, 0.05, 1).unwrap();
        let f = m.field(5, 8, true).unwrap();
        assert_eq!(f.len(), 64);
        assert!(f.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        assert!(f.iter().any(|&v| v < 0.5) && f.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn edges_come_in_triples() {
        let m = Moons::new(40, 0.05, 2).unwrap();
        let e = m.edges(5).unwrap();
        assert_eq!(e.len() % 3, 0);
        assert!(e.chunks(3).all(|t| t[0] < t[1] && t[2] > 0.0 && t[2] <= 1.0));
    }

    #[test]
    fn curve_spans_zero_to_two() {
        let c = overlap_curve(10, 1.0, 20).unwrap();
        assert_eq!(c.len(), 42);
        assert_eq!(c[1], 0.0);
        assert!((c[41] - 2.0).abs() < 1e-12);
    }
}
