//! Empirical checks of Lipschitz bounds for the two bottleneck kinds, the
//! ball symmetric-difference fraction, and the PGD distortion gap.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attack::{pgd_tracked, AttackConfig, Classifier};
use crate::bottleneck::EmbeddingTable;
use crate::error::{Error, Result};
use crate::network::batch_ranges;
use crate::special::inc_beta;
use crate::tensor::Tensor;

/// Relative slack added to each per-point bound of the NP check.
pub const NP_DELTA_FRACTION: f64 = 0.05;
/// Absolute slack of the FC check.
pub const FC_DELTA: f64 = 0.1;
/// Ridge added to `XᵀX` when it cannot be factored.
pub const RIDGE: f64 = 1e-8;

/// Unit directions: `n_random` Gaussian directions normalized, then the
/// positive and negative coordinate axes.
pub fn probe_directions(dim: usize, n_random: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(n_random + 2 * dim);
    while dirs.len() < n_random {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            dirs.push(v.iter().map(|a| a / norm).collect());
        }
    }
    for k in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[k] = s;
            dirs.push(e);
        }
    }
    dirs
}

/// Largest finite-difference gain `‖f(x0 + h u) - f(x0)‖ / h` over the
/// probe directions.
pub fn empirical_lipschitz<F>(f: F, x0: &[f64], n_dirs: usize, h_step: f64, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if n_dirs == 0 || !(h_step > 0.0) {
        return Err(Error::invalid("need at least one direction and a positive step"));
    }
    let f0 = f(x0)?;
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lipschitz probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    let mut xp = x0.to_vec();
    for u in probe_directions(x0.len(), n_dirs, &mut rng) {
        for ((p, &b), &d) in xp.iter_mut().zip(x0).zip(&u) {
            *p = b + h_step * d;
        }
        let fp = f(&xp)?;
        if fp.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lipschitz probe"));
        }
        let diff = fp.iter().zip(&f0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        best = best.max(diff / h_step);
    }
    Ok(best)
}

/// Measured constants and bounds. Fields that do not apply to a check are
/// `None` or empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundReport {
    pub check: String,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c4: Option<f64>,
    pub c5: Option<f64>,
    pub delta: f64,
    /// `D_i = sd(x_i) sd(y_j)`, one row per output coordinate `j`.
    pub d: Vec<Vec<f64>>,
    /// Correlations `r_i = corr(x_i, y_j)`, one row per output coordinate.
    pub r: Vec<Vec<f64>>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    /// Per-output `‖w_j‖` and its lower bound (FC check).
    pub weight_norms: Vec<f64>,
    pub weight_bounds: Vec<f64>,
    pub ridge: Option<f64>,
    pub points: usize,
    pub probes: usize,
    pub excluded_probes: usize,
    pub violations: usize,
    /// Largest observed derivative divided by its allowed value (NP check).
    pub worst_ratio: f64,
}

impl BoundReport {
    /// Flat CSV `quantity,output,input,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,output,input,value\n");
        let mut put = |q: &str, j: &str, i: &str, v: f64| {
            let _ = writeln!(s, "{q},{j},{i},{v}");
        };
        for (name, v) in [
            ("C1", self.c1),
            ("C2", self.c2),
            ("C4", self.c4),
            ("C5", self.c5),
            ("T1", self.t1),
            ("T2", self.t2),
            ("ridge", self.ridge),
        ] {
            if let Some(v) = v {
                put(name, "", "", v);
            }
        }
        put("delta", "", "", self.delta);
        put("points", "", "", self.points as f64);
        put("probes", "", "", self.probes as f64);
        put("excluded_probes", "", "", self.excluded_probes as f64);
        put("violations", "", "", self.violations as f64);
        put("worst_ratio", "", "", self.worst_ratio);
        for (j, (n, b)) in self.weight_norms.iter().zip(&self.weight_bounds).enumerate() {
            put("weight_norm", &j.to_string(), "", *n);
            put("weight_bound", &j.to_string(), "", *b);
        }
        for (j, row) in self.d.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                put("D", &j.to_string(), &i.to_string(), *v);
            }
        }
        for (j, row) in self.r.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                put("r", &j.to_string(), &i.to_string(), *v);
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} bound check\n", self.check);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        let _ = writeln!(s, "  C1 = {}  C2 = {}  C4 = {}  C5 = {}", opt(self.c1), opt(self.c2), opt(self.c4), opt(self.c5));
        let _ = writeln!(s, "  T1 = {}  T2 = {}  delta = {}", opt(self.t1), opt(self.t2), self.delta);
        if let Some(r) = self.ridge {
            let _ = writeln!(s, "  ridge {r:e} applied to X^T X");
        }
        if self.probes > 0 {
            let _ = writeln!(
                s,
                "  {} points, {} probes ({} excluded for neighbor changes), worst derivative/bound = {:.4}",
                self.points, self.probes, self.excluded_probes, self.worst_ratio
            );
        }
        if !self.weight_norms.is_empty() {
            let min_margin = self
                .weight_norms
                .iter()
                .zip(&self.weight_bounds)
                .map(|(n, b)| n - b)
                .fold(f64::INFINITY, f64::min);
            let _ = writeln!(s, "  {} outputs, smallest ||w|| - bound = {min_margin:.6e}", self.weight_norms.len());
        }
        let _ = writeln!(s, "  violations = {}", self.violations);
        s
    }
}

/// Ratio `T2 / T1` of the FC lower bound to the NP upper bound.
pub fn bound_ratio(np: &BoundReport, fc: &BoundReport) -> Option<f64> {
    Some(fc.t2? / np.t1?)
}

/// Per-point check of `‖∂f‖ ≤ 2 Ĉ4 Ĉ2 / Ĉ1 + δ` for the interpolation map,
/// with `δ` a fixed fraction of the bound. Probes whose neighbor set differs
/// from the base point's are excluded.
pub fn np_bound_check(
    table: &EmbeddingTable,
    samples: &Tensor,
    h_step: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<BoundReport> {
    if samples.ndim() != 2 || samples.rows() == 0 {
        return Err(Error::invalid("need a non-empty [m, p] sample matrix"));
    }
    if samples.shape()[1] != table.high_dim() {
        return Err(Error::shape(
            "np_bound_check",
            format!("samples have {} features, table keys {}", samples.shape()[1], table.high_dim()),
        ));
    }
    if !(h_step > 0.0) {
        return Err(Error::invalid("probe step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = table.high_dim();
    let mut rep = BoundReport {
        check: "neighborhood-preserving".into(),
        delta: NP_DELTA_FRACTION,
        points: samples.rows(),
        ..Default::default()
    };
    let (mut c1_min, mut c2_max, mut c4_max, mut t1_max) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    let mut xp = vec![0.0; dim];
    for s in 0..samples.rows() {
        let x = samples.row(s);
        let base = table.predict_embed(x)?;
        let dists = table.references().plan(x)?.dists;
        let h: Vec<f64> = dists.iter().map(|d| (-d).exp()).collect();
        let c1 = h.iter().sum::<f64>() / h.len() as f64;
        // |h'(t)| = h(t) for h = exp(-t)
        let c2 = c1;
        let ratio = if c1 > 0.0 { c2 / c1 } else { 1.0 };
        let c4 = base
            .neighbor_ids
            .iter()
            .map(|&i| table.low.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let bound = 2.0 * c4 * ratio;
        let allowed = bound * (1.0 + NP_DELTA_FRACTION);
        c1_min = c1_min.min(c1);
        c2_max = c2_max.max(c2);
        c4_max = c4_max.max(c4);
        t1_max = t1_max.max(bound);

        let mut ids = base.neighbor_ids.clone();
        ids.sort_unstable();
        for u in probe_directions(dim, n_dirs, &mut rng) {
            rep.probes += 1;
            for ((p, &b), &d) in xp.iter_mut().zip(x).zip(&u) {
                *p = b + h_step * d;
            }
            let out = table.predict_embed(&xp)?;
            let mut pids = out.neighbor_ids.clone();
            pids.sort_unstable();
            if pids != ids {
                rep.excluded_probes += 1;
                continue;
            }
            let gain = out
                .low
                .iter()
                .zip(&base.low)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / h_step;
            if !gain.is_finite() {
                return Err(Error::NonFinite("bound probe"));
            }
            if gain > allowed {
                rep.violations += 1;
            }
            if allowed > 0.0 {
                rep.worst_ratio = rep.worst_ratio.max(gain / allowed);
            } else if gain > 0.0 {
                rep.worst_ratio = f64::INFINITY;
            }
        }
    }
    rep.c1 = Some(c1_min);
    rep.c2 = Some(c2_max);
    rep.c4 = Some(c4_max);
    rep.t1 = Some(t1_max);
    Ok(rep)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.row_len(), t.data())
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Least-squares weights `(XᵀX)⁻¹ Xᵀ Y` on column-centered data, shape
/// `[p, d]`. Returns the ridge used when `XᵀX` had to be regularized.
pub fn ols_weights(x: &Tensor, y: &Tensor) -> Result<(Tensor, Option<f64>)> {
    let (xm, ym) = (centered(&to_matrix(x)), centered(&to_matrix(y)));
    let (w, ridge) = solve_normal(&xm, &ym)?;
    Ok((matrix_to_tensor(&w), ridge))
}

fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        data.extend(m.row(i).iter());
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
}

fn solve_normal(xm: &DMatrix<f64>, ym: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<f64>)> {
    let xtx = xm.transpose() * xm;
    let xty = xm.transpose() * ym;
    if let Some(ch) = xtx.clone().cholesky() {
        let w = ch.solve(&xty);
        if w.iter().all(|v| v.is_finite()) {
            return Ok((w, None));
        }
    }
    let p = xtx.nrows();
    let reg = xtx + DMatrix::identity(p, p) * RIDGE;
    let ch = reg.cholesky().ok_or_else(|| {
        Error::Singular(format!("XᵀX is singular even with ridge {RIDGE:e}"))
    })?;
    Ok((ch.solve(&xty), Some(RIDGE)))
}

/// Seeded test data for the FC check: standard Gaussian `X` (`n x p`) and
/// `Y = X A + noise`, where each of the `d` columns of `A` has `min(5, p)`
/// nonzero entries drawn from `U(-2, 2)` and the noise has sd 0.01.
pub fn gaussian_linear_data(n: usize, p: usize, d: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if n == 0 || p == 0 || d == 0 {
        return Err(Error::invalid("n, p and d must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let mut a = vec![0.0; p * d];
    for j in 0..d {
        for _ in 0..5.min(p) {
            a[rng.random_range(0..p) * d + j] = rng.random_range(-2.0..2.0);
        }
    }
    let mut y = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            y[i * d + j] = 0.01 * noise + row.iter().enumerate().map(|(k, v)| v * a[k * d + j]).sum::<f64>();
        }
    }
    Ok((Tensor::new(vec![n, p], x)?, Tensor::new(vec![n, d], y)?))
}

/// Checks `‖w_j‖ ≥ sqrt(Σ D_i² r_i²) / (C5 + δ) - δ` for the least-squares
/// map from `x [n, p]` to each column of `y [n, d]`.
pub fn fc_bound_check(x: &Tensor, y: &Tensor) -> Result<BoundReport> {
    if x.ndim() != 2 || y.ndim() != 2 || x.rows() != y.rows() {
        return Err(Error::shape(
            "fc_bound_check",
            format!("x {:?} against y {:?}", x.shape(), y.shape()),
        ));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let (xm, ym) = (centered(&to_matrix(x)), centered(&to_matrix(y)));
    let (w, ridge) = solve_normal(&xm, &ym)?;
    let nf = n as f64;
    let cov = (xm.transpose() * &xm) / nf;
    let c5 = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let sd = |col: nalgebra::DVectorView<f64>| (col.dot(&col) / nf).sqrt();
    let sx: Vec<f64> = (0..xm.ncols()).map(|i| sd(xm.column(i))).collect();
    let mut rep = BoundReport {
        check: "fully-connected".into(),
        c5: Some(c5),
        delta: FC_DELTA,
        ridge,
        points: n,
        ..Default::default()
    };
    let mut t2 = f64::NEG_INFINITY;
    for j in 0..ym.ncols() {
        let yj = ym.column(j);
        let sy = sd(yj);
        let mut drow = Vec::with_capacity(sx.len());
        let mut rrow = Vec::with_capacity(sx.len());
        for (i, &sxi) in sx.iter().enumerate() {
            let c = xm.column(i).dot(&yj) / nf;
            let di = sxi * sy;
            drow.push(di);
            rrow.push(if di > 0.0 { c / di } else { 0.0 });
        }
        let s = drow.iter().zip(&rrow).map(|(d, r)| (d * r).powi(2)).sum::<f64>().sqrt();
        let bound = s / (c5 + FC_DELTA) - FC_DELTA;
        let norm = w.column(j).norm();
        if norm < bound {
            rep.violations += 1;
        }
        t2 = t2.max(bound);
        rep.weight_norms.push(norm);
        rep.weight_bounds.push(bound);
        rep.d.push(drow);
        rep.r.push(rrow);
    }
    rep.t2 = Some(t2);
    Ok(rep)
}

/// Volume of the symmetric difference of two radius-`r` balls in `R^p`
/// whose centers are `eps` apart, as a fraction of one ball's volume:
/// `2 I_{(eps/2r)²}(1/2, (p+1)/2)`. Ranges from 0 at `eps = 0` to 2 at
/// `eps = 2r`.
pub fn ball_overlap_fraction(p: usize, r: f64, eps: f64) -> Result<f64> {
    if p == 0 || !(r > 0.0) {
        return Err(Error::invalid(format!("need p >= 1 and r > 0, got p={p}, r={r}")));
    }
    if !(eps >= 0.0) || eps > 2.0 * r {
        return Err(Error::invalid(format!(
            "offset {eps} outside [0, 2r = {}]: the balls are disjoint",
            2.0 * r
        )));
    }
    let x = (eps / (2.0 * r)).powi(2);
    Ok(2.0 * inc_beta(x, 0.5, (p as f64 + 1.0) / 2.0)?)
}

/// Mean over samples of the largest PGD-trajectory loss minus the clean
/// loss.
pub fn measure_distortion_gap<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut total = 0.0;
    for r in batch_ranges(labels.len(), batch) {
        let ids: Vec<usize> = r.clone().collect();
        let out = pgd_tracked(model, &x.select_rows(&ids)?, &labels[r], cfg, rng)?;
        total += out
            .best_loss
            .iter()
            .zip(&out.clean_loss)
            .map(|(b, c)| b - c)
            .sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_has_zero_gain() {
        let g = empirical_lipschitz(|_| Ok(vec![1.0, 2.0]), &[0.3, 0.4], 10, 1e-4, 0).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn diagonal_map_gain() {
        let f = |x: &[f64]| Ok(vec![3.0 * x[0], x[1]]);
        let g = empirical_lipschitz(f, &[0.1, -0.2], 1000, 1e-3, 1).unwrap();
        assert!((2.9..=3.0 + 1e-9).contains(&g), "gain {g}");
    }

    #[test]
    fn zero_table_has_zero_bound() {
        let high = Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap();
        let table = EmbeddingTable::new(high, Tensor::zeros(&[4, 2]), 2).unwrap();
        let samples = Tensor::new(vec![2, 3], vec![0.5, 1.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
        let rep = np_bound_check(&table, &samples, 1e-5, 20, 3).unwrap();
        assert_eq!(rep.c4, Some(0.0));
        assert_eq!(rep.t1, Some(0.0));
        assert_eq!(rep.violations, 0);
        assert!(rep.c1.unwrap() > 0.0 && rep.c1.unwrap() <= 1.0);
    }

    #[test]
    fn ball_fraction_endpoints() {
        assert_eq!(ball_overlap_fraction(3, 1.0, 0.0).unwrap(), 0.0);
        assert!((ball_overlap_fraction(1, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((ball_overlap_fraction(7, 2.0, 4.0).unwrap() - 2.0).abs() < 1e-14);
        assert!(ball_overlap_fraction(2, 1.0, 2.1).is_err());
    }

    #[test]
    fn identity_extraction_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, p, d) = (3000, 6, 2);
        let data: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::new(vec![n, p], data).unwrap();
        let ycols: Vec<f64> = (0..n).flat_map(|i| x.row(i)[..d].to_vec()).collect();
        let y = Tensor::new(vec![n, d], ycols).unwrap();
        let rep = fc_bound_check(&x, &y).unwrap();
        assert_eq!(rep.violations, 0);
        for j in 0..d {
            assert!((rep.weight_norms[j] - 1.0).abs() < 1e-10);
            assert!(rep.weight_bounds[j] <= 1.0);
        }
    }
}
