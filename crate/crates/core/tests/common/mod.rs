#![allow(dead_code)]

use np_robust::autodiff::{Tape, Var};
use np_robust::bottleneck::{EmbeddingTable, ReferenceSet};
use np_robust::network::{BottleneckKind, Network, NetworkSpec};
use np_robust::tensor::Tensor;
use np_robust::trainer::{np_batch_loss, Batch};
use np_robust::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const CASES_PER_OP: u64 = 50;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform magnitudes in `[lo, hi)` with random signs.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Max relative error between reverse-mode gradients and central
/// differences, over at most `max_coords` coordinates per input.
pub fn grad_check(inputs: &[Tensor], build: &Build<'_>, max_coords: usize, rng: &mut impl Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut coords: Vec<usize> = (0..input.len()).collect();
        coords.shuffle(rng);
        coords.truncate(max_coords);
        for c in coords {
            let mut ins = inputs.to_vec();
            ins[k].data_mut()[c] += FD_STEP;
            let up = eval(&ins);
            ins[k].data_mut()[c] -= 2.0 * FD_STEP;
            let down = eval(&ins);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[c], numeric));
        }
    }
    worst
}

/// `sum(c * out)` for a fixed random `c`.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ef);
    let c = tape.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let m = tape.mul(out, c)?;
    Ok(tape.sum(m))
}

pub const OPS: [&str; 20] = [
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "relu",
    "sum",
    "mean",
    "reshape",
    "flatten",
    "linear",
    "conv2d",
    "maxpool2d",
    "softmax",
    "nll_loss",
    "gather_rows",
    "pair_cross_entropy",
    "knn_interp",
    "L_full",
];

/// Max relative gradient error of one seeded case of `op`.
pub fn op_case(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ op.len() as u64);
    let r = &mut rng;
    let s = seed;
    let all = usize::MAX;
    match op {
        "add" | "sub" | "mul" => {
            let ins = [uniform(&[3, 4], -2.0, 2.0, r), uniform(&[3, 4], -2.0, 2.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = match op {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "scale" => {
            let c = r.random_range(-3.0..3.0);
            let ins = [uniform(&[2, 5], -2.0, 2.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.scale(v[0], c);
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "exp" => {
            let ins = [uniform(&[3, 3], -2.0, 2.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.exp(v[0]);
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "log" => {
            let ins = [uniform(&[3, 3], 0.5, 3.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.log(v[0])?;
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "relu" => {
            let ins = [away_from_zero(&[4, 4], 0.05, 2.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.relu(v[0]);
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "sum" | "mean" => {
            let ins = [uniform(&[3, 4], -1.0, 1.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let a = if op == "sum" { t.sum(v[0]) } else { t.mean(v[0]) };
                // Square the reduction so the gradient depends on the input.
                t.mul(a, a)
            };
            grad_check(&ins, &f, all, r)
        }
        "reshape" => {
            let ins = [uniform(&[3, 4], -1.0, 1.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.reshape(v[0], &[2, 6])?;
                let e = t.exp(o);
                weighted_sum(t, e, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "flatten" => {
            let ins = [uniform(&[2, 3, 2, 2], -1.0, 1.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.flatten(v[0])?;
                let e = t.exp(o);
                weighted_sum(t, e, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "linear" => {
            let ins = [
                uniform(&[5, 4], -1.0, 1.0, r),
                uniform(&[3, 4], -1.0, 1.0, r),
                uniform(&[3], -1.0, 1.0, r),
            ];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let ins = [
                uniform(&[2, 2, 7, 7], -1.0, 1.0, r),
                uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
                uniform(&[3], -1.0, 1.0, r),
            ];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.conv2d(v[0], v[1], v[2], stride)?;
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, 60, r)
        }
        "maxpool2d" => {
            // Distinct values 0.01 apart so no window has a near tie.
            let mut vals: Vec<f64> = (0..64).map(|i| f64::from(i) * 0.01).collect();
            vals.shuffle(r);
            let ins = [Tensor::new(vec![2, 2, 4, 4], vals).unwrap()];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.maxpool2d(v[0], 2)?;
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "softmax" => {
            let ins = [uniform(&[4, 5], -2.0, 2.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.softmax(v[0])?;
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "nll_loss" => {
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            let ins = [uniform(&[4, 5], -2.0, 2.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let p = t.softmax(v[0])?;
                t.nll_loss(p, &labels)
            };
            grad_check(&ins, &f, all, r)
        }
        "gather_rows" => {
            let ids: Vec<usize> = (0..7).map(|_| r.random_range(0..5)).collect();
            let ins = [uniform(&[5, 3], -1.0, 1.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.gather_rows(v[0], &ids)?;
                let e = t.exp(o);
                weighted_sum(t, e, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "pair_cross_entropy" => {
            let n = 6;
            let mut pairs = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..10 {
                let i = r.random_range(0..n);
                let j = (i + r.random_range(1..n)) % n;
                pairs.push((i, j));
                targets.push(match r.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => r.random_range(0.0..1.0),
                });
            }
            let ins = [uniform(&[n, 3], -1.5, 1.5, r)];
            let f = |t: &mut Tape, v: &[Var]| t.pair_cross_entropy(v[0], &pairs, &targets);
            grad_check(&ins, &f, all, r)
        }
        "knn_interp" => {
            let high = uniform(&[20, 5], 0.0, 1.0, r);
            let weight: Vec<f64> = (0..20).map(|_| r.random_range(0.5..3.0)).collect();
            let refs = ReferenceSet::new(high, weight, 5).unwrap();
            let ins = [uniform(&[4, 5], 0.0, 1.0, r), uniform(&[20, 3], -1.0, 1.0, r)];
            let f = |t: &mut Tape, v: &[Var]| {
                let o = t.knn_interp(v[0], v[1], &refs)?;
                weighted_sum(t, o, s)
            };
            grad_check(&ins, &f, all, r)
        }
        "L_full" => full_loss_case(r),
        _ => panic!("unknown op {op}"),
    }
}

/// `L_C + L_G` of one batch against central differences in the table and
/// classifier weights.
fn full_loss_case(r: &mut ChaCha8Rng) -> f64 {
    let (n, p, d, classes) = (30, 6, 2, 3);
    let high = uniform(&[n, p], 0.0, 1.0, r);
    let low = uniform(&[n, d], -1.5, 1.5, r);
    let table = EmbeddingTable::new(high, low, 5).unwrap();
    let spec = NetworkSpec::vector(p, classes, BottleneckKind::NeighborPreserving(d));
    let net = Network::new(spec, Some(table), r.random()).unwrap();
    let ids: Vec<usize> = (0..12).map(|_| r.random_range(0..n)).collect();
    let labels: Vec<usize> = ids.iter().map(|&i| i % classes).collect();
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..15 {
        let a = r.random_range(0..ids.len());
        let b = r.random_range(0..ids.len());
        if ids[a] != ids[b] {
            pairs.push((a, b));
            targets.push(if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..1.0) });
        }
    }
    let batch = Batch {
        x: Tensor::zeros(&[ids.len(), 1, 1, p]),
        labels,
        ids,
        pairs,
        targets,
    };
    let loss_of = |net: &Network| {
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, false);
        let l = np_batch_loss(net, &mut tape, &b, &batch, 1.0).unwrap();
        tape.value(l.l_full).item()
    };
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let parts = np_batch_loss(&net, &mut tape, &bound, &batch, 1.0).unwrap();
    let grads = tape.backward(parts.l_full).unwrap();

    let mut worst: f64 = 0.0;
    let low_grad = grads.get(bound.low.unwrap()).cloned().unwrap_or_else(|| Tensor::zeros(&[n, d]));
    for c in 0..n * d {
        let mut a = net.clone();
        a.table_mut().unwrap().low.data_mut()[c] += FD_STEP;
        let mut b = net.clone();
        b.table_mut().unwrap().low.data_mut()[c] -= FD_STEP;
        let numeric = (loss_of(&a) - loss_of(&b)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(low_grad.data()[c], numeric));
    }
    for (k, var) in bound.classifier.iter().enumerate() {
        let g = grads.get(*var).cloned().unwrap();
        let mut coords: Vec<usize> = (0..g.len()).collect();
        coords.shuffle(r);
        for &c in coords.iter().take(20) {
            let mut a = net.clone();
            a.classifier.params_mut()[k].data_mut()[c] += FD_STEP;
            let mut b = net.clone();
            b.classifier.params_mut()[k].data_mut()[c] -= FD_STEP;
            let numeric = (loss_of(&a) - loss_of(&b)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[c], numeric));
        }
    }
    worst
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Symmetric difference of two radius-`r` balls whose centers are `eps`
/// apart, over the volume of one ball, by slicing along the offset axis:
/// a slice at angle `θ` from the axis has volume proportional to `sin^p θ`.
pub fn overlap_by_slices(p: usize, r: f64, eps: f64) -> f64 {
    let f = |t: f64| t.sin().powi(p as i32);
    let whole = integrate(&f, 0.0, std::f64::consts::PI, 1e-14);
    let cap = integrate(&f, 0.0, (eps / (2.0 * r)).acos(), 1e-14);
    2.0 * (1.0 - 2.0 * cap / whole)
}

/// `2 I_x(1/2, (p+1)/2)` at `x = (eps/2r)^2`, integrating the beta
/// integrand after substituting `t = s^2`.
pub fn overlap_by_beta_integrand(p: usize, r: f64, eps: f64) -> f64 {
    let b = (p as f64 + 1.0) / 2.0;
    let f = |s: f64| 2.0 * (1.0 - s * s).powf(b - 1.0);
    let top = integrate(&f, 0.0, eps / (2.0 * r), 1e-14);
    let whole = integrate(&f, 0.0, 1.0, 1e-14);
    2.0 * top / whole
}

/// OLS on centered data through a QR factorization.
pub fn ols_by_qr(x: &Tensor, y: &Tensor) -> nalgebra::DMatrix<f64> {
    let center = |t: &Tensor| {
        let (n, m) = (t.rows(), t.row_len());
        let mut mat = nalgebra::DMatrix::from_row_slice(n, m, t.data());
        for j in 0..m {
            let mean = mat.column(j).mean();
            mat.column_mut(j).add_scalar_mut(-mean);
        }
        mat
    };
    let (xm, ym) = (center(x), center(y));
    let qr = xm.qr();
    let qty = qr.q().transpose() * ym;
    qr.r().solve_upper_triangular(&qty).expect("full rank")
}

/// A random graph pair over the same points. Every third pair is equal
/// after clamping; the rest differ in at least one strength by 0.05 or more.
pub fn random_graph_pair(seed: u64) -> (np_robust::graph::FuzzyGraph, np_robust::graph::FuzzyGraph, bool) {
    use np_robust::graph::FuzzyGraph;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(2..25);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.random_bool(0.3) {
                let s = match r.random_range(0..5) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => r.random_range(0.0..1.0),
                };
                edges.push((i, j, s));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, 1, r.random_range(0.0..1.0)));
    }
    let equal = seed.is_multiple_of(3);
    let mut other = edges.clone();
    if !equal {
        let e = r.random_range(0..other.len());
        let s = other[e].2;
        other[e].2 = if s > 0.5 { s - r.random_range(0.05..0.5) } else { s + r.random_range(0.05..0.5) };
    }
    let mu = FuzzyGraph::from_pairs(n, 0, edges).unwrap();
    let nu = FuzzyGraph::from_pairs(n, 0, other).unwrap();
    (mu, nu, equal)
}

/// Naive k nearest neighbors: full sort of every distance row.
pub fn knn_by_sorting(points: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = points.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (s.sqrt(), j)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d.iter().take(k).map(|e| e.1).collect()
        })
        .collect()
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &[Vec<f64>]) -> f64 {
    let cols = a[0].len();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut s = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = a.iter().map(|row| row.iter().zip(&v).map(|(x, y)| x * y).sum()).collect();
        let mut atav = vec![0.0; cols];
        for (row, &w) in a.iter().zip(&av) {
            for (o, x) in atav.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = atav.iter().map(|x| x / norm).collect();
        s = norm.sqrt();
    }
    s
}

/// Gaussian `X` (`n x p`) and `Y = X A` for a sparse `A` with `d` columns
/// of 5 nonzero entries each, plus small noise.
pub fn sparse_linear_trial(n: usize, p: usize, d: usize, seed: u64) -> (Tensor, Tensor) {
    use rand_distr::StandardNormal;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * p).map(|_| r.sample(StandardNormal)).collect();
    let mut a = vec![0.0; p * d];
    for j in 0..d {
        for _ in 0..5 {
            a[r.random_range(0..p) * d + j] = r.random_range(-2.0..2.0);
        }
    }
    let mut y = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let mut s: f64 = r.sample::<f64, _>(StandardNormal) * 0.01;
            for k in 0..p {
                s += x[i * p + k] * a[k * d + j];
            }
            y[i * d + j] = s;
        }
    }
    (Tensor::new(vec![n, p], x).unwrap(), Tensor::new(vec![n, d], y).unwrap())
}
