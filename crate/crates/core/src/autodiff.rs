//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly, appends a node holding
//! its value and whatever it needs for the backward pass, and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes once in reverse append
//! order, so inputs always precede the nodes that consume them.
//!
//! ```
//! use np_robust::{autodiff::Tape, tensor::Tensor};
//!
//! let mut tape = Tape::new();
//! let v = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(v, v).unwrap();
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(v).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::bottleneck::{Interpolation, ReferenceSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped below at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Membership strengths are clamped into `[CLAMP, 1 - CLAMP]`.
pub const STRENGTH_CLAMP: f64 = 1e-6;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PairCrossEntropy {
        u: Var,
        pairs: Vec<(usize, usize)>,
        targets: Vec<f64>,
    },
    KnnInterp {
        query: Var,
        low: Var,
        refs: ReferenceSet,
        plans: Vec<Interpolation>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignVar)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].needs_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((out, self.grad_flag(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, g) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, g) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, g) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let g = self.grad_flag(&[a]);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let g = self.grad_flag(&[a]);
        self.push(v, Op::Exp(a), g)
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        if t.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let v = t.map(f64::ln);
        let g = self.grad_flag(&[a]);
        Ok(self.push(v, Op::Log(a), g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.grad_flag(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.grad_flag(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let g = self.grad_flag(&[a]);
        self.push(v, Op::Mean(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.check(a)?.value.clone().reshape(shape)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    /// Flattens everything after the batch dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// `x [n, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.check(x)?.value,
            &self.check(w)?.value,
            &self.check(b)?.value,
        );
        if tx.ndim() != 2 || tw.ndim() != 2 || tb.ndim() != 1 {
            return Err(Error::shape(
                "linear",
                format!(
                    "expected x[n,in], w[out,in], b[out]; got {:?}, {:?}, {:?}",
                    tx.shape(),
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let (n, din) = (tx.shape()[0], tx.shape()[1]);
        let dout = tw.shape()[0];
        if tw.shape()[1] != din || tb.shape()[0] != dout {
            return Err(Error::shape(
                "linear",
                format!(
                    "input width {din} against weight {:?} and bias {:?}",
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xi = tx.row(i);
            let oi = &mut out[i * dout..(i + 1) * dout];
            for (o, slot) in oi.iter_mut().enumerate() {
                *slot = crate::tensor::dot(xi, tw.row(o)) + tb.data()[o];
            }
        }
        let v = Tensor::new(vec![n, dout], out)?;
        let g = self.grad_flag(&[x, w, b]);
        Ok(self.push(v, Op::Linear { x, w, b }, g))
    }

    /// Valid (unpadded) 2-D convolution. `x [N, C, H, W]`, `w [O, C, K, K]`,
    /// `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.check(x)?.value,
            &self.check(w)?.value,
            &self.check(b)?.value,
        );
        if tx.ndim() != 4 || tw.ndim() != 4 || tb.ndim() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expected x[N,C,H,W], w[O,C,K,K], b[O]; got {:?}, {:?}, {:?}",
                    tx.shape(),
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let geo = ConvGeometry::new(tx.shape(), tw.shape(), stride)?;
        if tb.shape()[0] != geo.o {
            return Err(Error::shape("conv2d", "bias length must equal output channels"));
        }
        let mut out = vec![0.0; geo.n * geo.o * geo.oh * geo.ow];
        let (xd, wd) = (tx.data(), tw.data());
        for n in 0..geo.n {
            for o in 0..geo.o {
                let obase = ((n * geo.o) + o) * geo.oh * geo.ow;
                out[obase..obase + geo.oh * geo.ow].fill(tb.data()[o]);
                for c in 0..geo.c {
                    let xbase = ((n * geo.c) + c) * geo.h * geo.w;
                    for ki in 0..geo.k {
                        for kj in 0..geo.k {
                            let wv = wd[((o * geo.c + c) * geo.k + ki) * geo.k + kj];
                            for r in 0..geo.oh {
                                let xrow = xbase + (r * stride + ki) * geo.w + kj;
                                let orow = obase + r * geo.ow;
                                let dst = &mut out[orow..orow + geo.ow];
                                if stride == 1 {
                                    let src = &xd[xrow..xrow + geo.ow];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for (q, d) in dst.iter_mut().enumerate() {
                                        *d += wv * xd[xrow + q * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![geo.n, geo.o, geo.oh, geo.ow], out)?;
        let g = self.grad_flag(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride }, g))
    }

    /// Non-overlapping max pooling with a square window. Ties go to the first
    /// (lowest flat index) maximum.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let tx = &self.check(x)?.value;
        if tx.ndim() != 4 || window == 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("expected x[N,C,H,W] and window > 0; got {:?}", tx.shape()),
            ));
        }
        let s = tx.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} larger than {h}x{w} input"),
            ));
        }
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        let xd = tx.data();
        for plane in 0..nc {
            let base = plane * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = base + (r * window) * w + q * window;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (r * window + i) * w + q * window + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let g = self.grad_flag(&[x]);
        Ok(self.push(v, Op::MaxPool2d { x, argmax }, g))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.check(x)?.value;
        if tx.ndim() != 2 {
            return Err(Error::shape("softmax", format!("expected 2-D, got {:?}", tx.shape())));
        }
        let mut v = tx.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        let g = self.grad_flag(&[x]);
        Ok(self.push(v, Op::Softmax(x), g))
    }

    /// Mean negative log-probability of the true class. Probabilities are
    /// clamped below at [`PROB_FLOOR`].
    pub fn nll_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let tp = &self.check(probs)?.value;
        if tp.ndim() != 2 || tp.rows() != labels.len() {
            return Err(Error::shape(
                "nll_loss",
                format!("probs {:?} against {} labels", tp.shape(), labels.len()),
            ));
        }
        let classes = tp.shape()[1];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::OutOfRange {
                    what: "class labels",
                    index: y,
                    size: classes,
                });
            }
            let row = tp.row(i);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("probability row {i} sums to {s}")));
            }
            total -= row[y].max(PROB_FLOOR).ln();
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        let g = self.grad_flag(&[probs]);
        Ok(self.push(
            v,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            g,
        ))
    }

    /// Rows `ids` of a 2-D table; repeated ids accumulate gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.check(table)?.value;
        if tt.ndim() != 2 {
            return Err(Error::shape("gather_rows", format!("expected 2-D table, got {:?}", tt.shape())));
        }
        let v = tt.select_rows(ids)?;
        let g = self.grad_flag(&[table]);
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Fuzzy-set cross entropy between target strengths and the strengths
    /// `ν = exp(-‖u_i - u_j‖)` implied by rows of `u`, summed over `pairs`.
    /// Both sides are clamped into `[STRENGTH_CLAMP, 1 - STRENGTH_CLAMP]`.
    pub fn pair_cross_entropy(
        &mut self,
        u: Var,
        pairs: &[(usize, usize)],
        targets: &[f64],
    ) -> Result<Var> {
        let tu = &self.check(u)?.value;
        if tu.ndim() != 2 || pairs.len() != targets.len() {
            return Err(Error::shape(
                "pair_cross_entropy",
                format!("u {:?}, {} pairs, {} targets", tu.shape(), pairs.len(), targets.len()),
            ));
        }
        let n = tu.rows();
        let mut total = 0.0;
        for (&(i, j), &mu) in pairs.iter().zip(targets) {
            if i >= n || j >= n {
                return Err(Error::OutOfRange {
                    what: "pair endpoints",
                    index: i.max(j),
                    size: n,
                });
            }
            let d = crate::tensor::sq_dist(tu.row(i), tu.row(j)).sqrt();
            total += strength_cross_entropy(mu, (-d).exp());
        }
        let v = Tensor::scalar(total);
        let g = self.grad_flag(&[u]);
        Ok(self.push(
            v,
            Op::PairCrossEntropy {
                u,
                pairs: pairs.to_vec(),
                targets: targets.to_vec(),
            },
            g,
        ))
    }

    /// Weighted k-nearest-neighbor interpolation of `low` rows around each
    /// `query` row, searching `refs` in the high-dimensional space. The
    /// neighbor set is fixed by the forward pass; gradients flow through the
    /// distance-based weights into `query` and into the selected `low` rows.
    pub fn knn_interp(&mut self, query: Var, low: Var, refs: &ReferenceSet) -> Result<Var> {
        let (tq, tl) = (&self.check(query)?.value, &self.check(low)?.value);
        if tq.ndim() != 2 || tl.ndim() != 2 {
            return Err(Error::shape(
                "knn_interp",
                format!("expected 2-D query and table, got {:?}, {:?}", tq.shape(), tl.shape()),
            ));
        }
        if tq.shape()[1] != refs.dim() || tl.rows() != refs.len() {
            return Err(Error::shape(
                "knn_interp",
                format!(
                    "query width {} / table rows {} against references [{} x {}]",
                    tq.shape()[1],
                    tl.rows(),
                    refs.len(),
                    refs.dim()
                ),
            ));
        }
        let d = tl.shape()[1];
        let mut out = vec![0.0; tq.rows() * d];
        let mut plans = Vec::with_capacity(tq.rows());
        for i in 0..tq.rows() {
            let plan = refs.plan(tq.row(i))?;
            let dst = &mut out[i * d..(i + 1) * d];
            for (&id, &g) in plan.ids.iter().zip(&plan.weights) {
                for (o, &y) in dst.iter_mut().zip(tl.row(id)) {
                    *o += g * y;
                }
            }
            plans.push(plan);
        }
        let v = Tensor::new(vec![tq.rows(), d], out)?;
        let g = self.grad_flag(&[query, low]);
        Ok(self.push(
            v,
            Op::KnnInterp {
                query,
                low,
                refs: refs.clone(),
                plans,
            },
            g,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs
    /// one. The loss gradient with respect to itself is 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(node.value.shape(), 1.0));
        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.index].needs_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        let wants = |v: Var| self.nodes[v.index].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, tb, |x, y| x * y));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, &node.value, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = val(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::Reshape(a) => {
                let back = g.clone().reshape(val(*a).shape()).expect("reshape is invertible");
                self.accumulate(grads, *a, back);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, din) = (tx.shape()[0], tx.shape()[1]);
                let dout = tw.shape()[0];
                if wants(*x) {
                    let mut gx = Tensor::zeros(&[n, din]);
                    for i in 0..n {
                        let gi = g.row(i);
                        let dst = gx.row_mut(i);
                        for (o, &go) in gi.iter().enumerate() {
                            if go != 0.0 {
                                for (d, &wv) in dst.iter_mut().zip(tw.row(o)) {
                                    *d += go * wv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if wants(*w) {
                    let mut gw = Tensor::zeros(&[dout, din]);
                    for i in 0..n {
                        let xi = tx.row(i);
                        for (o, &go) in g.row(i).iter().enumerate() {
                            if go != 0.0 {
                                for (d, &xv) in gw.row_mut(o).iter_mut().zip(xi) {
                                    *d += go * xv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(&[dout]);
                    for i in 0..n {
                        for (d, &go) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *d += go;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (tx, tw) = (val(*x), val(*w));
                let geo = ConvGeometry::new(tx.shape(), tw.shape(), *stride)
                    .expect("validated in forward");
                let (want_x, want_w) = (wants(*x), wants(*w));
                let mut gx = want_x.then(|| Tensor::zeros(tx.shape()));
                let mut gw = want_w.then(|| Tensor::zeros(tw.shape()));
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let s = *stride;
                for n in 0..geo.n {
                    for o in 0..geo.o {
                        let obase = ((n * geo.o) + o) * geo.oh * geo.ow;
                        for c in 0..geo.c {
                            let xbase = ((n * geo.c) + c) * geo.h * geo.w;
                            for ki in 0..geo.k {
                                for kj in 0..geo.k {
                                    let widx = ((o * geo.c + c) * geo.k + ki) * geo.k + kj;
                                    let wv = wd[widx];
                                    let mut acc = 0.0;
                                    for r in 0..geo.oh {
                                        let xrow = xbase + (r * s + ki) * geo.w + kj;
                                        let grow = &gd[obase + r * geo.ow..obase + (r + 1) * geo.ow];
                                        if let Some(gx) = gx.as_mut() {
                                            let gxd = gx.data_mut();
                                            for (q, &gv) in grow.iter().enumerate() {
                                                gxd[xrow + q * s] += wv * gv;
                                            }
                                        }
                                        if want_w {
                                            for (q, &gv) in grow.iter().enumerate() {
                                                acc += gv * xd[xrow + q * s];
                                            }
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw.data_mut()[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(&[geo.o]);
                    let plane = geo.oh * geo.ow;
                    for n in 0..geo.n {
                        for o in 0..geo.o {
                            let base = (n * geo.o + o) * plane;
                            gb.data_mut()[o] += gd[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yi, gi) = (y.row(i), g.row(i));
                    let inner: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in gx.row_mut(i).iter_mut().zip(yi).zip(gi) {
                        *d = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Nll { probs, labels } => {
                let tp = val(*probs);
                let scale = g.item() / labels.len() as f64;
                let mut gp = Tensor::zeros(tp.shape());
                for (i, &y) in labels.iter().enumerate() {
                    let p = tp.row(i)[y];
                    if p > PROB_FLOOR {
                        gp.row_mut(i)[y] = -scale / p;
                    }
                }
                self.accumulate(grads, *probs, gp);
            }
            Op::GatherRows { table, ids } => {
                let mut gt = Tensor::zeros(val(*table).shape());
                for (k, &id) in ids.iter().enumerate() {
                    for (d, &gv) in gt.row_mut(id).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::PairCrossEntropy { u, pairs, targets } => {
                let tu = val(*u);
                let upstream = g.item();
                let mut gu = Tensor::zeros(tu.shape());
                let dim = tu.shape()[1];
                let mut diff = vec![0.0; dim];
                for (&(i, j), &mu) in pairs.iter().zip(targets) {
                    for ((d, a), b) in diff.iter_mut().zip(tu.row(i)).zip(tu.row(j)) {
                        *d = a - b;
                    }
                    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let coef = upstream * strength_cross_entropy_ddist(mu, dist);
                    if coef == 0.0 || dist == 0.0 {
                        continue;
                    }
                    for (k, &dv) in diff.iter().enumerate() {
                        let step = coef * dv / dist;
                        gu.row_mut(i)[k] += step;
                        gu.row_mut(j)[k] -= step;
                    }
                }
                self.accumulate(grads, *u, gu);
            }
            Op::KnnInterp {
                query,
                low,
                refs,
                plans,
            } => {
                let (tq, tl) = (val(*query), val(*low));
                let out = &node.value;
                let d = tl.shape()[1];
                let mut gq = wants(*query).then(|| Tensor::zeros(tq.shape()));
                let mut gl = wants(*low).then(|| Tensor::zeros(tl.shape()));
                for (row, plan) in plans.iter().enumerate() {
                    let (gi, oi) = (g.row(row), out.row(row));
                    for (k, (&id, &w)) in plan.ids.iter().zip(&plan.weights).enumerate() {
                        let y = tl.row(id);
                        if let Some(gl) = gl.as_mut() {
                            for (dst, &gv) in gl.row_mut(id).iter_mut().zip(gi) {
                                *dst += w * gv;
                            }
                        }
                        if let Some(gq) = gq.as_mut() {
                            let dist = plan.dists[k];
                            if dist == 0.0 {
                                continue;
                            }
                            // d out / d s_k = w_k (y_k - out); s_k = ln v_k - dist_k
                            let ds: f64 = (0..d).map(|t| w * (y[t] - oi[t]) * gi[t]).sum();
                            let coef = -ds / dist;
                            let q = tq.row(row);
                            let r = refs.high_row(id);
                            for ((dst, &qv), &rv) in gq.row_mut(row).iter_mut().zip(q).zip(r) {
                                *dst += coef * (qv - rv);
                            }
                        }
                    }
                }
                if let Some(gq) = gq {
                    self.accumulate(grads, *query, gq);
                }
                if let Some(gl) = gl {
                    self.accumulate(grads, *low, gl);
                }
            }
        }
    }
}

/// Cross-entropy term for one pair with target `mu` and model strength `nu`,
/// both clamped into `[STRENGTH_CLAMP, 1 - STRENGTH_CLAMP]`.
pub fn strength_cross_entropy(mu: f64, nu: f64) -> f64 {
    let m = mu.clamp(STRENGTH_CLAMP, 1.0 - STRENGTH_CLAMP);
    let v = nu.clamp(STRENGTH_CLAMP, 1.0 - STRENGTH_CLAMP);
    m * (m / v).ln() + (1.0 - m) * ((1.0 - m) / (1.0 - v)).ln()
}

/// Derivative of [`strength_cross_entropy`] with `nu = exp(-dist)`, taken
/// with respect to `dist`. Zero where the clamp is active.
pub fn strength_cross_entropy_ddist(mu: f64, dist: f64) -> f64 {
    let nu = (-dist).exp();
    if !(STRENGTH_CLAMP..=1.0 - STRENGTH_CLAMP).contains(&nu) {
        return 0.0;
    }
    let m = mu.clamp(STRENGTH_CLAMP, 1.0 - STRENGTH_CLAMP);
    // dC/dnu = -m/nu + (1-m)/(1-nu); dnu/ddist = -nu
    m - (1.0 - m) * nu / (1.0 - nu)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize) -> Result<Self> {
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, wc, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "only square kernels are supported"));
        }
        if stride == 0 || kh > h || kw > wd {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} does not fit {h}x{wd}"),
            ));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w: wd,
            o,
            k: kh,
            oh: (h - kh) / stride + 1,
            ow: (wd - kw) / stride + 1,
        })
    }
}
