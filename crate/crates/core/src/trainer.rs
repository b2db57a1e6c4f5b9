//! Training loops: plain classification for dense bottlenecks, joint
//! classification plus graph loss for neighborhood-preserving ones, graph
//! embedding initialization, and adversarial training.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attack::{pgd_attack, AttackConfig};
use crate::autodiff::{strength_cross_entropy_ddist, Tape, Var};
use crate::bottleneck::EmbeddingTable;
use crate::config::KeyValues;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{fuzzy_graph, FuzzyGraph, DEFAULT_K};
use crate::network::{BottleneckKind, BoundNetwork, Network, NetworkSpec, Sgd};
use crate::tensor::{sq_dist, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Momentum,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum => "momentum",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" => Ok(Optimizer::Momentum),
            _ => Err(Error::invalid(format!("unknown optimizer {s:?}"))),
        }
    }
}

pub const MOMENTUM: f64 = 0.9;
/// Early stop when the epoch loss changes by less than this.
pub const CONVERGENCE_TOL: f64 = 1e-5;
const INIT_SCALE: f64 = 1e-2;
const INIT_CLIP: f64 = 4.0;
const NEGATIVE_TRIES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub graph_refresh_epochs: usize,
    pub neg_samples: usize,
    pub seed: u64,
    pub adversarial: Option<AttackConfig>,
    pub optimizer: Optimizer,
    /// Neighbor count for graphs and prediction.
    pub k: usize,
    pub init_epochs: usize,
    pub init_lr: f64,
    /// Classification-only epochs that train the encoder of a
    /// neighborhood-preserving network before its table is built.
    pub encoder_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lr: 0.05,
            epochs: 30,
            batch: 64,
            graph_refresh_epochs: 5,
            neg_samples: 5,
            seed: 0,
            adversarial: None,
            optimizer: Optimizer::Momentum,
            k: DEFAULT_K,
            init_epochs: 50,
            init_lr: 1.0,
            encoder_warmup_epochs: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be >= 0", self.lr));
        }
        if self.batch < 2 {
            return bad(format!("batch {} must be at least 2", self.batch));
        }
        if self.graph_refresh_epochs == 0 {
            return bad("graph_refresh_epochs must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.init_lr >= 0.0 && self.init_lr.is_finite()) {
            return bad(format!("init_lr {} must be >= 0", self.init_lr));
        }
        if let Some(a) = &self.adversarial {
            a.validate()?;
        }
        Ok(())
    }

    pub fn momentum(&self) -> f64 {
        match self.optimizer {
            Optimizer::Sgd => 0.0,
            Optimizer::Momentum => MOMENTUM,
        }
    }

    /// Every key, resolved.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("alpha", self.alpha);
        kv.set("lr", self.lr);
        kv.set("epochs", self.epochs);
        kv.set("batch", self.batch);
        kv.set("graph_refresh_epochs", self.graph_refresh_epochs);
        kv.set("neg_samples", self.neg_samples);
        kv.set("seed", self.seed);
        kv.set("optimizer", self.optimizer);
        kv.set("k", self.k);
        kv.set("init_epochs", self.init_epochs);
        kv.set("init_lr", self.init_lr);
        kv.set("encoder_warmup_epochs", self.encoder_warmup_epochs);
        match &self.adversarial {
            Some(a) => {
                kv.set("adv_eps", a.epsilon);
                kv.set("adv_steps", a.iters);
                kv.set("adv_alpha", a.step);
                kv.set("adv_random_start", a.random_start);
            }
            None => kv.set("adv_eps", "none"),
        }
        kv
    }

    /// Overrides the defaults with the keys present in `kv`. Unknown keys
    /// are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply(kv)?;
        Ok(c)
    }

    /// Applies the keys present in `kv` on top of `self`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        const KNOWN: [&str; 16] = [
            "alpha",
            "lr",
            "epochs",
            "batch",
            "graph_refresh_epochs",
            "neg_samples",
            "seed",
            "optimizer",
            "k",
            "init_epochs",
            "init_lr",
            "encoder_warmup_epochs",
            "adv_eps",
            "adv_steps",
            "adv_alpha",
            "adv_random_start",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::invalid(format!("unknown training key {k:?}")));
        }
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.parsed(stringify!($field))? {
                    self.$field = v;
                }
            };
        }
        take!(alpha);
        take!(lr);
        take!(epochs);
        take!(batch);
        take!(graph_refresh_epochs);
        take!(neg_samples);
        take!(seed);
        take!(optimizer);
        take!(k);
        take!(init_epochs);
        take!(init_lr);
        take!(encoder_warmup_epochs);
        match kv.get("adv_eps") {
            Some("none") => self.adversarial = None,
            Some(_) => {
                let eps: f64 = kv.parsed("adv_eps")?.expect("present");
                let mut a = AttackConfig::train(eps);
                if let Some(s) = kv.parsed("adv_steps")? {
                    a.iters = s;
                }
                if let Some(s) = kv.parsed("adv_alpha")? {
                    a.step = s;
                }
                if let Some(r) = kv.parsed("adv_random_start")? {
                    a.random_start = r;
                }
                self.adversarial = Some(a);
            }
            None => {}
        }
        self.validate()
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_c: f64,
    pub l_g: f64,
    pub l_full: f64,
}

pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,L_C,L_G,L_full\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{}", h.epoch, h.l_c, h.l_g, h.l_full);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub network: Network,
    /// Graph over the training set (neighborhood-preserving runs).
    pub graph: Option<FuzzyGraph>,
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

/// Optimizes low-dimensional coordinates against the graph of `u_high`
/// alone, starting from a seeded Gaussian of scale 1e-2.
pub fn init_embeddings(u_high: &Tensor, d: usize, cfg: &TrainConfig) -> Result<Tensor> {
    if u_high.ndim() != 2 || u_high.rows() < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    if d == 0 || d >= u_high.shape()[1] {
        return Err(Error::invalid(format!(
            "target dimension {d} must lie in 1..{}",
            u_high.shape()[1]
        )));
    }
    let graph = fuzzy_graph(u_high, cfg.k.min(u_high.rows() - 1))?;
    embed_graph(&graph, d, cfg)
}

/// [`init_embeddings`] on a prebuilt graph.
///
/// Each epoch visits the edges in a shuffled order. An edge `(i, j, mu)`
/// moves both endpoints along the cross-entropy gradient; each of
/// `neg_samples` random non-neighbors `j'` of `i` then pushes `i` away with
/// target strength 0. Gradient coordinates are clipped to ±4 and the
/// learning rate decays linearly to 0. An attractive move never exceeds a
/// quarter of the pair's current separation per endpoint.
pub fn embed_graph(graph: &FuzzyGraph, d: usize, cfg: &TrainConfig) -> Result<Tensor> {
    let n = graph.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut y: Vec<f64> = (0..n * d)
        .map(|_| INIT_SCALE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let neighbors: HashSet<(usize, usize)> = graph.pairs.iter().copied().collect();
    let mut order: Vec<usize> = (0..graph.len()).collect();
    let mut diff = vec![0.0; d];
    for epoch in 0..cfg.init_epochs {
        let lr = cfg.init_lr * (1.0 - epoch as f64 / cfg.init_epochs as f64);
        order.shuffle(&mut rng);
        for &e in &order {
            let (a, b) = graph.pairs[e];
            // Alternate which endpoint acts as the head.
            let (i, j) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            move_pair(&mut y, d, i, j, graph.strengths[e], lr, true, &mut diff);
            for _ in 0..cfg.neg_samples {
                let found = (0..NEGATIVE_TRIES).map(|_| rng.random_range(0..n)).find(|&t| {
                    t != i && !neighbors.contains(&(i.min(t), i.max(t)))
                });
                if let Some(t) = found {
                    move_pair(&mut y, d, i, t, 0.0, lr, false, &mut diff);
                }
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            epoch: cfg.init_epochs,
            detail: "embedding initialization produced non-finite values".into(),
        });
    }
    Tensor::new(vec![n, d], y)
}

#[allow(clippy::too_many_arguments)]
fn move_pair(y: &mut [f64], d: usize, i: usize, j: usize, mu: f64, lr: f64, both: bool, diff: &mut [f64]) {
    let (yi, yj) = (&y[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
    for ((o, a), b) in diff.iter_mut().zip(yi).zip(yj) {
        *o = a - b;
    }
    let dist = sq_dist(yi, yj).sqrt();
    if dist == 0.0 {
        return;
    }
    let coef = strength_cross_entropy_ddist(mu, dist) / dist;
    if coef == 0.0 {
        return;
    }
    let mut scale = lr;
    if coef > 0.0 {
        scale = scale.min(0.25 / coef);
    }
    for (k, &dv) in diff.iter().enumerate() {
        let step = scale * (coef * dv).clamp(-INIT_CLIP, INIT_CLIP);
        y[i * d + k] -= step;
        if both {
            y[j * d + k] += step;
        }
    }
}

/// One mini-batch: input rows, labels, training-set ids, and the pairs that
/// enter the graph loss (local indices into the batch) with their targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
}

/// Graph pairs with both endpoints inside `ids`, plus `neg_samples` random
/// non-neighbor pairs inside the batch per positive pair (target 0).
pub fn batch_pairs(
    graph: &FuzzyGraph,
    adjacency: &[Vec<(usize, f64)>],
    ids: &[usize],
    neg_samples: usize,
    rng: &mut impl Rng,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let local: HashMap<usize, usize> = ids.iter().enumerate().map(|(a, &i)| (i, a)).collect();
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for (a, &i) in ids.iter().enumerate() {
        for &(j, mu) in &adjacency[i] {
            if i < j {
                if let Some(&b) = local.get(&j) {
                    pairs.push((a, b));
                    targets.push(mu);
                }
            }
        }
    }
    let positives = pairs.len();
    let m = ids.len();
    for _ in 0..positives * neg_samples {
        let found = (0..NEGATIVE_TRIES)
            .map(|_| (rng.random_range(0..m), rng.random_range(0..m)))
            .find(|&(a, b)| a != b && ids[a] != ids[b] && graph.strength(ids[a], ids[b]) == 0.0);
        if let Some(p) = found {
            pairs.push(p);
            targets.push(0.0);
        }
    }
    (pairs, targets)
}

/// Loss terms of one batch, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_c: Var,
    pub l_g: Option<Var>,
    pub l_full: Var,
}

/// `L_C + alpha L_G` for a neighborhood-preserving network, where `L_C`
/// classifies the gathered table rows of the batch ids and `L_G` compares
/// the batch pairs against strengths of those rows.
pub fn np_batch_loss(
    net: &Network,
    tape: &mut Tape,
    bound: &BoundNetwork,
    batch: &Batch,
    alpha: f64,
) -> Result<LossParts> {
    let low = bound
        .low
        .ok_or_else(|| Error::invalid("network has no embedding table"))?;
    let rows = tape.gather_rows(low, &batch.ids)?;
    let probs = net.classifier.forward(tape, &bound.classifier, rows)?;
    let l_c = tape.nll_loss(probs, &batch.labels)?;
    if alpha == 0.0 {
        return Ok(LossParts {
            l_c,
            l_g: None,
            l_full: l_c,
        });
    }
    let l_g = tape.pair_cross_entropy(rows, &batch.pairs, &batch.targets)?;
    let weighted = tape.scale(l_g, alpha);
    let l_full = tape.add(l_c, weighted)?;
    Ok(LossParts {
        l_c,
        l_g: Some(l_g),
        l_full,
    })
}

/// Classification loss along the prediction path.
pub fn predict_loss(net: &Network, tape: &mut Tape, bound: &BoundNetwork, x: &Tensor, labels: &[usize]) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let probs = net.predict_var(tape, bound, xv)?;
    tape.nll_loss(probs, labels)
}

fn check_dataset(ds: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    spec.validate()?;
    if ds.len() < 2 {
        return Err(Error::invalid("training needs at least two samples"));
    }
    if ds.images.shape()[1..] != spec.input[..] {
        return Err(Error::shape(
            "train",
            format!("images {:?} against network input {:?}", &ds.images.shape()[1..], spec.input),
        ));
    }
    if ds.classes > spec.classes {
        return Err(Error::invalid(format!(
            "{} classes in data, network has {}",
            ds.classes, spec.classes
        )));
    }
    Ok(())
}

fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    // A trailing single sample cannot form a pair; fold it into the previous batch.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn finite_or_diverged(v: f64, epoch: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("{what} became {v}"),
        })
    }
}

/// Classification epochs along the prediction path, with an adversarial
/// batch per step when configured.
fn classification_epochs(
    net: &mut Network,
    ds: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    history: &mut Vec<EpochLoss>,
) -> Result<()> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum());
    let mut prev: Option<f64> = None;
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(ds.len(), cfg.batch, rng);
        for ids in &batches {
            let x = ds.images.select_rows(ids)?;
            let labels: Vec<usize> = ids.iter().map(|&i| ds.labels[i]).collect();
            let adv = match &cfg.adversarial {
                Some(a) => Some(pgd_attack(net, &x, &labels, a, rng)?),
                None => None,
            };
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let mut loss = predict_loss(net, &mut tape, &bound, &x, &labels)?;
            if let Some(adv) = &adv {
                let la = predict_loss(net, &mut tape, &bound, adv, &labels)?;
                loss = tape.add(loss, la)?;
            }
            sum += finite_or_diverged(tape.value(loss).item(), epoch, "L_C")?;
            let grads = tape.backward(loss)?;
            opt.step(net.weights_mut(), &bound.vars(), &grads);
        }
        let l = sum / batches.len() as f64;
        history.push(EpochLoss {
            epoch,
            l_c: l,
            l_g: 0.0,
            l_full: l,
        });
        if prev.is_some_and(|p| (p - l).abs() < CONVERGENCE_TOL) {
            break;
        }
        prev = Some(l);
    }
    Ok(())
}

/// End-to-end classification training of a dense-bottleneck network.
pub fn train_fc(ds: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainState> {
    if !matches!(spec.bottleneck, BottleneckKind::FullyConnected(_)) {
        return Err(Error::invalid("train_fc needs a dense bottleneck"));
    }
    check_dataset(ds, spec, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(spec.clone(), None, cfg.seed)?;
    let mut history = Vec::new();
    classification_epochs(&mut net, ds, cfg, cfg.epochs, &mut rng, &mut history)?;
    Ok(TrainState {
        network: net,
        graph: None,
        epoch: history.len(),
        history,
    })
}

/// Joint training of a neighborhood-preserving network.
///
/// The encoder is first trained for `encoder_warmup_epochs` through a
/// temporary dense head that is then discarded. The graph of the encoder
/// outputs initializes the table; afterwards each step minimizes
/// `L_C + alpha L_G` over the gathered table rows of the batch, with the
/// graph rebuilt from fresh encoder outputs every `graph_refresh_epochs`.
/// With an attack configured, the attacked batch goes through the
/// prediction path and its loss is added with equal weight.
pub fn train_np(ds: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainState> {
    let BottleneckKind::NeighborPreserving(d) = spec.bottleneck else {
        return Err(Error::invalid("train_np needs a neighborhood-preserving bottleneck"));
    };
    check_dataset(ds, spec, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut warm_spec = spec.clone();
    warm_spec.bottleneck = BottleneckKind::FullyConnected(d);
    let mut warm = Network::new(warm_spec, None, cfg.seed)?;
    if cfg.encoder_warmup_epochs > 0 {
        let warm_cfg = TrainConfig {
            adversarial: None,
            ..cfg.clone()
        };
        let mut scratch = Vec::new();
        classification_epochs(&mut warm, ds, &warm_cfg, cfg.encoder_warmup_epochs, &mut rng, &mut scratch)?;
    }

    let k = cfg.k.min(ds.len() - 1);
    let u_high = warm.encode(&ds.images)?;
    let mut graph = fuzzy_graph(&u_high, k)?;
    let low = embed_graph(&graph, d, cfg)?;
    let table = EmbeddingTable::new(u_high, low, k)?;
    let mut net = Network::new(spec.clone(), Some(table), cfg.seed.wrapping_add(1))?;
    net.encoder = warm.encoder;

    let mut adjacency = graph.adjacency();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum());
    let mut history = Vec::new();
    let mut prev: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % cfg.graph_refresh_epochs == 0 {
            let u_high = net.encode(&ds.images)?;
            graph = fuzzy_graph(&u_high, k)?;
            adjacency = graph.adjacency();
            net.table_mut().expect("np network").set_high(u_high)?;
        }
        let (mut sc, mut sg, mut sf) = (0.0, 0.0, 0.0);
        let batches = epoch_batches(ds.len(), cfg.batch, &mut rng);
        for ids in &batches {
            let labels: Vec<usize> = ids.iter().map(|&i| ds.labels[i]).collect();
            let (pairs, targets) = if cfg.alpha > 0.0 {
                batch_pairs(&graph, &adjacency, ids, cfg.neg_samples, &mut rng)
            } else {
                (Vec::new(), Vec::new())
            };
            let x = ds.images.select_rows(ids)?;
            let adv = match &cfg.adversarial {
                Some(a) => Some(pgd_attack(&net, &x, &labels, a, &mut rng)?),
                None => None,
            };
            let batch = Batch {
                x,
                labels,
                ids: ids.clone(),
                pairs,
                targets,
            };
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let parts = np_batch_loss(&net, &mut tape, &bound, &batch, cfg.alpha)?;
            let mut total = parts.l_full;
            let mut l_c = tape.value(parts.l_c).item();
            if let Some(adv) = &adv {
                let la = predict_loss(&net, &mut tape, &bound, adv, &batch.labels)?;
                l_c += tape.value(la).item();
                total = tape.add(total, la)?;
            }
            sc += finite_or_diverged(l_c, epoch, "L_C")?;
            sg += finite_or_diverged(parts.l_g.map_or(0.0, |v| tape.value(v).item()), epoch, "L_G")?;
            sf += finite_or_diverged(tape.value(total).item(), epoch, "L_full")?;
            let grads = tape.backward(total)?;
            opt.step(net.weights_mut(), &bound.vars(), &grads);
        }
        let nb = batches.len() as f64;
        let l_full = sf / nb;
        history.push(EpochLoss {
            epoch,
            l_c: sc / nb,
            l_g: sg / nb,
            l_full,
        });
        if prev.is_some_and(|p| (p - l_full).abs() < CONVERGENCE_TOL) {
            break;
        }
        prev = Some(l_full);
    }
    // Keys must match the encoder that will see test inputs.
    if cfg.adversarial.is_some() {
        let u_high = net.encode(&ds.images)?;
        net.table_mut().expect("np network").set_high(u_high)?;
    }
    Ok(TrainState {
        network: net,
        graph: Some(graph),
        epoch: history.len(),
        history,
    })
}

/// Adversarial training for either bottleneck kind.
pub fn train_adversarial(ds: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainState> {
    if cfg.adversarial.is_none() {
        return Err(Error::invalid("adversarial training needs an attack configuration"));
    }
    match spec.bottleneck {
        BottleneckKind::FullyConnected(_) => train_fc(ds, spec, cfg),
        BottleneckKind::NeighborPreserving(_) => train_np(ds, spec, cfg),
    }
}
