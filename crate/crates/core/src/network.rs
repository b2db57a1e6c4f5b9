//! Layer descriptors, parameterized sequential segments, and the three-part
//! network `g3(g2(g1(x)))` with either a dense or a neighborhood-preserving
//! middle part.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::bottleneck::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerDesc {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool2d {
        window: usize,
    },
    Relu,
    Flatten,
    Dense {
        out_dim: usize,
    },
    Softmax,
}

impl fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDesc::Conv2d {
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv2d:{out_channels}:{kernel}:{stride}"),
            LayerDesc::MaxPool2d { window } => write!(f, "maxpool2d:{window}"),
            LayerDesc::Relu => f.write_str("relu"),
            LayerDesc::Flatten => f.write_str("flatten"),
            LayerDesc::Dense { out_dim } => write!(f, "dense:{out_dim}"),
            LayerDesc::Softmax => f.write_str("softmax"),
        }
    }
}

impl FromStr for LayerDesc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad layer descriptor {s:?}")))
        };
        let desc = match parts[0] {
            "conv2d" if parts.len() == 4 => LayerDesc::Conv2d {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: num(3)?,
            },
            "maxpool2d" if parts.len() == 2 => LayerDesc::MaxPool2d { window: num(1)? },
            "relu" if parts.len() == 1 => LayerDesc::Relu,
            "flatten" if parts.len() == 1 => LayerDesc::Flatten,
            "dense" if parts.len() == 2 => LayerDesc::Dense { out_dim: num(1)? },
            "softmax" if parts.len() == 1 => LayerDesc::Softmax,
            _ => return Err(Error::invalid(format!("bad layer descriptor {s:?}"))),
        };
        Ok(desc)
    }
}

pub fn layers_to_string(layers: &[LayerDesc]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn parse_layers(s: &str) -> Result<Vec<LayerDesc>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckKind {
    FullyConnected(usize),
    NeighborPreserving(usize),
}

impl BottleneckKind {
    pub fn dim(self) -> usize {
        match self {
            BottleneckKind::FullyConnected(d) | BottleneckKind::NeighborPreserving(d) => d,
        }
    }
}

impl fmt::Display for BottleneckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BottleneckKind::FullyConnected(d) => write!(f, "fc:{d}"),
            BottleneckKind::NeighborPreserving(d) => write!(f, "np:{d}"),
        }
    }
}

impl FromStr for BottleneckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, dim) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("bad bottleneck {s:?}")))?;
        let d: usize = dim
            .parse()
            .map_err(|_| Error::invalid(format!("bad bottleneck dimension {dim:?}")))?;
        match kind {
            "fc" => Ok(BottleneckKind::FullyConnected(d)),
            "np" => Ok(BottleneckKind::NeighborPreserving(d)),
            _ => Err(Error::invalid(format!("bad bottleneck kind {kind:?}"))),
        }
    }
}

/// Architecture of the full network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Per-sample input shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub encoder: Vec<LayerDesc>,
    pub classifier: Vec<LayerDesc>,
    pub bottleneck: BottleneckKind,
    pub classes: usize,
}

pub const CLASSIFIER_HIDDEN: usize = 64;

impl NetworkSpec {
    /// Two 5x5 conv layers with 5 and 20 channels, each followed by 2x2
    /// max pooling and ReLU; classifier of two dense layers with ReLU.
    pub fn mnist(bottleneck: BottleneckKind) -> Self {
        NetworkSpec {
            input: [1, 28, 28],
            encoder: vec![
                LayerDesc::Conv2d {
                    out_channels: 5,
                    kernel: 5,
                    stride: 1,
                },
                LayerDesc::MaxPool2d { window: 2 },
                LayerDesc::Relu,
                LayerDesc::Conv2d {
                    out_channels: 20,
                    kernel: 5,
                    stride: 1,
                },
                LayerDesc::MaxPool2d { window: 2 },
                LayerDesc::Relu,
                LayerDesc::Flatten,
            ],
            classifier: Self::default_classifier(10),
            bottleneck,
            classes: 10,
        }
    }

    /// Flat feature vectors of width `p`: an identity encoder.
    pub fn vector(p: usize, classes: usize, bottleneck: BottleneckKind) -> Self {
        NetworkSpec {
            input: [1, 1, p],
            encoder: vec![LayerDesc::Flatten],
            classifier: Self::default_classifier(classes),
            bottleneck,
            classes,
        }
    }

    pub fn default_classifier(classes: usize) -> Vec<LayerDesc> {
        vec![
            LayerDesc::Dense {
                out_dim: CLASSIFIER_HIDDEN,
            },
            LayerDesc::Relu,
            LayerDesc::Dense { out_dim: classes },
            LayerDesc::Softmax,
        ]
    }

    /// Checks dimensions end to end and returns the encoder output width.
    pub fn validate(&self) -> Result<usize> {
        let enc = output_shape(&self.encoder, &self.input)?;
        if enc.len() != 1 {
            return Err(Error::shape(
                "network",
                format!("encoder must end flat, ends with {enc:?}"),
            ));
        }
        let p = enc[0];
        let d = self.bottleneck.dim();
        let np = matches!(self.bottleneck, BottleneckKind::NeighborPreserving(_));
        if d == 0 || (np && d >= p) {
            return Err(Error::shape(
                "network",
                format!("bottleneck dimension {d} must lie in 1..{p}"),
            ));
        }
        let out = output_shape(&self.classifier, &[d])?;
        if out != [self.classes] {
            return Err(Error::shape(
                "network",
                format!("classifier yields {out:?}, expected [{}]", self.classes),
            ));
        }
        if self.classifier.last() != Some(&LayerDesc::Softmax) {
            return Err(Error::shape("network", "classifier must end with softmax"));
        }
        Ok(p)
    }
}

/// Per-sample output shape of a layer list.
pub fn output_shape(layers: &[LayerDesc], input: &[usize]) -> Result<Vec<usize>> {
    let mut s = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let bad = |detail: String| Error::shape("layer stack", format!("layer {i} ({l}): {detail}"));
        s = match *l {
            LayerDesc::Conv2d {
                out_channels,
                kernel,
                stride,
            } => {
                if s.len() != 3 || kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(bad(format!("needs a [c, h, w] input, got {s:?}")));
                }
                if kernel > s[1] || kernel > s[2] {
                    return Err(bad(format!("kernel {kernel} exceeds input {s:?}")));
                }
                vec![
                    out_channels,
                    (s[1] - kernel) / stride + 1,
                    (s[2] - kernel) / stride + 1,
                ]
            }
            LayerDesc::MaxPool2d { window } => {
                if s.len() != 3 || window == 0 || s[1] < window || s[2] < window {
                    return Err(bad(format!("window {window} does not fit {s:?}")));
                }
                vec![s[0], s[1] / window, s[2] / window]
            }
            LayerDesc::Relu => s,
            LayerDesc::Flatten => vec![s.iter().product()],
            LayerDesc::Dense { out_dim } => {
                if s.len() != 1 || out_dim == 0 {
                    return Err(bad(format!("needs a flat input, got {s:?}")));
                }
                vec![out_dim]
            }
            LayerDesc::Softmax => {
                if s.len() != 1 {
                    return Err(bad(format!("needs a flat input, got {s:?}")));
                }
                s
            }
        };
    }
    Ok(s)
}

/// Layers with their weights. Conv and dense layers own a weight and a bias.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<LayerDesc>,
    input: Vec<usize>,
    params: Vec<Tensor>,
}

impl Sequential {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layers: Vec<LayerDesc>, input: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut params = Vec::new();
        let mut s = input.to_vec();
        for (i, l) in layers.iter().enumerate() {
            match *l {
                LayerDesc::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let shape = [out_channels, s[0], kernel, kernel];
                    let fan_in = s[0] * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    params.push(glorot(&shape, fan_in, fan_out, rng));
                    params.push(Tensor::zeros(&[out_channels]));
                }
                LayerDesc::Dense { out_dim } => {
                    let din = s.first().copied().unwrap_or(0);
                    params.push(glorot(&[out_dim, din], din, out_dim, rng));
                    params.push(Tensor::zeros(&[out_dim]));
                }
                _ => {}
            }
            s = output_shape(&layers[i..=i], &s)?;
        }
        Ok(Sequential {
            layers,
            input: input.to_vec(),
            params,
        })
    }

    /// Rebuilds a segment from stored weights, checking their shapes.
    pub fn from_params(layers: Vec<LayerDesc>, input: &[usize], params: Vec<Tensor>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(layers, input, &mut rng)?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("sequential", "stored weights do not match layers"));
        }
        Ok(Sequential { params, ..template })
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn output_shape(&self) -> Vec<usize> {
        output_shape(&self.layers, &self.input).expect("validated at construction")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Puts the weights on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Runs the layers on a batch `x` of shape `[n, ...input]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let got = &tape.value(x).shape()[1..];
        if got != self.input.as_slice() {
            return Err(Error::shape(
                "forward",
                format!("segment expects per-sample {:?}, got {got:?}", self.input),
            ));
        }
        let mut h = x;
        let mut p = 0;
        for l in &self.layers {
            h = match *l {
                LayerDesc::Conv2d { stride, .. } => {
                    p += 2;
                    tape.conv2d(h, vars[p - 2], vars[p - 1], stride)?
                }
                LayerDesc::MaxPool2d { window } => tape.maxpool2d(h, window)?,
                LayerDesc::Relu => tape.relu(h),
                LayerDesc::Flatten => tape.flatten(h)?,
                LayerDesc::Dense { .. } => {
                    p += 2;
                    tape.linear(h, vars[p - 2], vars[p - 1])?
                }
                LayerDesc::Softmax => tape.softmax(h)?,
            };
        }
        Ok(h)
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// The middle part of the network.
#[derive(Clone, Debug)]
pub enum Bottleneck {
    /// Dense layer followed by ReLU.
    Dense(Sequential),
    /// Reference table with kNN interpolation.
    Np(EmbeddingTable),
}

/// Encoder, bottleneck, and classifier with their weights.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub encoder: Sequential,
    pub bottleneck: Bottleneck,
    pub classifier: Sequential,
}

/// Tape handles for every weight of a network.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub encoder: Vec<Var>,
    pub bottleneck: Vec<Var>,
    pub classifier: Vec<Var>,
    /// The low table, present for neighborhood-preserving networks.
    pub low: Option<Var>,
}

impl Network {
    /// Random weights. A neighborhood-preserving network starts with `table`
    /// as its bottleneck.
    pub fn new(spec: NetworkSpec, table: Option<EmbeddingTable>, seed: u64) -> Result<Self> {
        let p = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Sequential::new(spec.encoder.clone(), &spec.input, &mut rng)?;
        let d = spec.bottleneck.dim();
        let bottleneck = match (spec.bottleneck, table) {
            (BottleneckKind::FullyConnected(_), None) => Bottleneck::Dense(Sequential::new(
                vec![LayerDesc::Dense { out_dim: d }, LayerDesc::Relu],
                &[p],
                &mut rng,
            )?),
            (BottleneckKind::NeighborPreserving(_), Some(t)) => {
                if t.high_dim() != p || t.low_dim() != d {
                    return Err(Error::shape(
                        "network",
                        format!(
                            "table maps {} -> {}, network needs {p} -> {d}",
                            t.high_dim(),
                            t.low_dim()
                        ),
                    ));
                }
                Bottleneck::Np(t)
            }
            (BottleneckKind::NeighborPreserving(_), None) => {
                return Err(Error::invalid("a neighborhood-preserving network needs a table"))
            }
            (BottleneckKind::FullyConnected(_), Some(_)) => {
                return Err(Error::invalid("a dense bottleneck takes no table"))
            }
        };
        let classifier = Sequential::new(spec.classifier.clone(), &[d], &mut rng)?;
        Ok(Network {
            spec,
            encoder,
            bottleneck,
            classifier,
        })
    }

    pub fn table(&self) -> Option<&EmbeddingTable> {
        match &self.bottleneck {
            Bottleneck::Np(t) => Some(t),
            Bottleneck::Dense(_) => None,
        }
    }

    pub fn table_mut(&mut self) -> Option<&mut EmbeddingTable> {
        match &mut self.bottleneck {
            Bottleneck::Np(t) => Some(t),
            Bottleneck::Dense(_) => None,
        }
    }

    /// Puts every weight on the tape; trainable ones become leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNetwork {
        let encoder = self.encoder.bind(tape, trainable);
        let (bottleneck, low) = match &self.bottleneck {
            Bottleneck::Dense(s) => (s.bind(tape, trainable), None),
            Bottleneck::Np(t) => {
                let low = if trainable {
                    tape.leaf(t.low.clone())
                } else {
                    tape.constant(t.low.clone())
                };
                (Vec::new(), Some(low))
            }
        };
        let classifier = self.classifier.bind(tape, trainable);
        BoundNetwork {
            encoder,
            bottleneck,
            classifier,
            low,
        }
    }

    /// High-dimensional encoder output `g1(x)`.
    pub fn encode_var(&self, tape: &mut Tape, b: &BoundNetwork, x: Var) -> Result<Var> {
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite("network input"));
        }
        self.encoder.forward(tape, &b.encoder, x)
    }

    /// Low embedding `g2(g1(x))` along the prediction path.
    pub fn embed_var(&self, tape: &mut Tape, b: &BoundNetwork, x: Var) -> Result<Var> {
        let high = self.encode_var(tape, b, x)?;
        match &self.bottleneck {
            Bottleneck::Dense(s) => s.forward(tape, &b.bottleneck, high),
            Bottleneck::Np(t) => {
                let low = b.low.expect("bound with the table");
                tape.knn_interp(high, low, t.references())
            }
        }
    }

    /// Class probabilities along the prediction path.
    pub fn predict_var(&self, tape: &mut Tape, b: &BoundNetwork, x: Var) -> Result<Var> {
        let low = self.embed_var(tape, b, x)?;
        self.classifier.forward(tape, &b.classifier, low)
    }

    /// Class probabilities for a batch `[n, c, h, w]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.predict_var(&mut tape, &b, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Encoder outputs for a batch, computed in chunks.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(x.rows() * self.encoder.output_shape()[0]);
        for chunk in batch_ranges(x.rows(), 256) {
            let ids: Vec<usize> = chunk.collect();
            let mut tape = Tape::new();
            let enc = self.encoder.bind(&mut tape, false);
            let xv = tape.constant(x.select_rows(&ids)?);
            if !tape.value(xv).all_finite() {
                return Err(Error::NonFinite("network input"));
            }
            let h = self.encoder.forward(&mut tape, &enc, xv)?;
            out.extend_from_slice(tape.value(h).data());
        }
        Tensor::new(vec![x.rows(), self.encoder.output_shape()[0]], out)
    }

    /// Arg-max predictions, computed in chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.rows());
        for chunk in batch_ranges(x.rows(), 256) {
            let ids: Vec<usize> = chunk.collect();
            let probs = self.predict_proba(&x.select_rows(&ids)?)?;
            out.extend((0..probs.rows()).map(|i| argmax(probs.row(i))));
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() || labels.len() != x.rows() {
            return Err(Error::invalid("accuracy needs one label per sample"));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mutable references to every dense weight tensor, in bind order.
    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoder.params_mut().iter_mut().collect();
        match &mut self.bottleneck {
            Bottleneck::Dense(s) => out.extend(s.params_mut().iter_mut()),
            Bottleneck::Np(t) => out.push(&mut t.low),
        }
        out.extend(self.classifier.params_mut().iter_mut());
        out
    }
}

impl BoundNetwork {
    /// Handles in the same order as [`Network::weights_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.clone();
        v.extend(&self.bottleneck);
        v.extend(self.low);
        v.extend(&self.classifier);
        v
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn batch_ranges(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| s..(s + size).min(n))
}

/// Stochastic gradient descent, optionally with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v <- m v + g; w <- w - lr v` for each weight with a gradient.
    pub fn step(&mut self, weights: Vec<&mut Tensor>, vars: &[Var], grads: &Gradients) {
        if self.velocity.len() < weights.len() {
            self.velocity.resize(weights.len(), None);
        }
        for (slot, (w, &v)) in weights.into_iter().zip(vars).enumerate() {
            let Some(g) = grads.get(v) else { continue };
            let vel = self.velocity[slot].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *wv -= self.lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_encoder_width() {
        let spec = NetworkSpec::mnist(BottleneckKind::FullyConnected(8));
        assert_eq!(spec.validate().unwrap(), 320);
    }

    #[test]
    fn inconsistent_stacks_are_rejected() {
        let mut spec = NetworkSpec::mnist(BottleneckKind::FullyConnected(8));
        spec.classifier = vec![LayerDesc::Dense { out_dim: 7 }, LayerDesc::Softmax];
        assert!(spec.validate().is_err());
        spec = NetworkSpec::mnist(BottleneckKind::NeighborPreserving(400));
        assert!(spec.validate().is_err());
        spec = NetworkSpec::mnist(BottleneckKind::FullyConnected(8));
        spec.encoder.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn descriptors_round_trip() {
        let spec = NetworkSpec::mnist(BottleneckKind::NeighborPreserving(16));
        let s = layers_to_string(&spec.encoder);
        assert_eq!(parse_layers(&s).unwrap(), spec.encoder);
        assert_eq!("np:16".parse::<BottleneckKind>().unwrap(), spec.bottleneck);
        assert!("conv2d:5".parse::<LayerDesc>().is_err());
    }

    #[test]
    fn glorot_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Sequential::new(vec![LayerDesc::Dense { out_dim: 30 }], &[50], &mut rng).unwrap();
        let a = (6.0f64 / 80.0).sqrt();
        assert!(s.params()[0].data().iter().all(|v| v.abs() <= a));
        assert!(s.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let spec = NetworkSpec::mnist(BottleneckKind::FullyConnected(8));
        let net = Network::new(spec, None, 3).unwrap();
        let x = Tensor::new(
            vec![2, 1, 28, 28],
            (0..2 * 784).map(|i| ((i * 37) % 255) as f64 / 255.0).collect(),
        )
        .unwrap();
        let a = net.predict_proba(&x).unwrap();
        let b = net.predict_proba(&x).unwrap();
        assert_eq!(a.data(), b.data());
        for i in 0..2 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut bad = x.clone();
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(net.predict_proba(&bad), Err(Error::NonFinite(_))));
        let wrong = Tensor::zeros(&[1, 1, 27, 28]);
        assert!(net.predict_proba(&wrong).is_err());
    }

    #[test]
    fn sgd_with_zero_lr_is_a_no_op() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        let mut weight = Tensor::from_vec(vec![1.0, 2.0]);
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(vec![&mut weight], &[w], &g);
        assert_eq!(weight.data(), &[1.0, 2.0]);
        let mut opt = Sgd::new(0.5, 0.0);
        opt.step(vec![&mut weight], &[w], &g);
        assert_eq!(weight.data(), &[0.5, 1.5]);
    }
}
