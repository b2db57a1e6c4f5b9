//! On-disk networks: a key=value manifest `<stem>.manifest` next to a raw
//! little-endian f64 blob `<stem>.bin`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::bottleneck::EmbeddingTable;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::network::{layers_to_string, parse_layers, Bottleneck, BottleneckKind, LayerDesc, Network, NetworkSpec, Sequential};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelTag {
    Fc,
    Np,
    /// Neighborhood-preserving with a compressed, weighted table.
    Ref,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelTag::Fc => "FC",
            ModelTag::Np => "NP",
            ModelTag::Ref => "Ref",
        })
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FC" => Ok(ModelTag::Fc),
            "NP" => Ok(ModelTag::Np),
            "Ref" => Ok(ModelTag::Ref),
            _ => Err(Error::invalid(format!("unknown model tag {s:?}"))),
        }
    }
}

impl ModelTag {
    pub fn of(net: &Network) -> Self {
        match net.table() {
            None => ModelTag::Fc,
            Some(t) if t.is_full_data() => ModelTag::Np,
            Some(_) => ModelTag::Ref,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tag: ModelTag,
    pub network: Network,
    /// Class of each table row, when known.
    pub table_labels: Option<Vec<usize>>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".bin")
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|p| p.parse().ok()).collect()
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            tag: ModelTag::of(&network),
            network,
            table_labels: None,
        }
    }

    fn arrays(&self) -> Vec<(String, Tensor)> {
        let net = &self.network;
        let mut out = Vec::new();
        for (i, t) in net.encoder.params().iter().enumerate() {
            out.push((format!("encoder.{i}"), t.clone()));
        }
        match &net.bottleneck {
            Bottleneck::Dense(s) => {
                for (i, t) in s.params().iter().enumerate() {
                    out.push((format!("bottleneck.{i}"), t.clone()));
                }
            }
            Bottleneck::Np(t) => {
                let r = t.references();
                out.push(("table.high".into(), r.high().clone()));
                out.push(("table.low".into(), t.low.clone()));
                out.push(("table.weight".into(), Tensor::from_vec(r.weights().to_vec())));
            }
        }
        if let Some(l) = &self.table_labels {
            let v = l.iter().map(|&c| c as f64).collect();
            out.push(("table.labels".into(), Tensor::from_vec(v)));
        }
        for (i, t) in net.classifier.params().iter().enumerate() {
            out.push((format!("classifier.{i}"), t.clone()));
        }
        out
    }

    /// Writes `<stem>.manifest` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let spec = &self.network.spec;
        let mut kv = KeyValues::new();
        kv.set("version", FORMAT_VERSION);
        kv.set("tag", self.tag);
        kv.set("input", shape_str(&spec.input));
        kv.set("classes", spec.classes);
        kv.set("encoder", layers_to_string(&spec.encoder));
        kv.set("bottleneck", spec.bottleneck);
        kv.set("classifier", layers_to_string(&spec.classifier));
        if let Some(t) = self.network.table() {
            kv.set("k_predict", t.k_predict());
        }
        let mut blob = Vec::new();
        let mut offset = 0usize;
        for (name, t) in self.arrays() {
            kv.set(&format!("array.{name}"), format!("{offset}:{}", shape_str(t.shape())));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        kv.set("blob_sha256", hex(&Sha256::digest(&blob)));
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bp = blob_path(stem);
        std::fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
        kv.write(&manifest_path(stem))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mp = manifest_path(stem);
        let bad = |detail: String| Error::format(&mp, detail);
        let kv = KeyValues::read(&mp)?;
        let version: u32 = kv.parsed("version")?.ok_or_else(|| bad("missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let tag: ModelTag = kv.require("tag")?.parse()?;
        let input = parse_shape(kv.require("input")?)
            .filter(|s| s.len() == 3)
            .ok_or_else(|| bad("input must be CxHxW".into()))?;
        let spec = NetworkSpec {
            input: [input[0], input[1], input[2]],
            encoder: parse_layers(kv.require("encoder")?)?,
            classifier: parse_layers(kv.require("classifier")?)?,
            bottleneck: kv.require("bottleneck")?.parse()?,
            classes: kv.parsed("classes")?.ok_or_else(|| bad("missing classes".into()))?,
        };
        let p = spec.validate()?;

        let bp = blob_path(stem);
        let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        if let Some(want) = kv.get("blob_sha256") {
            if hex(&Sha256::digest(&bytes)) != want {
                return Err(Error::format(&bp, "checksum mismatch"));
            }
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::format(&bp, "length is not a multiple of 8"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let array = |name: &str| -> Result<Option<Tensor>> {
            let Some(entry) = kv.get(&format!("array.{name}")) else {
                return Ok(None);
            };
            let (off, shape) = entry
                .split_once(':')
                .and_then(|(o, s)| Some((o.parse::<usize>().ok()?, parse_shape(s)?)))
                .ok_or_else(|| bad(format!("bad array entry {name}={entry}")))?;
            let len: usize = shape.iter().product();
            let data = values
                .get(off..off + len)
                .ok_or_else(|| bad(format!("array {name} runs past the blob")))?;
            Tensor::new(shape, data.to_vec()).map(Some)
        };
        let params = |prefix: &str, count: usize| -> Result<Vec<Tensor>> {
            (0..count)
                .map(|i| array(&format!("{prefix}.{i}"))?.ok_or_else(|| bad(format!("missing {prefix}.{i}"))))
                .collect()
        };
        let count = |prefix: &str| kv.keys().filter(|k| k.starts_with(&format!("array.{prefix}."))).count();

        let encoder = Sequential::from_params(spec.encoder.clone(), &spec.input, params("encoder", count("encoder"))?)?;
        let d = spec.bottleneck.dim();
        let mut table_labels = None;
        let bottleneck = match spec.bottleneck {
            BottleneckKind::FullyConnected(_) => Bottleneck::Dense(Sequential::from_params(
                dense_head(d),
                &[p],
                params("bottleneck", count("bottleneck"))?,
            )?),
            BottleneckKind::NeighborPreserving(_) => {
                let need = |name: &str| array(name)?.ok_or_else(|| bad(format!("missing {name}")));
                let high = need("table.high")?;
                let low = need("table.low")?;
                let weight = need("table.weight")?.into_data();
                let k: usize = kv.parsed("k_predict")?.ok_or_else(|| bad("missing k_predict".into()))?;
                if let Some(l) = array("table.labels")? {
                    table_labels = Some(l.data().iter().map(|&c| c as usize).collect());
                }
                Bottleneck::Np(EmbeddingTable::weighted(high, low, weight, k)?)
            }
        };
        let classifier =
            Sequential::from_params(spec.classifier.clone(), &[d], params("classifier", count("classifier"))?)?;
        Ok(Checkpoint {
            tag,
            network: Network {
                spec,
                encoder,
                bottleneck,
                classifier,
            },
            table_labels,
        })
    }
}

fn dense_head(d: usize) -> Vec<LayerDesc> {
    vec![LayerDesc::Dense { out_dim: d }, LayerDesc::Relu]
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
