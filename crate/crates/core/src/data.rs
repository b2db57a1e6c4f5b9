//! IDX loading and writing, stratified subsets, synthetic point clouds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
// Same layout with big-endian f64 pixels, for data that is not 8-bit.
const IMAGES_F64_MAGIC: u32 = 0x0000_0E03;

/// Labeled images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, channels, height, width]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: &str) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [n, c, h, w], got {:?}", images.shape()),
            ));
        }
        if images.rows() != labels.len() || labels.is_empty() {
            return Err(Error::invalid(format!(
                "{} images against {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            images,
            labels,
            classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature count.
    pub fn features(&self) -> usize {
        self.images.row_len()
    }

    /// Images flattened to `[n, features]`.
    pub fn flat(&self) -> Tensor {
        self.images
            .clone()
            .reshape(&[self.len(), self.features()])
            .expect("same element count")
    }

    pub fn select(&self, ids: &[usize]) -> Result<Dataset> {
        let labels = ids
            .iter()
            .map(|&i| self.labels.get(i).copied())
            .collect::<Option<Vec<_>>>()
            .ok_or(Error::OutOfRange {
                what: "dataset",
                index: ids.iter().copied().max().unwrap_or(0),
                size: self.len(),
            })?;
        Ok(Dataset {
            images: self.images.select_rows(ids)?,
            labels,
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// SHA-256 over shape, pixel bits and labels, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parses an IDX image file into `[n, 1, h, w]` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, path)?;
    let width = match magic {
        IMAGES_MAGIC => 1,
        IMAGES_F64_MAGIC => 8,
        _ => {
            return Err(Error::format(
                path,
                format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
            ))
        }
    };
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, "zero dimension in header"));
    }
    let body = &bytes[16..];
    let need = n * h * w * width;
    if body.len() < need {
        return Err(Error::format(
            path,
            format!("truncated: {} payload bytes, header promises {need}", body.len()),
        ));
    }
    let data: Vec<f64> = if width == 1 {
        body[..need].iter().map(|&b| f64::from(b) / 255.0).collect()
    } else {
        body[..need]
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    };
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(path, "pixel values outside [0, 1]"));
    }
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            path,
            format!("truncated: {} labels present, header promises {n}", body.len()),
        ));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an image file and a label file; either may be gzip-compressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", labels.len(), images.rows()),
        ));
    }
    let split = images_path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("data")
        .to_string();
    Dataset::new(images, labels, &split)
}

/// IDX bytes for a dataset: 8-bit pixels when every value is a multiple of
/// 1/255, big-endian f64 pixels otherwise. Channels are folded into rows.
pub fn idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    let (n, h, w) = (s[0], s[1] * s[2], s[3]);
    let bytes: Option<Vec<u8>> = ds
        .images
        .data()
        .iter()
        .map(|&v| {
            let b = (v * 255.0).round();
            (b / 255.0 == v).then_some(b as u8)
        })
        .collect();
    let mut img = Vec::with_capacity(16 + ds.images.len());
    let magic = if bytes.is_some() { IMAGES_MAGIC } else { IMAGES_F64_MAGIC };
    for v in [magic, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    match bytes {
        Some(b) => img.extend_from_slice(&b),
        None => {
            for &v in ds.images.data() {
                img.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &y in &ds.labels {
        let b = u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} exceeds 255")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

/// Writes both IDX files, gzip-compressed when the path ends in `.gz`.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = idx_bytes(ds)?;
    for (path, bytes) in [(images_path, img), (labels_path, lab)] {
        let out = if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?
        } else {
            bytes
        };
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Seeded stratified sample of `n` points. Each class receives its
/// proportional share, rounded by largest remainder; kept points stay in
/// their original order.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if n < by_class.len() {
        return Err(Error::invalid(format!(
            "subset of {n} cannot cover {} classes",
            by_class.len()
        )));
    }
    if n > ds.len() {
        return Err(Error::invalid(format!("subset of {n} from {} samples", ds.len())));
    }
    let total = ds.len() as f64;
    let mut quota: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, m)| {
            let exact = n as f64 * m.len() as f64 / total;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut left = n - quota.iter().map(|q| q.1).sum::<usize>();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[i].1 < by_class[&quota[i].0].len() {
            quota[i].1 += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(n);
    for (c, q, _) in quota {
        let mut members = by_class[&c].clone();
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..q]);
    }
    keep.sort_unstable();
    let mut out = ds.select(&keep)?;
    out.split = format!("{}[{n}]", ds.split);
    Ok(out)
}

/// Synthetic point-cloud families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    TwoMoons,
    GaussianBlobs { classes: usize, dim: usize },
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthKind::TwoMoons => f.write_str("two_moons"),
            SynthKind::GaussianBlobs { classes, dim } => write!(f, "gaussian_blobs({classes},{dim})"),
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    /// `two_moons` or `gaussian_blobs(c,p)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "two_moons" {
            return Ok(SynthKind::TwoMoons);
        }
        let args = s
            .strip_prefix("gaussian_blobs(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::invalid(format!("unknown synthetic kind {s:?}")))?;
        let nums: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad blob arguments {args:?}")))?;
        match nums.as_slice() {
            [c, p] if *c >= 1 && *p >= 1 => Ok(SynthKind::GaussianBlobs { classes: *c, dim: *p }),
            _ => Err(Error::invalid(format!("bad blob arguments {args:?}"))),
        }
    }
}

/// Seeded labeled point clouds in `[0, 1]^p`, shaped `[n, 1, 1, p]`.
///
/// Two moons are the usual interleaved half circles, mapped affinely into
/// the unit square after noise. Blob centers are drawn uniformly from
/// `[0.2, 0.8]^p`; sample `i` belongs to class `i mod c`. Values are
/// clamped to the unit box after noise.
pub fn synth_manifold(kind: SynthKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise {noise} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, rows, labels) = match kind {
        SynthKind::TwoMoons => {
            if n < 2 {
                return Err(Error::invalid("two moons need at least 2 points"));
            }
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            let upper = n.div_ceil(2);
            for i in 0..n {
                let (class, j, m) = if i < upper { (0, i, upper) } else { (1, i - upper, n - upper) };
                let t = std::f64::consts::PI * j as f64 / (m.max(2) - 1) as f64;
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                rows.push(((x + noise * zx + 1.5) / 4.0).clamp(0.0, 1.0));
                rows.push(((y + noise * zy + 1.0) / 2.5).clamp(0.0, 1.0));
                labels.push(class);
            }
            (2, rows, labels)
        }
        SynthKind::GaussianBlobs { classes, dim } => {
            if classes == 0 || dim == 0 || n < classes {
                return Err(Error::invalid(format!(
                    "{n} points cannot cover {classes} blobs in {dim} dimensions"
                )));
            }
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
                .collect();
            let mut rows = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                for &m in &centers[c] {
                    let z: f64 = rng.sample(StandardNormal);
                    rows.push((m + noise * z).clamp(0.0, 1.0));
                }
                labels.push(c);
            }
            (dim, rows, labels)
        }
    };
    let images = Tensor::new(vec![n, 1, 1, dim], rows)?;
    let mut ds = Dataset::new(images, labels, &kind.to_string())?;
    if let SynthKind::GaussianBlobs { classes, .. } = kind {
        ds.classes = classes;
    }
    Ok(ds)
}
