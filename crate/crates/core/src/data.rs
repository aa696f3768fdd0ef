//! Dataset ingestion: CIFAR-10 binary batches, MNIST IDX files, and synthetic
//! generators for CI-speed tests. Ingestion is byte-exact per the published
//! layouts; pixel values are scaled to [0, 1].

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One split of labeled images.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New split containing the given examples, in order.
    pub fn select(&self, indices: &[usize]) -> DataSplit {
        let [_, c, h, w] = self.images.shape();
        let mut images = Tensor::zeros([indices.len(), c, h, w]);
        let mut labels = Vec::with_capacity(indices.len());
        for (o, &i) in indices.iter().enumerate() {
            for ci in 0..c {
                images.plane_mut(o, ci).copy_from_slice(self.images.plane(i, ci));
            }
            labels.push(self.labels[i]);
        }
        DataSplit { images, labels }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DataSplit,
    pub val: DataSplit,
    pub test: DataSplit,
    pub num_classes: usize,
}

/// Per-channel normalization statistics, computed on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(split: &DataSplit) -> ChannelStats {
    let [n, c, h, w] = split.images.shape();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..n {
            s += split.images.plane(bi, ci).iter().sum::<f64>();
        }
        mean[ci] = s / count;
        let mut sq = 0.0;
        for bi in 0..n {
            for &v in split.images.plane(bi, ci) {
                let d = v - mean[ci];
                sq += d * d;
            }
        }
        std[ci] = (sq / count).sqrt().max(1e-8);
    }
    ChannelStats { mean, std }
}

/// (x - mean_c) / std_c per channel.
pub fn normalize(images: &Tensor, stats: &ChannelStats) -> Tensor {
    let [n, c, h, w] = images.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for bi in 0..n {
        for ci in 0..c {
            let (m, inv) = (stats.mean[ci], 1.0 / stats.std[ci]);
            for (o, &v) in out.plane_mut(bi, ci).iter_mut().zip(images.plane(bi, ci)) {
                *o = (v - m) * inv;
            }
        }
    }
    out
}

/// Deterministic split of `n` indices into (train, val) under a seed.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.shuffle(&mut idx);
    let val_n = ((n as f64) * val_fraction).round() as usize;
    let val = idx[..val_n].to_vec();
    let train = idx[val_n..].to_vec();
    (train, val)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

/// Bytes per CIFAR-10 record: 1 label byte + 3 channel planes of 1024 bytes.
pub const CIFAR10_RECORD_BYTES: usize = 3073;

/// Parses one CIFAR-10 binary batch file: each record is a label byte
/// followed by channel-major R/G/B planes.
pub fn read_cifar10_batch(path: &Path) -> Result<DataSplit> {
    let mut file = File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::format(format!(
            "{}: {} bytes is not a whole number of {CIFAR10_RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut images = Tensor::zeros([n, 3, 32, 32]);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR10_RECORD_BYTES..(r + 1) * CIFAR10_RECORD_BYTES];
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::format(format!(
                "{}: record {r} has label byte {label} >= 10",
                path.display()
            )));
        }
        labels.push(label);
        for ci in 0..3 {
            let plane = images.plane_mut(r, ci);
            for (p, &b) in plane.iter_mut().zip(&rec[1 + ci * 1024..1 + (ci + 1) * 1024]) {
                *p = b as f64 / 255.0;
            }
        }
    }
    Ok(DataSplit { images, labels })
}

fn concat_splits(splits: Vec<DataSplit>) -> Result<DataSplit> {
    let total: usize = splits.iter().map(|s| s.len()).sum();
    let [_, c, h, w] = splits[0].images.shape();
    let mut images = Tensor::zeros([total, c, h, w]);
    let mut labels = Vec::with_capacity(total);
    let mut o = 0;
    for s in &splits {
        for i in 0..s.len() {
            for ci in 0..c {
                images.plane_mut(o, ci).copy_from_slice(s.images.plane(i, ci));
            }
            labels.push(s.labels[i]);
            o += 1;
        }
    }
    Ok(DataSplit { images, labels })
}

/// Loads the CIFAR-10 binary batches from a directory holding
/// `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`, scales
/// pixels to [0, 1], and splits the training records into train/validation
/// deterministically under the seed.
pub fn load_cifar10(dir: &Path, seed: u64, val_fraction: f64) -> Result<Dataset> {
    let mut batches = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        if path.exists() {
            batches.push(read_cifar10_batch(&path)?);
        }
    }
    if batches.is_empty() {
        return Err(Error::format(format!(
            "no data_batch_*.bin files under {}",
            dir.display()
        )));
    }
    let all = concat_splits(batches)?;
    let test = read_cifar10_batch(&dir.join("test_batch.bin"))?;
    let (train_idx, val_idx) = split_indices(all.len(), val_fraction, seed);
    Ok(Dataset {
        train: all.select(&train_idx),
        val: all.select(&val_idx),
        test,
        num_classes: 10,
    })
}

// ---------------------------------------------------------------------------
// MNIST IDX format
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(Error::format(format!(
            "{}: truncated at byte offset {offset}",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn read_idx_images(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {magic:#010x} at offset 0 (want {IDX_IMAGES_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let h = read_u32_be(&bytes, 8, path)? as usize;
    let w = read_u32_be(&bytes, 12, path)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::format(format!(
            "{}: {} bytes but header promises {need}",
            path.display(),
            bytes.len()
        )));
    }
    let mut images = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let rec = &bytes[16 + i * h * w..16 + (i + 1) * h * w];
        for (p, &b) in images.plane_mut(i, 0).iter_mut().zip(rec) {
            *p = b as f64 / 255.0;
        }
    }
    Ok(images)
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {magic:#010x} at offset 0 (want {IDX_LABELS_MAGIC:#010x})",
            path.display()
        )));
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(format!(
            "{}: {} bytes but header promises {}",
            path.display(),
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads MNIST from decompressed IDX files (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`).
pub fn load_mnist_idx(dir: &Path, seed: u64, val_fraction: f64) -> Result<Dataset> {
    let images = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let labels = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    if images.batch() != labels.len() {
        return Err(Error::format(format!(
            "image count {} does not match label count {}",
            images.batch(),
            labels.len()
        )));
    }
    let all = DataSplit { images, labels };
    let test_images = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if test_images.batch() != test_labels.len() {
        return Err(Error::format(format!(
            "test image count {} does not match label count {}",
            test_images.batch(),
            test_labels.len()
        )));
    }
    let (train_idx, val_idx) = split_indices(all.len(), val_fraction, seed);
    Ok(Dataset {
        train: all.select(&train_idx),
        val: all.select(&val_idx),
        test: DataSplit {
            images: test_images,
            labels: test_labels,
        },
        num_classes: 10,
    })
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Two well-separated Gaussian bumps; linearly separable by construction.
    Blobs,
    /// Half-plane sign patterns with XOR labels; not linearly separable.
    Xor,
    /// Filled disk versus annulus.
    Rings,
}

impl SynthKind {
    pub fn parse(name: &str) -> Result<SynthKind> {
        match name {
            "blobs" => Ok(SynthKind::Blobs),
            "xor" => Ok(SynthKind::Xor),
            "rings" => Ok(SynthKind::Rings),
            _ => Err(Error::invalid(format!(
                "unknown synthetic dataset '{name}' (expected blobs|xor|rings)"
            ))),
        }
    }
}

pub const SYNTH_SIZE: usize = 8;

fn synth_image(kind: SynthKind, class: usize, rng: &mut Rng) -> Tensor {
    let s = SYNTH_SIZE;
    let mut img = Tensor::zeros([1, 1, s, s]);
    match kind {
        SynthKind::Blobs => {
            let (cy, cx) = if class == 0 { (2.0, 2.0) } else { (5.0, 5.0) };
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = (-d2 / 2.0).exp() + 0.05 * rng.normal();
                    img.set(0, 0, y, x, v);
                }
            }
        }
        SynthKind::Xor => {
            let a = if rng.coin() { 1.0 } else { -1.0 };
            let b = if class == 0 { a } else { -a };
            for y in 0..s {
                for x in 0..s {
                    let base = if x < s / 2 { a } else { b };
                    img.set(0, 0, y, x, 0.5 * base + 0.05 * rng.normal());
                }
            }
        }
        SynthKind::Rings => {
            let c = (s as f64 - 1.0) / 2.0;
            for y in 0..s {
                for x in 0..s {
                    let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                    let inside = if class == 0 {
                        r < 1.8
                    } else {
                        (2.2..3.6).contains(&r)
                    };
                    let v = if inside { 1.0 } else { 0.0 };
                    img.set(0, 0, y, x, v + 0.05 * rng.normal());
                }
            }
        }
    }
    img
}

fn synth_split(kind: SynthKind, per_class: usize, rng: &mut Rng) -> DataSplit {
    let n = 2 * per_class;
    let s = SYNTH_SIZE;
    let mut images = Tensor::zeros([n, 1, s, s]);
    let mut labels = vec![0usize; n];
    // Alternate classes, then shuffle example order.
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for (slot, &i) in order.iter().enumerate() {
        let class = i % 2;
        let img = synth_image(kind, class, rng);
        images.plane_mut(slot, 0).copy_from_slice(img.plane(0, 0));
        labels[slot] = class;
    }
    DataSplit { images, labels }
}

/// Deterministic small image-shaped two-class datasets with known structure.
/// `per_class` examples of each class in the training split; validation and
/// test splits hold a fifth of that (at least two per class).
pub fn synth_dataset(kind: SynthKind, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class < 2 {
        return Err(Error::invalid("need at least 2 examples per class"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let holdout = (per_class / 5).max(2);
    let train = synth_split(kind, per_class, &mut rng);
    let val = synth_split(kind, holdout, &mut rng);
    let test = synth_split(kind, holdout, &mut rng);
    Ok(Dataset {
        train,
        val,
        test,
        num_classes: 2,
    })
}
