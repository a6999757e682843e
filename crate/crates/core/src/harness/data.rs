use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::numcore::{RealVector, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Split {
    pub inputs: Vec<RealVector>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(all: &Split, idx: &[usize]) -> Split {
        Split {
            inputs: idx.iter().map(|&i| all.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| all.labels[i]).collect(),
        }
    }
}

/// Labeled vectors with disjoint train / val / test splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    /// SHA-256 over shapes, values and labels of every split.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for split in [&self.train, &self.val, &self.test] {
            h.update((split.len() as u64).to_le_bytes());
            for (x, y) in split.inputs.iter().zip(&split.labels) {
                for v in x.iter() {
                    h.update(v.to_le_bytes());
                }
                h.update((*y as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Shuffles `all` and splits 80/10/10.
    fn from_shuffled(name: String, dim: usize, classes: usize, all: Split, rng: &mut Rng) -> Self {
        let n = all.len();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        Dataset {
            name,
            dim,
            classes,
            train: Split::select(&all, &idx[..n_train]),
            val: Split::select(&all, &idx[n_train..n_train + n_val]),
            test: Split::select(&all, &idx[n_train + n_val..]),
        }
    }
}

/// Gaussian clusters around random points on the unit sphere.
pub fn gen_blobs(rng: &mut Rng, classes: usize, per_class: usize, dim: usize, spread: f64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidParameter("blob counts must be >= 1".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!("spread must be >= 0, got {spread}")));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let c: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break c.into_iter().map(|v| v / norm).collect();
            }
        })
        .collect();
    let mut all = Split::default();
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x = center.iter().map(|c| c + spread * rng.gaussian()).collect();
            all.inputs.push(RealVector::new(x)?);
            all.labels.push(label);
        }
    }
    let name = format!("blobs(classes={classes},per_class={per_class},dim={dim},spread={spread})");
    Ok(Dataset::from_shuffled(name, dim, classes, all, rng))
}

/// Interleaved 2-D spiral arms, one per class.
pub fn gen_spirals(rng: &mut Rng, classes: usize, per_class: usize, noise: f64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::InvalidParameter("spiral counts must be >= 1".into()));
    }
    let mut all = Split::default();
    for label in 0..classes {
        let offset = label as f64 * std::f64::consts::TAU / classes as f64;
        for i in 0..per_class {
            let t = (i as f64 + 0.5) / per_class as f64;
            let angle = offset + 4.0 * t + noise * rng.gaussian();
            all.inputs.push(RealVector::new(vec![t * angle.cos(), t * angle.sin()])?);
            all.labels.push(label);
        }
    }
    let name = format!("spirals(classes={classes},per_class={per_class},noise={noise})");
    Ok(Dataset::from_shuffled(name, 2, classes, all, rng))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(path.to_path_buf()))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

/// Parses an IDX image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Split> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;

    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch { images: n_images, labels: n_labels });
    }
    let pixels = rows * cols;
    let body = images.get(16..16 + n_images * pixels).ok_or_else(|| Error::TruncatedFile(images_path.to_path_buf()))?;
    let label_body = labels.get(8..8 + n_labels).ok_or_else(|| Error::TruncatedFile(labels_path.to_path_buf()))?;

    let inputs = body
        .chunks_exact(pixels.max(1))
        .take(n_images)
        .map(|px| RealVector::from_raw(px.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect();
    let labels = label_body.iter().map(|&l| l as usize).collect();
    Ok(Split { inputs, labels })
}

pub const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// Standard MNIST directory: 60k train (last 5k held out for validation),
/// 10k test.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let mut train = load_mnist_idx(&p(MNIST_FILES[0]), &p(MNIST_FILES[1]))?;
    let test = load_mnist_idx(&p(MNIST_FILES[2]), &p(MNIST_FILES[3]))?;
    // Small fixture files hold out a tenth instead.
    let n_val = if train.len() > 10_000 { 5_000 } else { train.len() / 10 };
    let cut = train.len() - n_val;
    let val = Split { inputs: train.inputs.split_off(cut), labels: train.labels.split_off(cut) };
    let dim = train.inputs.first().map_or(0, |x| x.len());
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset { name: "mnist".into(), dim, classes, train, val, test })
}

/// Builds the dataset named by `cfg`; synthetic sets draw from `rng`.
pub fn load_dataset(cfg: &DatasetConfig, rng: &mut Rng) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Blobs { classes, per_class, dim, spread } => gen_blobs(rng, *classes, *per_class, *dim, *spread),
        DatasetConfig::Spirals { classes, per_class, noise } => gen_spirals(rng, *classes, *per_class, *noise),
        DatasetConfig::Mnist { dir } => load_mnist_dir(dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blob_split_sizes() {
        let d = gen_blobs(&mut Rng::seeded(1), 3, 100, 4, 0.2).unwrap();
        assert_eq!(d.split_sizes(), (240, 30, 30));
        let all: Vec<usize> = [&d.train, &d.val, &d.test].iter().flat_map(|s| s.labels.clone()).collect();
        for c in 0..3 {
            assert_eq!(all.iter().filter(|l| **l == c).count(), 100);
        }
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let d = gen_blobs(&mut Rng::seeded(2), 4, 10, 3, 0.0).unwrap();
        for (x, y) in d.train.inputs.iter().zip(&d.train.labels) {
            let twin = d.train.inputs.iter().zip(&d.train.labels).find(|(_, l)| *l == y).unwrap().0;
            assert_eq!(x, twin);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_blobs(&mut Rng::seeded(8), 3, 20, 5, 0.4).unwrap();
        let b = gen_blobs(&mut Rng::seeded(8), 3, 20, 5, 0.4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = gen_blobs(&mut Rng::seeded(9), 3, 20, 5, 0.4).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());

        let s = gen_spirals(&mut Rng::seeded(8), 3, 50, 0.1).unwrap();
        assert_eq!(s, gen_spirals(&mut Rng::seeded(8), 3, 50, 0.1).unwrap());
        assert_eq!(s.split_sizes(), (120, 15, 15));
    }

    fn write_idx(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend(n.to_be_bytes());
        b.extend(rows.to_be_bytes());
        b.extend(cols.to_be_bytes());
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn labels(values: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((values.len() as u32).to_be_bytes());
        b.extend(values);
        b
    }

    #[test]
    fn idx_parsing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_idx(dir.path(), "img", &images(3, 2, 2, 255));
        let lbl = write_idx(dir.path(), "lbl", &labels(&[7, 0, 9]));
        let split = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(split.len(), 3);
        assert_eq!(split.inputs[0].as_slice(), &[1.0; 4]);
        assert_eq!(split.labels, vec![7, 0, 9]);

        let mut bad = images(3, 2, 2, 0);
        bad[3] = 0x02;
        let bad = write_idx(dir.path(), "bad", &bad);
        assert!(matches!(load_mnist_idx(&bad, &lbl), Err(Error::BadMagic { found: 0x0802, .. })));

        let short = images(3, 2, 2, 0);
        let short = write_idx(dir.path(), "short", &short[..short.len() - 1]);
        assert!(matches!(load_mnist_idx(&short, &lbl), Err(Error::TruncatedFile(_))));

        let two = write_idx(dir.path(), "two", &labels(&[1, 2]));
        assert!(matches!(load_mnist_idx(&img, &two), Err(Error::CountMismatch { images: 3, labels: 2 })));

        assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lbl), Err(Error::Io { .. })));
    }

    #[test]
    fn mnist_dir_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), MNIST_FILES[0], &images(20, 28, 28, 10));
        write_idx(dir.path(), MNIST_FILES[1], &labels(&[3; 20]));
        write_idx(dir.path(), MNIST_FILES[2], &images(4, 28, 28, 10));
        write_idx(dir.path(), MNIST_FILES[3], &labels(&[1; 4]));
        let d = load_mnist_dir(dir.path()).unwrap();
        assert_eq!(d.dim, 784);
        assert_eq!(d.classes, 10);
        assert_eq!(d.train.len() + d.val.len(), 20);
        assert_eq!(d.test.len(), 4);
    }
}
