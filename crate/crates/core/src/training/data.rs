use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{tag, SeededRng};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "LQSGD_DATA_DIR";

pub const MNIST_TRAIN_CAP: usize = 2000;
pub const MNIST_TEST_CAP: usize = 500;

/// Samples as rows of `x`. `y` holds class labels; tasks without labels
/// (the quadratic) leave it all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::Data(format!("{} labels for {} samples", y.len(), x.rows())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range")));
            }
            data.extend_from_slice(self.x.row(i));
        }
        Ok(Dataset {
            x: Matrix::new(idx.len(), d, data)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian clusters around random centres.
    Blobs {
        #[serde(default = "default_blob_train")]
        train: usize,
        #[serde(default = "default_blob_test")]
        test: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_blob_classes")]
        classes: usize,
        /// Standard deviation of the centres.
        #[serde(default = "default_separation")]
        separation: f64,
        /// Standard deviation of samples around their centre.
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// MNIST from IDX files, subsampled. `dir` falls back to `LQSGD_DATA_DIR`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_mnist_train")]
        train: usize,
        #[serde(default = "default_mnist_test")]
        test: usize,
    },
}

fn default_blob_train() -> usize {
    2000
}
fn default_blob_test() -> usize {
    500
}
fn default_blob_dim() -> usize {
    32
}
fn default_blob_classes() -> usize {
    10
}
fn default_separation() -> f64 {
    1.0
}
fn default_spread() -> f64 {
    1.0
}
fn default_mnist_train() -> usize {
    MNIST_TRAIN_CAP
}
fn default_mnist_test() -> usize {
    MNIST_TEST_CAP
}

impl DatasetSpec {
    pub fn blobs(classes: usize, dim: usize) -> Self {
        DatasetSpec::Blobs {
            train: default_blob_train(),
            test: default_blob_test(),
            dim,
            classes,
            separation: default_separation(),
            spread: default_spread(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs { classes, .. } => *classes,
            DatasetSpec::Mnist { .. } => 10,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Blobs { dim, .. } => *dim,
            DatasetSpec::Mnist { .. } => 28 * 28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Blobs { train, test, dim, classes, separation, spread } => {
                if *train == 0 || *test == 0 || *dim == 0 {
                    return Err(Error::Config("blobs need positive train, test and dim".into()));
                }
                if *classes < 2 {
                    return Err(Error::Config("blobs need at least 2 classes".into()));
                }
                if !(separation.is_finite() && *separation >= 0.0 && spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::Config("blob separation and spread must be finite and >= 0".into()));
                }
            }
            DatasetSpec::Mnist { train, test, .. } => {
                if *train == 0 || *train > MNIST_TRAIN_CAP || *test == 0 || *test > MNIST_TEST_CAP {
                    return Err(Error::Config(format!(
                        "mnist subsample must be 1..={MNIST_TRAIN_CAP} train and 1..={MNIST_TEST_CAP} test"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self, seed: u64) -> Result<Split> {
        self.validate()?;
        match self {
            DatasetSpec::Blobs { train, test, dim, classes, separation, spread } => {
                Ok(blobs(*train, *test, *dim, *classes, *separation, *spread, seed))
            }
            DatasetSpec::Mnist { dir, train, test } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                        Error::Config(format!("mnist needs a dataset dir or {DATA_DIR_ENV}"))
                    })?,
                };
                load_mnist(&dir, *train, *test, seed)
            }
        }
    }
}

/// Balanced classes (label `i % classes` before shuffling); test samples share
/// the training centres.
pub fn blobs(
    train: usize,
    test: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> Split {
    let mut rng = SeededRng::derived(seed, 0, tag::DATA);
    let centres: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| separation * rng.normal()).collect()).collect();
    let mut draw = |n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(n * dim);
        for &c in &labels {
            for k in 0..dim {
                data.push(centres[c][k] + spread * rng.normal());
            }
        }
        Dataset { x: Matrix::new(n, dim, data).expect("positive dims"), y: labels, classes }
    };
    let train = draw(train);
    let test = draw(test);
    Split { train, test }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX file of unsigned bytes. Returns the dimensions and the data.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("not an IDX file".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        dims.push(read_be_u32(bytes, 4 + 4 * k)? as usize);
    }
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() != count {
        return Err(Error::Format(format!("IDX body has {} bytes, header says {count}", body.len())));
    }
    Ok((dims, body.to_vec()))
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_idx(&bytes)
}

fn idx_dataset(images: &Path, labels: &Path, keep: usize, seed: u64, id: u64) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images)?;
    let (ldims, lab) = read_idx(labels)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Format(format!("mismatched IDX pair {idims:?} / {ldims:?}")));
    }
    let (n, d) = (idims[0], idims[1] * idims[2]);
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derived(seed, id, tag::DATA).shuffle(&mut order);
    order.truncate(keep.min(n));
    order.sort_unstable();
    let mut data = Vec::with_capacity(order.len() * d);
    for &i in &order {
        data.extend(pixels[i * d..(i + 1) * d].iter().map(|&p| p as f64 / 255.0));
    }
    let y = order.iter().map(|&i| lab[i] as usize).collect();
    Dataset::new(Matrix::new(order.len(), d, data)?, y, 10)
}

/// Expects the four uncompressed files under their usual names.
pub fn load_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> Result<Split> {
    Ok(Split {
        train: idx_dataset(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
            train,
            seed,
            1,
        )?,
        test: idx_dataset(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"), test, seed, 2)?,
    })
}

/// Disjoint shards covering `0..n`, sizes differing by at most one.
pub fn shard(n: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 || n < workers {
        return Err(Error::Config(format!("cannot split {n} samples across {workers} workers")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derived(seed, 0, tag::SHARD).shuffle(&mut order);
    let (base, extra) = (n / workers, n % workers);
    let mut out = Vec::with_capacity(workers);
    let mut at = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        out.push(order[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_are_disjoint_and_cover() {
        let s = shard(103, 4, 9).unwrap();
        let mut all: Vec<usize> = s.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![26, 26, 26, 25]);
        assert_eq!(s, shard(103, 4, 9).unwrap());
        assert_ne!(s, shard(103, 4, 10).unwrap());
        assert!(shard(3, 4, 0).is_err());
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = blobs(100, 20, 5, 10, 1.0, 0.5, 3);
        assert_eq!(a, blobs(100, 20, 5, 10, 1.0, 0.5, 3));
        for c in 0..10 {
            assert_eq!(a.train.y.iter().filter(|&&y| y == c).count(), 10);
        }
        assert_eq!(a.test.dim(), 5);
    }

    #[test]
    fn idx_round_trip() {
        let mut bytes = vec![0, 0, 8, 3];
        for d in [2u32, 2, 3] {
            bytes.extend(d.to_be_bytes());
        }
        bytes.extend(0u8..12);
        let (dims, body) = parse_idx(&bytes).unwrap();
        assert_eq!(dims, vec![2, 2, 3]);
        assert_eq!(body.len(), 12);
        assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        bytes[2] = 0x0d;
        assert!(parse_idx(&bytes).is_err());
    }
}
