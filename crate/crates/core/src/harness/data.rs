//! Classification datasets: MNIST IDX files and synthetic Gaussian blobs.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "MCNC_DATA_DIR";

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × F`, features in `[0, 1]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} inputs but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside {n_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let f = self.n_features();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), f], data)?, labels))
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Config("empty subset".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.batch(&idx)?;
        Dataset::new(inputs, labels, self.n_classes, self.split)
    }
}

/// Train and test halves of one task.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            message: format!("{}: truncated IDX header", path.display()),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file and its label file.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let img = read_file(ipath)?;
    let lab = read_file(lpath)?;

    let magic = read_u32(&img, 0, ipath)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
                ipath.display()
            ),
        });
    }
    let n = read_u32(&img, 4, ipath)? as usize;
    let rows = read_u32(&img, 8, ipath)? as usize;
    let cols = read_u32(&img, 12, ipath)? as usize;
    let f = rows * cols;
    if n == 0 || f == 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("{}: empty image set {n}×{rows}×{cols}", ipath.display()),
        });
    }
    let pixels = img.get(16..16 + n * f).ok_or_else(|| Error::Format {
        offset: img.len(),
        message: format!("{}: expected {} pixel bytes after offset 16", ipath.display(), n * f),
    })?;

    let magic = read_u32(&lab, 0, lpath)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
                lpath.display()
            ),
        });
    }
    let n_labels = read_u32(&lab, 4, lpath)? as usize;
    if n_labels != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} has {n_labels} labels for {n} images", lpath.display()),
        });
    }
    let raw_labels = lab.get(8..8 + n).ok_or_else(|| Error::Format {
        offset: lab.len(),
        message: format!("{}: expected {n} label bytes after offset 8", lpath.display()),
    })?;

    let inputs = Tensor::new(vec![n, f], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(inputs, labels, n_classes, split)
}

fn find_file(dir: &Path, stems: &[&str]) -> Option<PathBuf> {
    stems
        .iter()
        .flat_map(|s| [dir.join(s), dir.join(s.replace("-idx", ".idx"))])
        .find(|p| p.is_file())
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<DataSplits> {
    let dir = dir.as_ref();
    let locate = |stem: &str| {
        find_file(dir, &[stem]).ok_or_else(|| Error::Data(format!("{} not found in {}", stem, dir.display())))
    };
    Ok(DataSplits {
        train: load_mnist_idx(
            locate("train-images-idx3-ubyte")?,
            locate("train-labels-idx1-ubyte")?,
            Split::Train,
        )?,
        test: load_mnist_idx(
            locate("t10k-images-idx3-ubyte")?,
            locate("t10k-labels-idx1-ubyte")?,
            Split::Test,
        )?,
    })
}

/// The MNIST directory named by `MCNC_DATA_DIR`, checking both the
/// directory itself and an `mnist/` subdirectory.
pub fn mnist_dir_from_env() -> Option<PathBuf> {
    let root = PathBuf::from(env::var_os(DATA_DIR_ENV)?);
    [root.join("mnist"), root]
        .into_iter()
        .find(|d| find_file(d, &["train-images-idx3-ubyte"]).is_some())
}

/// Gaussian blobs, one per class, centred at `3·e_c` (the `c`-th axis)
/// with standard deviation 0.5, then mapped by `x ↦ x/3` and clamped to
/// `[0, 1]`, which leaves most features at or near zero as in MNIST.
/// Neighbouring means are `3√2` apart, about 8.5 deviations.
pub fn make_synthetic(n: usize, d_in: usize, n_classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n ≥ 1".into()));
    }
    if n_classes == 0 || n_classes > d_in {
        return Err(Error::Config(format!(
            "need 1 ≤ n_classes ≤ d_in, got {n_classes} classes in {d_in} dims"
        )));
    }
    let mut rng = Rng::from_seed(seed);
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        for j in 0..d_in {
            let mean = if j == c { 3.0 } else { 0.0 };
            let x = mean + 0.5 * rng.normal();
            data.push((x / 3.0).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, d_in], data)?, labels, n_classes, split)
}

/// Train and test sets drawn from the same blobs with different seeds.
pub fn synthetic_splits(n_train: usize, n_test: usize, d_in: usize, n_classes: usize, seed: u64) -> Result<DataSplits> {
    let mut s = crate::rng::SplitMix64::new(seed);
    Ok(DataSplits {
        train: make_synthetic(n_train, d_in, n_classes, s.next_u64(), Split::Train)?,
        test: make_synthetic(n_test, d_in, n_classes, s.next_u64(), Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(dir: &Path, images: &[u8], n: u32, labels: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut ib = Vec::new();
        for v in [IMAGES_MAGIC, n, 2, 2] {
            ib.extend_from_slice(&v.to_be_bytes());
        }
        ib.extend_from_slice(images);
        let mut lb = Vec::new();
        for v in [LABELS_MAGIC, labels.len() as u32] {
            lb.extend_from_slice(&v.to_be_bytes());
        }
        lb.extend_from_slice(labels);
        fs::write(&ip, ib).unwrap();
        fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_tiny_idx() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[0, 255, 51, 0, 255, 255, 0, 0], 2, &[3, 7]);
        let ds = load_mnist_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 4]);
        assert_eq!(ds.inputs.data()[1], 1.0);
        assert_eq!(ds.inputs.data()[2], 0.2);
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[0, 255, 51], 2, &[3, 7]);
        assert!(matches!(
            load_mnist_idx(&ip, &lp, Split::Test),
            Err(Error::Format { .. })
        ));
        let (ip, lp) = write_idx(dir.path(), &[0; 8], 2, &[3]);
        assert!(matches!(
            load_mnist_idx(&ip, &lp, Split::Test),
            Err(Error::Format { offset: 4, .. })
        ));
        // Swapped files fail on the magic number.
        let (ip, lp) = write_idx(dir.path(), &[0; 8], 2, &[1, 2]);
        assert!(matches!(
            load_mnist_idx(&lp, &ip, Split::Test),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn two_blobs_are_linearly_separable() {
        use crate::harness::{train, MlpSpec, TrainConfig};
        let ds = make_synthetic(400, 2, 2, 3, Split::Train).unwrap();
        // Oracle: the plane x₀ = x₁ separates the blobs with margin 3/√2 in
        // raw units, i.e. 4.2 deviations, so almost every point is on its side.
        // Clamping keeps the order of the two coordinates except at ties.
        let by_plane = (0..ds.len())
            .filter(|&i| (ds.inputs.row(i)[1] > ds.inputs.row(i)[0]) as usize == ds.labels[i])
            .count();
        assert!(by_plane as f64 / ds.len() as f64 >= 0.99);
        let splits = DataSplits {
            train: ds.clone(),
            test: ds,
        };
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 40,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let r = train(&MlpSpec::new(vec![2, 2]).unwrap(), None, &splits, &cfg).unwrap();
        assert!(r.test_accuracy >= 0.99, "{}", r.test_accuracy);
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = make_synthetic(50, 4, 3, 9, Split::Train).unwrap();
        assert_eq!(a, make_synthetic(50, 4, 3, 9, Split::Train).unwrap());
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            make_synthetic(0, 4, 3, 9, Split::Train),
            Err(Error::Config(_))
        ));
        assert!(make_synthetic(5, 2, 3, 9, Split::Train).is_err());
    }
}
