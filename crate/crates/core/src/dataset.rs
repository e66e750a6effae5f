//! Image/label datasets: IDX (MNIST, Fashion-MNIST) and manifest-driven
//! image directories, deterministic splits, and seeded minibatch streams.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, header promises {expected} bytes but file has {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below class count {classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("{path}: image is {actual:?} (h, w, c), expected {expected:?}")]
    ImageShape {
        path: PathBuf,
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("split sizes sum to {requested} but dataset has {available} examples")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("dataset is empty")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Images `[n, H, W, C]` with pixels in `[0, 1]` and 0-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, DatasetError> {
        if images.rank() != 4 {
            return Err(DatasetError::ImageShape {
                path: PathBuf::new(),
                expected: [0, 0, 0],
                actual: [images.rank(), 0, 0],
            });
        }
        if images.dim(0) != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.dim(0),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(DatasetError::LabelOutOfRange {
                index,
                label,
                classes: n_classes,
            });
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]` of a single example.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n` examples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }

    /// Overrides the class count, e.g. when a small subset does not contain
    /// the highest label.
    pub fn with_classes(mut self, n_classes: usize) -> Result<Self, DatasetError> {
        if let Some((index, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(DatasetError::LabelOutOfRange {
                index,
                label,
                classes: n_classes,
            });
        }
        self.n_classes = n_classes;
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<(), DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found = read_u32_be(bytes, 0);
    if found != magic {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor, DatasetError> {
    check_header(path, bytes, IDX_IMAGE_MAGIC, 16)?;
    let n = read_u32_be(bytes, 4) as usize;
    let rows = read_u32_be(bytes, 8) as usize;
    let cols = read_u32_be(bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, rows, cols, 1], data).expect("length checked against header"))
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, DatasetError> {
    check_header(path, bytes, IDX_LABEL_MAGIC, 8)?;
    let n = read_u32_be(bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image file (magic `0x00000803`) and its label file
/// (magic `0x00000801`). Pixels are scaled by `1/255`; the class count is
/// inferred as `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DatasetError> {
    let image_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let label_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;
    let images = parse_idx_images(images_path, &image_bytes)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if images.dim(0) != labels.len() {
        return Err(DatasetError::CountMismatch {
            images: images.dim(0),
            labels: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, images, labels, n_classes)
}

/// Writes a single-channel dataset as an IDX image/label pair. Pixels are
/// quantized to `round(v * 255)`.
pub fn write_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DatasetError> {
    let [h, w, c] = d.image_shape();
    if c != 1 {
        return Err(DatasetError::ImageShape {
            path: images_path.to_path_buf(),
            expected: [h, w, 1],
            actual: [h, w, c],
        });
    }
    let mut img = Vec::with_capacity(16 + d.images.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for dim in [d.len(), h, w] {
        img.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    img.extend(
        d.images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images_path, img).map_err(io_err(images_path))?;

    let mut lab = Vec::with_capacity(8 + d.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(d.len() as u32).to_be_bytes());
    lab.extend(d.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lab).map_err(io_err(labels_path))
}

/// Canonical MNIST / Fashion-MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Official MNIST layout split into (train, validation, test).
///
/// The 60k training file is shuffled with seed 0; the first
/// `60000 - validation` examples train and the rest validate.
pub fn load_mnist_splits(dir: &Path, validation: usize) -> Result<(Dataset, Dataset, Dataset), DatasetError> {
    let (ti, tl) = mnist_paths(dir, true);
    let full = load_idx(&ti, &tl)?.with_classes(10)?;
    let (ei, el) = mnist_paths(dir, false);
    let test = load_idx(&ei, &el)?.with_classes(10)?;
    let n_train = full.len().checked_sub(validation).ok_or(DatasetError::SplitTooLarge {
        requested: validation,
        available: full.len(),
    })?;
    let mut parts = split(&full, &[n_train, validation], 0)?;
    let val = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, val, test))
}

// ---------------------------------------------------------------------------
// Image directories
// ---------------------------------------------------------------------------

/// Decodes one 8-bit image into `[H, W, channels]` values in `[0, 1]`.
pub fn load_image_file(path: &Path, channels: usize) -> Result<Tensor, DatasetError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DatasetError::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = if channels == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    };
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h, w, channels], data).expect("decoder returned h*w*c bytes"))
}

/// Loads images listed in a `relative_path,label_index` manifest.
///
/// `expected` is the `[H, W, C]` every image must have; `None` accepts the
/// first image's size (decoded as RGB) and requires the rest to match.
/// Blank lines, `#` comments and a `path,label` header are skipped.
pub fn load_image_dir(root: &Path, manifest: &Path, expected: Option<[usize; 3]>) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let channels = expected.map_or(3, |e| e[2]);
    let mut shape = expected;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line == "path,label") {
            continue;
        }
        let bad = |message: String| DatasetError::Manifest {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (rel, label) = line
            .rsplit_once(',')
            .ok_or_else(|| bad("expected `path,label`".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| bad(format!("label `{}` is not a non-negative integer", label.trim())))?;
        let path = root.join(rel.trim());
        let img = load_image_file(&path, channels)?;
        let actual = [img.dim(0), img.dim(1), img.dim(2)];
        match shape {
            Some(want) if want != actual => {
                return Err(DatasetError::ImageShape {
                    path,
                    expected: want,
                    actual,
                })
            }
            Some(_) => {}
            None => shape = Some(actual),
        }
        pixels.extend(img.into_data());
        labels.push(label);
    }
    let [h, w, c] = shape.ok_or(DatasetError::Empty)?;
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let images = Tensor::new(vec![labels.len(), h, w, c], pixels).expect("every image checked");
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, images, labels, n_classes)
}

// ---------------------------------------------------------------------------
// Splits and batches
// ---------------------------------------------------------------------------

fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Disjoint subsets of the given sizes, drawn from a seed-determined
/// permutation of `d`.
pub fn split(d: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>, DatasetError> {
    let requested: usize = sizes.iter().sum();
    if requested > d.len() {
        return Err(DatasetError::SplitTooLarge {
            requested,
            available: d.len(),
        });
    }
    let perm = permutation(d.len(), seed, u64::MAX);
    let mut start = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let part = d.subset(&perm[start..start + size], format!("{}[{k}]", d.name));
            start += size;
            part
        })
        .collect())
}

/// A minibatch drawn from a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Epoch-wise shuffled batches. The permutation of epoch `e` is a pure
/// function of `(seed, e)`; the last short batch of each epoch is kept.
#[derive(Debug, Clone)]
pub struct BatchStream {
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    n: usize,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self::resume(n, batch_size, seed, 0, 0)
    }

    /// Stream positioned at batch `batch_in_epoch` of `epoch`.
    pub fn resume(n: usize, batch_size: usize, seed: u64, epoch: u64, batch_in_epoch: usize) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        Self {
            batch_size,
            seed,
            epoch,
            cursor: (batch_in_epoch * batch_size).min(n),
            n,
            order: permutation(n, seed, epoch),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.cursor = 0;
            self.order = permutation(self.n, self.seed, self.epoch);
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }

    pub fn next_batch(&mut self, d: &Dataset) -> Batch {
        let indices = self.next_indices();
        Batch {
            images: d.images.select_rows(&indices),
            labels: indices.iter().map(|&i| d.labels[i]).collect(),
            indices,
        }
    }
}
