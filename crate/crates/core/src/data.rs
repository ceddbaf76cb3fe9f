//! MNIST ingestion from IDX files, splitting, augmentation, and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::paths::IMAGE_SIDE;
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Zero border added on each side before a random crop.
pub const AUGMENT_PAD: usize = 2;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Images scaled to [0, 1] with one label in 0..=9 each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(n, 1, 28, 28)`
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// SHA-256 of each source file, hex encoded.
    pub provenance: Vec<String>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self, field: &str) -> Result<u32> {
        let raw = self.take(4, field)?;
        Ok(u32::from_be_bytes(raw.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn expect_magic(cur: &mut Cursor, expected: u32) -> Result<()> {
    let magic = cur.u32("magic")?;
    if magic != expected {
        return Err(Error::format(
            "magic",
            format!("expected {expected:#010x}, found {magic:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image container into `(n, 1, 28, 28)` values in [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    expect_magic(&mut cur, IMAGES_MAGIC)?;
    let n = cur.u32("count")? as usize;
    for field in ["rows", "cols"] {
        let extent = cur.u32(field)? as usize;
        if extent != IMAGE_SIDE {
            return Err(Error::format(field, format!("expected {IMAGE_SIDE}, found {extent}")));
        }
    }
    let raw = cur.take(n * PIXELS, "pixels")?;
    let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor { bytes, pos: 0 };
    expect_magic(&mut cur, LABELS_MAGIC)?;
    let n = cur.u32("count")? as usize;
    let raw = cur.take(n, "labels")?;
    raw.iter()
        .enumerate()
        .map(|(i, &b)| {
            if b > 9 {
                Err(Error::format(format!("label[{i}]"), format!("value {b} is not a digit")))
            } else {
                Ok(usize::from(b))
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_idx_images(&read(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_idx_labels(&read(path.as_ref())?)
}

/// IDX image container for `n` images of `rows × cols` bytes.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
            return Err(Error::shape(format!("dataset images must be (n, 1, 28, 28), got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::format(
                "labels",
                format!("{} images but {} labels", s[0], labels.len()),
            ));
        }
        Ok(Self {
            images,
            labels,
            provenance: Vec::new(),
        })
    }

    /// Loads an image/label file pair.
    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let (images, labels) = (images.as_ref(), labels.as_ref());
        let image_bytes = read(images)?;
        let label_bytes = read(labels)?;
        let mut ds = Self::new(parse_idx_images(&image_bytes)?, parse_idx_labels(&label_bytes)?)
            .map_err(|e| match e {
                Error::Format { field, message } => Error::Format {
                    field: format!("{} / {}: {field}", images.display(), labels.display()),
                    message,
                },
                other => other,
            })?;
        ds.provenance = vec![digest(&image_bytes), digest(&label_bytes)];
        Ok(ds)
    }

    /// The standard training files under `dir`.
    pub fn load_mnist_train(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))
    }

    pub fn load_mnist_test(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        })
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Samples `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start.min(self.len())..end.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * PIXELS..(i + 1) * PIXELS]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Index permutation behind [`split`]: `(train, validation)`.
pub fn split_indices(n: usize, cfg: &SplitConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(cfg.seed, "split", 0));
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Seeded permutation, first 90% train and last 10% validation.
pub fn split(dataset: &Dataset, cfg: &SplitConfig) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), cfg);
    Ok((dataset.subset(&train)?, dataset.subset(&val)?))
}

/// Zero-pads a 28×28 image by 2 and crops the 28×28 window at offset
/// `(dy, dx)`, each in `0..=4`. `(2, 2)` is the identity.
pub fn shift_crop(image: &[f64], dy: usize, dx: usize) -> Vec<f64> {
    debug_assert!(dy <= 2 * AUGMENT_PAD && dx <= 2 * AUGMENT_PAD);
    let mut out = vec![0.0; PIXELS];
    for y in 0..IMAGE_SIDE {
        let sy = y as isize + dy as isize - AUGMENT_PAD as isize;
        if !(0..IMAGE_SIDE as isize).contains(&sy) {
            continue;
        }
        for x in 0..IMAGE_SIDE {
            let sx = x as isize + dx as isize - AUGMENT_PAD as isize;
            if (0..IMAGE_SIDE as isize).contains(&sx) {
                out[y * IMAGE_SIDE + x] = image[sy as usize * IMAGE_SIDE + sx as usize];
            }
        }
    }
    out
}

/// Pad-and-random-crop augmentation of one 28×28 image.
pub fn augment(image: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
    let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
    shift_crop(image, dy, dx)
}

/// Shuffled minibatch index lists for one epoch; the last may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "shuffle", epoch));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over `(images, labels)` minibatches of one epoch.
pub fn batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + 'a> {
    let plan = batch_indices(dataset.len(), batch_size, shuffle_seed, epoch)?;
    Ok(plan.into_iter().map(move |idx| {
        let images = dataset.images.gather_batch(&idx).expect("indices in range");
        let labels = idx.iter().map(|&i| dataset.labels[i]).collect();
        (images, labels)
    }))
}
