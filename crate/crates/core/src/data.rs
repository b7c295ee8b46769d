//! Dataset loaders for MNIST IDX and CIFAR-10 binary batches, plus
//! shift/rotation augmentation.
//!
//! Both loaders accept plain or gzip-compressed files; compression is
//! detected from the leading `1f 8b` bytes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Samples, Tensor};
use crate::sensor::Image;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const MNIST_IMAGE_MAGIC: u32 = 2051;
pub const MNIST_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Grayscale weights applied to (R, G, B).
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    /// Checks equal lengths, label range and a common image size.
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch { images: images.len(), labels: labels.len() });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!("label {l} out of range for {n_classes} classes")));
        }
        if let Some(first) = images.first() {
            let (h, w) = (first.height(), first.width());
            if images.iter().any(|i| i.height() != h || i.width() != w) {
                return Err(DataError::Invalid("images differ in size".into()));
            }
        }
        Ok(Self { images, labels, n_classes, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width)` of the images, or `(0, 0)` when empty.
    pub fn image_size(&self) -> (usize, usize) {
        self.images.first().map_or((0, 0), |i| (i.height(), i.width()))
    }

    /// The first `n` samples.
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
            name: self.name.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            name: self.name.clone(),
        }
    }

    /// Shuffles with `seed` and splits off the leading `fraction` as the
    /// first part.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        (self.select(&order[..cut]), self.select(&order[cut..]))
    }

    /// Network input `[N, 1, H, W]` with labels.
    pub fn to_samples(&self) -> Samples {
        let (h, w) = self.image_size();
        let mut data = Vec::with_capacity(self.len() * h * w);
        for img in &self.images {
            data.extend_from_slice(img.values());
        }
        let inputs = Tensor::new(vec![self.len(), 1, h, w], data).expect("uniform image sizes");
        Samples { inputs, labels: self.labels.clone() }
    }

    /// SHA-256 over sizes, labels and pixel bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let (rows, cols) = self.image_size();
        for v in [self.len(), rows, cols, self.n_classes] {
            h.update((v as u64).to_le_bytes());
        }
        for (img, l) in self.images.iter().zip(&self.labels) {
            h.update((*l as u64).to_le_bytes());
            for v in img.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Parses an IDX image file; returns `(rows, cols, pixels)`.
fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 16 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(format_err(path, format!("image magic {magic}, expected {MNIST_IMAGE_MAGIC}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let expected = n.checked_mul(rows * cols).and_then(|p| p.checked_add(16));
    match expected {
        Some(e) if e == bytes.len() => Ok((n, rows, cols)),
        Some(e) if e > bytes.len() => Err(format_err(path, format!("truncated: {} of {e} bytes", bytes.len()))),
        _ => Err(format_err(path, format!("{} bytes where {expected:?} expected", bytes.len()))),
    }
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 8 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(format_err(path, format!("label magic {magic}, expected {MNIST_LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        let what = if bytes.len() < 8 + n { "truncated" } else { "trailing bytes" };
        return Err(format_err(path, format!("{what}: {} bytes for {n} labels", bytes.len())));
    }
    Ok(n)
}

/// Loads an MNIST-format image/label file pair, scaling pixels by 1/255.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = read_file(ipath)?;
    let lb = read_file(lpath)?;
    let (n, rows, cols) = parse_idx_images(ipath, &ib)?;
    let nl = parse_idx_labels(lpath, &lb)?;
    if n != nl {
        return Err(DataError::CountMismatch { images: n, labels: nl });
    }
    let per = rows * cols;
    let images = ib[16..]
        .chunks_exact(per.max(1))
        .take(n)
        .map(|px| {
            Image::new(rows, cols, px.iter().map(|&b| b as f64 / 255.0).collect()).expect("bytes scale into [0, 1]")
        })
        .collect();
    let labels = lb[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, 10, "mnist")
}

/// Resolves the standard file names of one MNIST split inside `dir`,
/// preferring uncompressed files over `.gz` copies.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |stem: String| {
        let plain = dir.as_ref().join(&stem);
        let gz = dir.as_ref().join(format!("{stem}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    (pick(format!("{prefix}-images-idx3-ubyte")), pick(format!("{prefix}-labels-idx1-ubyte")))
}

pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, split);
    load_mnist_idx(i, l)
}

/// Converts an 8-bit RGB triple to a grayscale intensity in `[0, 1]`.
pub fn to_gray(r: u8, g: u8, b: u8) -> f64 {
    let v = (GRAY_WEIGHTS[0] * r as f64 + GRAY_WEIGHTS[1] * g as f64 + GRAY_WEIGHTS[2] * b as f64) / 255.0;
    v.clamp(0.0, 1.0)
}

/// Parses concatenated CIFAR-10 records into grayscale images.
pub fn parse_cifar10(path: &Path, bytes: &[u8]) -> Result<(Vec<Image>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(format_err(
            path,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(format_err(path, format!("record {i}: label {label}")));
        }
        let (r, rest) = rec[1..].split_at(plane);
        let (g, b) = rest.split_at(plane);
        let px = (0..plane).map(|p| to_gray(r[p], g[p], b[p])).collect();
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, px).expect("gray values in [0, 1]"));
        labels.push(label);
    }
    Ok((images, labels))
}

/// Loads CIFAR-10 as grayscale. `path` is either a single batch file or a
/// directory; a directory yields the five training batches for
/// [`Split::Train`] or `test_batch.bin` for [`Split::Test`].
pub fn load_cifar10(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let files: Vec<PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for f in &files {
        let (i, l) = parse_cifar10(f, &read_file(f)?)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new(images, labels, 10, "cifar10")
}

/// Integer-pixel translation: source pixel `(r, c)` lands at
/// `(r + dy, c + dx)`; uncovered pixels are zero.
pub fn shift_image(img: &Image, dx: i64, dy: i64) -> Image {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let mut out = vec![0.0; img.values().len()];
    for r in 0..h {
        let sr = r - dy;
        if !(0..h).contains(&sr) {
            continue;
        }
        for c in 0..w {
            let sc = c - dx;
            if (0..w).contains(&sc) {
                out[(r * w + c) as usize] = img.values()[(sr * w + sc) as usize];
            }
        }
    }
    Image::new(img.height(), img.width(), out).expect("copied values stay in range")
}

/// Counter-clockwise rotation by `degrees` about the image centre with
/// bilinear interpolation; samples outside the source are zero.
pub fn rotate_image(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let src = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            img.values()[r as usize * w + c as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // x right, y up; invert the rotation to find the source point
            let (x, y) = (c as f64 - cx, cy - r as f64);
            let (xs, ys) = (cos * x + sin * y, -sin * x + cos * y);
            let (fr, fc) = (cy - ys, cx + xs);
            let (r0, c0) = (fr.floor(), fc.floor());
            let (tr, tc) = (fr - r0, fc - c0);
            let (r0, c0) = (r0 as i64, c0 as i64);
            let v = (1.0 - tr) * ((1.0 - tc) * src(r0, c0) + tc * src(r0, c0 + 1))
                + tr * ((1.0 - tc) * src(r0 + 1, c0) + tc * src(r0 + 1, c0 + 1));
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(h, w, out).expect("clamped")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    /// `(dx, dy)` offsets in pixels.
    pub shifts: Vec<(i64, i64)>,
    pub rotations: Vec<f64>,
}

impl Default for Augmentation {
    /// Shifts in `{−2, 0, 2}²` without the identity, each combined with
    /// rotations of ±10°.
    fn default() -> Self {
        let mut shifts = Vec::new();
        for dy in [-2, 0, 2] {
            for dx in [-2, 0, 2] {
                if (dx, dy) != (0, 0) {
                    shifts.push((dx, dy));
                }
            }
        }
        Self { shifts, rotations: vec![-10.0, 10.0] }
    }
}

impl Augmentation {
    /// Every `(shift, rotation)` pair, shift-major.
    pub fn combinations(&self) -> Vec<((i64, i64), f64)> {
        self.shifts.iter().flat_map(|&s| self.rotations.iter().map(move |&r| (s, r))).collect()
    }

    /// Size of the augmented set: `n · (1 + combinations)`.
    pub fn output_len(&self, n: usize) -> usize {
        n * (1 + self.shifts.len() * self.rotations.len())
    }
}

/// Returns the originals followed by one block per combination; each copy
/// is rotated first and then shifted. Labels are carried over unchanged.
pub fn augment(data: &Dataset, aug: &Augmentation) -> Result<Dataset> {
    let (h, w) = data.image_size();
    if let Some(s) =
        aug.shifts.iter().find(|(dx, dy)| dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h)
    {
        return Err(DataError::Invalid(format!("shift {s:?} exceeds {h}x{w} images")));
    }
    if let Some(r) = aug.rotations.iter().find(|r| !r.is_finite()) {
        return Err(DataError::Invalid(format!("rotation {r}")));
    }
    let mut images = data.images.clone();
    let mut labels = data.labels.clone();
    for ((dx, dy), deg) in aug.combinations() {
        let block = crate::par::map_slice(&data.images, |img| shift_image(&rotate_image(img, deg), dx, dy));
        images.extend(block);
        labels.extend_from_slice(&data.labels);
    }
    Ok(Dataset { images, labels, n_classes: data.n_classes, name: format!("{}-augmented", data.name) })
}
