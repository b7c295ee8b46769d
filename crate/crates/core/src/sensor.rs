//! Simulated ASP capture: scene noise, optical filtering, and ADC
//! quantization.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{FilterBank, Kernel};
use crate::par;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("kernel {kernel}x{kernel} larger than {height}x{width} image in valid mode")]
    KernelTooLarge { kernel: usize, height: usize, width: usize },
    #[error("filter bank is empty")]
    EmptyBank,
    #[error("snr_db must be finite or +inf, got {0}")]
    InvalidSnr(f64),
    #[error("malformed stack file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SensorError>;

/// A grayscale scene.
///
/// Images built with [`Image::new`] hold intensities in `[0, 1]`. Images
/// returned by [`add_noise`] may leave that range; they are still finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SensorError::InvalidImage(format!("{} values for a {height}x{width} image", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SensorError::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds an image whose values may lie outside `[0, 1]`, such as a
    /// noisy capture or a linear combination of scenes.
    pub fn from_signal(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SensorError::InvalidImage(format!("{} values for a {height}x{width} image", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SensorError::InvalidImage("non-finite value".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean_square(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Border {
    /// Zero outside the image; output keeps the input size.
    #[default]
    ZeroPad,
    /// Only positions where the kernel fits; output shrinks by `K − 1`.
    Valid,
}

/// One real-valued output plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Correlates a row-major `height`×`width` signal with a `k`×`k` kernel.
///
/// `out[r][c] = Σ kernel[i][j] · input[r + i − o][c + j − o]` where `o` is
/// `k/2` for zero padding and 0 for valid mode. The kernel is not flipped,
/// matching the convolution layers of [`crate::nn`].
pub fn correlate2d(
    input: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    k: usize,
    border: Border,
) -> Result<Plane> {
    debug_assert_eq!(input.len(), height * width);
    debug_assert_eq!(kernel.len(), k * k);
    let (oh, ow, offset) = match border {
        Border::ZeroPad => (height, width, (k / 2) as isize),
        Border::Valid => {
            if k > height || k > width {
                return Err(SensorError::KernelTooLarge { kernel: k, height, width });
            }
            (height - k + 1, width - k + 1, 0)
        }
    };
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                let y = r as isize + i as isize - offset;
                if y < 0 || y >= height as isize {
                    continue;
                }
                let row = &input[y as usize * width..(y as usize + 1) * width];
                let krow = &kernel[i * k..(i + 1) * k];
                for (j, &kv) in krow.iter().enumerate() {
                    let x = c as isize + j as isize - offset;
                    if x < 0 || x >= width as isize {
                        continue;
                    }
                    acc += kv * row[x as usize];
                }
            }
            out[r * ow + c] = acc;
        }
    }
    Ok(Plane { height: oh, width: ow, values: out })
}

pub fn convolve2d(image: &Image, kernel: &Kernel, border: Border) -> Result<Plane> {
    correlate2d(&image.values, image.height, image.width, &kernel.values, kernel.size, border)
}

/// Adds white Gaussian noise with variance `mean(x²) / 10^(snr_db/10)`.
///
/// `snr_db = +∞` returns the input unchanged. The result is not clipped.
pub fn add_noise(image: &Image, snr_db: f64, seed: u64) -> Result<Image> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(SensorError::InvalidSnr(snr_db));
    }
    if snr_db == f64::INFINITY {
        return Ok(image.clone());
    }
    let variance = image.mean_square() / 10f64.powf(snr_db / 10.0);
    if variance == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = image.values.iter().map(|v| v + normal.sample(&mut rng)).collect();
    Image::from_signal(image.height, image.width, values)
}

/// Optical filtering output: one signed edge plane per bank kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<Vec<f64>>,
    /// Kernel size of the bank that produced the stack (0 if unknown).
    pub kernel_size: usize,
    pub snr_db: Option<f64>,
}

impl FeatureStack {
    pub fn depth(&self) -> usize {
        self.planes.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.planes.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Signed ADC codes for every plane of a stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedStack {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<Vec<i8>>,
    /// Value represented by code 1; bit pattern kept for exact equality.
    pub scale_bits: u64,
}

impl QuantizedStack {
    pub fn new(height: usize, width: usize, planes: Vec<Vec<i8>>, scale: f64) -> Self {
        debug_assert!(scale > 0.0);
        debug_assert!(planes.iter().all(|p| p.len() == height * width));
        Self { height, width, planes, scale_bits: scale.to_bits() }
    }

    pub fn scale(&self) -> f64 {
        f64::from_bits(self.scale_bits)
    }

    pub fn depth(&self) -> usize {
        self.planes.len()
    }

    pub fn codes(&self) -> impl Iterator<Item = i8> + '_ {
        self.planes.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureSettings {
    /// Scene-domain SNR; `None` disables noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub border: Border,
}

impl Default for CaptureSettings {
    fn default() -> Self {
        Self { snr_db: None, seed: 0, border: Border::ZeroPad }
    }
}

/// Simulates one exposure. Noise, if requested, is drawn once on the scene
/// before optical filtering; each kernel then produces one plane.
pub fn capture(image: &Image, bank: &FilterBank, settings: &CaptureSettings) -> Result<FeatureStack> {
    if bank.is_empty() {
        return Err(SensorError::EmptyBank);
    }
    let scene = match settings.snr_db {
        Some(snr) => add_noise(image, snr, settings.seed)?,
        None => image.clone(),
    };
    let planes = par::map_slice(&bank.kernels, |k| convolve2d(&scene, k, settings.border))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (height, width) = (planes[0].height, planes[0].width);
    Ok(FeatureStack {
        height,
        width,
        planes: planes.into_iter().map(|p| p.values).collect(),
        kernel_size: bank.kernel_size(),
        snr_db: settings.snr_db,
    })
}

/// [`capture`] followed by 8-bit [`quantize_stack`].
pub fn capture_quantized(image: &Image, bank: &FilterBank, settings: &CaptureSettings) -> Result<QuantizedStack> {
    Ok(quantize_stack(&capture(image, bank, settings)?, 8))
}

/// Symmetric uniform ADC: `scale = max|v| / (2^(bits−1) − 1)` (1 for an
/// all-zero stack), `code = round(v / scale)` clamped to the signed range.
pub fn quantize_stack(stack: &FeatureStack, bits: u32) -> QuantizedStack {
    let bits = bits.clamp(2, 8);
    let top = ((1i32 << (bits - 1)) - 1) as f64;
    let lo = -(1i32 << (bits - 1)) as f64;
    let max = stack.max_abs();
    let scale = if max > 0.0 { max / top } else { 1.0 };
    let planes =
        stack.planes.iter().map(|p| p.iter().map(|v| (v / scale).round().clamp(lo, top) as i8).collect()).collect();
    QuantizedStack::new(stack.height, stack.width, planes, scale)
}

pub fn dequantize(q: &QuantizedStack) -> FeatureStack {
    let scale = q.scale();
    FeatureStack {
        height: q.height,
        width: q.width,
        planes: q.planes.iter().map(|p| p.iter().map(|&c| c as f64 * scale).collect()).collect(),
        kernel_size: 0,
        snr_db: None,
    }
}

const STACK_MAGIC: &[u8; 4] = b"ASPS";
const STACK_VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_I8: u8 = 1;

fn write_stack_header<W: Write>(out: &mut W, dtype: u8, h: usize, w: usize, d: usize, scale: f64) -> Result<()> {
    out.write_all(STACK_MAGIC)?;
    out.write_all(&[STACK_VERSION, dtype])?;
    for n in [h, w, d] {
        out.write_all(&(n as u32).to_le_bytes())?;
    }
    out.write_all(&scale.to_le_bytes())?;
    Ok(())
}

/// Writes a real-valued stack (`ASPS`, dtype 0); see `docs/formats.md`.
pub fn write_feature_stack<W: Write>(stack: &FeatureStack, mut out: W) -> Result<()> {
    write_stack_header(&mut out, DTYPE_F64, stack.height, stack.width, stack.depth(), 1.0)?;
    for v in stack.planes.iter().flatten() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a quantized stack (`ASPS`, dtype 1).
pub fn write_quantized_stack<W: Write>(stack: &QuantizedStack, mut out: W) -> Result<()> {
    write_stack_header(&mut out, DTYPE_I8, stack.height, stack.width, stack.depth(), stack.scale())?;
    let bytes: Vec<u8> = stack.codes().map(|c| c as u8).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Contents of a stack file.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredStack {
    Real(FeatureStack),
    Quantized(QuantizedStack),
}

pub fn read_stack<R: Read>(mut input: R) -> Result<StoredStack> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let header_len = 4 + 2 + 12 + 8;
    if data.len() < header_len {
        return Err(SensorError::Format("truncated header".into()));
    }
    if &data[..4] != STACK_MAGIC {
        return Err(SensorError::Format("bad magic".into()));
    }
    if data[4] != STACK_VERSION {
        return Err(SensorError::Format(format!("unsupported version {}", data[4])));
    }
    let dtype = data[5];
    let dim = |i: usize| u32::from_le_bytes(data[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, d) = (dim(0), dim(1), dim(2));
    let scale = f64::from_le_bytes(data[18..26].try_into().unwrap());
    let body = &data[header_len..];
    let n = h * w;
    match dtype {
        DTYPE_F64 => {
            if body.len() != n * d * 8 {
                return Err(SensorError::Format(format!("expected {} data bytes, found {}", n * d * 8, body.len())));
            }
            let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let planes = if n == 0 { vec![Vec::new(); d] } else { values.chunks(n).map(<[f64]>::to_vec).collect() };
            Ok(StoredStack::Real(FeatureStack { height: h, width: w, planes, kernel_size: 0, snr_db: None }))
        }
        DTYPE_I8 => {
            if body.len() != n * d {
                return Err(SensorError::Format(format!("expected {} data bytes, found {}", n * d, body.len())));
            }
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(SensorError::Format(format!("invalid scale {scale}")));
            }
            let planes = if n == 0 {
                vec![Vec::new(); d]
            } else {
                body.chunks(n).map(|c| c.iter().map(|&b| b as i8).collect()).collect()
            };
            Ok(StoredStack::Quantized(QuantizedStack::new(h, w, planes, scale)))
        }
        other => Err(SensorError::Format(format!("unknown dtype {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{default_tile, make_filter_bank, KernelGeometry};
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn delta(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; k * k];
        v[k * k / 2] = 1.0;
        v
    }

    #[test]
    fn image_range_checked() {
        assert!(Image::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.5]).is_err());
        assert!(Image::from_signal(1, 2, vec![0.5, 1.5]).is_ok());
        assert!(Image::from_signal(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let img = random_image(9, 11, 1);
        for k in [3, 5, 7] {
            let out = correlate2d(img.values(), 9, 11, &delta(k), k, Border::ZeroPad).unwrap();
            assert_eq!(out.values, img.values());
        }
    }

    #[test]
    fn valid_mode_shape_and_error() {
        let img = random_image(6, 8, 2);
        let out = correlate2d(img.values(), 6, 8, &delta(3), 3, Border::Valid).unwrap();
        assert_eq!((out.height, out.width), (4, 6));
        let err = correlate2d(img.values(), 6, 8, &delta(7), 7, Border::Valid);
        assert!(matches!(err, Err(SensorError::KernelTooLarge { .. })));
    }

    #[test]
    fn correlation_is_unflipped() {
        // kernel picks the right-hand neighbour
        let img = Image::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let mut k = vec![0.0; 9];
        k[5] = 1.0;
        let out = correlate2d(img.values(), 1, 3, &k, 3, Border::ZeroPad).unwrap();
        assert_eq!(out.values, vec![0.2, 0.3, 0.0]);
    }

    #[test]
    fn infinite_snr_is_exact() {
        let img = random_image(8, 8, 3);
        assert_eq!(add_noise(&img, f64::INFINITY, 9).unwrap(), img);
        assert!(add_noise(&img, f64::NAN, 9).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let img = random_image(16, 16, 4);
        let a = add_noise(&img, 10.0, 77).unwrap();
        let b = add_noise(&img, 10.0, 77).unwrap();
        let c = add_noise(&img, 10.0, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn constant_scene_captures_to_zero() {
        let bank = make_filter_bank(&default_tile(), KernelGeometry::DEFAULT).unwrap();
        let img = Image::filled(20, 20, 0.7).unwrap();
        let s = capture(&img, &bank, &CaptureSettings { border: Border::Valid, ..Default::default() }).unwrap();
        assert!(s.planes.iter().flatten().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn capture_rejects_empty_bank() {
        let bank = FilterBank { kernels: vec![], tile: default_tile() };
        let img = Image::filled(4, 4, 0.0).unwrap();
        assert!(matches!(capture(&img, &bank, &CaptureSettings::default()), Err(SensorError::EmptyBank)));
    }

    #[test]
    fn quantize_edge_cases() {
        let zero = FeatureStack { height: 2, width: 2, planes: vec![vec![0.0; 4]; 3], kernel_size: 0, snr_db: None };
        let q = quantize_stack(&zero, 8);
        assert_eq!(q.scale(), 1.0);
        assert!(q.codes().all(|c| c == 0));

        let s = FeatureStack { height: 1, width: 3, planes: vec![vec![-2.0, 0.5, 1.0]], kernel_size: 0, snr_db: None };
        let q = quantize_stack(&s, 8);
        assert_eq!(q.planes[0][0], -127);
        assert_eq!(q.planes[0][2], 64);
        assert!((q.scale() - 2.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn stack_files_round_trip() {
        let bank = make_filter_bank(&default_tile(), KernelGeometry::DEFAULT).unwrap();
        let img = random_image(10, 12, 5);
        let s = capture(&img, &bank, &CaptureSettings::default()).unwrap();
        let mut buf = Vec::new();
        write_feature_stack(&s, &mut buf).unwrap();
        match read_stack(buf.as_slice()).unwrap() {
            StoredStack::Real(back) => assert_eq!(back.planes, s.planes),
            _ => panic!("wrong dtype"),
        }
        let q = quantize_stack(&s, 8);
        let mut buf = Vec::new();
        write_quantized_stack(&q, &mut buf).unwrap();
        assert_eq!(buf.len(), 26 + 10 * 12 * 12);
        assert_eq!(read_stack(buf.as_slice()).unwrap(), StoredStack::Quantized(q));
        assert!(read_stack(&buf[..buf.len() - 1]).is_err());
    }
}
