//! Angle Sensitive Pixel optics.
//!
//! An ASP responds to the incidence angle of light with
//! `i = 1 + m·cos(β·(cos γ·θx + sin γ·θy) + α)`. Subtracting the outputs of
//! a pixel pair with phases `α` and `α + π` cancels the constant term and
//! leaves `2m·cos(...)`, which under a Gaussian aperture envelope behaves
//! like a Gabor filter. This module samples those differential responses on
//! a square angle grid to build the kernels the simulated sensor applies.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("invalid ASP parameters: {0}")]
    InvalidParams(String),
    #[error("invalid kernel geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("filter bank is empty")]
    EmptyBank,
    #[error("malformed filter bank file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OpticsError>;

/// Parameters of one differential ASP pixel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspParams {
    /// Phase offset (rad).
    pub alpha: f64,
    /// Angular frequency: radians of response phase per radian of incidence.
    pub beta: f64,
    /// Grating orientation (rad).
    pub gamma: f64,
    /// Modulation depth, in (0, 1].
    pub m: f64,
}

impl AspParams {
    /// Builds a validated parameter set: `m ∈ (0, 1]`, `β > 0`,
    /// `α ∈ [0, 2π)` and `γ ∈ [−π/2, π/2)`.
    pub fn new(alpha: f64, beta: f64, gamma: f64, m: f64) -> Result<Self> {
        let p = Self { alpha, beta, gamma, m };
        p.validate()?;
        Ok(p)
    }

    /// Cosine-phase pixel with unit modulation.
    pub fn cosine(beta: f64, gamma: f64) -> Result<Self> {
        Self::new(0.0, beta, gamma, 1.0)
    }

    /// Wraps arbitrary finite angles into the canonical ranges.
    ///
    /// Moving γ by π reverses the projection direction, which is absorbed by
    /// negating α.
    pub fn canonical(alpha: f64, beta: f64, gamma: f64, m: f64) -> Result<Self> {
        let mut g = (gamma + FRAC_PI_2).rem_euclid(TAU) - FRAC_PI_2;
        let mut a = alpha;
        if g >= FRAC_PI_2 {
            g -= PI;
            a = -a;
        }
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        let mut a = a.rem_euclid(TAU);
        if a >= TAU {
            a = 0.0;
        }
        Self::new(a, beta, g, m)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_response()?;
        if !(0.0..TAU).contains(&self.alpha) {
            return Err(OpticsError::InvalidParams(format!("alpha {} outside [0, 2π)", self.alpha)));
        }
        if !(-FRAC_PI_2..FRAC_PI_2).contains(&self.gamma) {
            return Err(OpticsError::InvalidParams(format!("gamma {} outside [-π/2, π/2)", self.gamma)));
        }
        Ok(())
    }

    /// Checks only what the response formula needs. The angles are periodic,
    /// so out-of-range phases and orientations still describe real kernels.
    fn validate_response(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m <= 1.0) {
            return Err(OpticsError::InvalidParams(format!("m {} outside (0, 1]", self.m)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(OpticsError::InvalidParams(format!("beta {} must be positive", self.beta)));
        }
        if !self.alpha.is_finite() || !self.gamma.is_finite() {
            return Err(OpticsError::InvalidParams("non-finite angle".into()));
        }
        Ok(())
    }
}

/// Differential output `i_α − i_{α+π}` for light arriving at `(θx, θy)`.
pub fn differential_response(params: &AspParams, theta_x: f64, theta_y: f64) -> f64 {
    let projected = params.gamma.cos() * theta_x + params.gamma.sin() * theta_y;
    2.0 * params.m * (params.beta * projected + params.alpha).cos()
}

/// Sampling geometry shared by every kernel of a bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelGeometry {
    /// Samples per side (odd).
    pub size: usize,
    /// Total incidence-angle span Θ covered by one side (rad).
    pub extent: f64,
    /// Gaussian envelope width (rad).
    pub sigma: f64,
}

impl KernelGeometry {
    /// Default sensor mapping: 7×7 samples over 0.6 rad, σ = Θ/4.
    pub const DEFAULT: Self = Self { size: 7, extent: 0.6, sigma: 0.15 };

    /// `size`×`size` kernel at the default 0.1 rad per pixel, σ = Θ/4.
    pub fn with_size(size: usize) -> Self {
        let extent = 0.1 * (size.saturating_sub(1)) as f64;
        Self { size, extent, sigma: extent / 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 3 || self.size.is_multiple_of(2) {
            return Err(OpticsError::InvalidGeometry(format!("kernel size {} must be odd and at least 3", self.size)));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(OpticsError::InvalidGeometry(format!("extent {} must be positive", self.extent)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(OpticsError::InvalidGeometry(format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Incidence angle of sample `index` along one axis.
    pub fn angle(&self, index: usize) -> f64 {
        let step = self.extent / (self.size - 1) as f64;
        let half = (self.size / 2) as f64;
        (index as f64 - half) * step
    }

    pub fn envelope(&self, theta_x: f64, theta_y: f64) -> f64 {
        (-(theta_x * theta_x + theta_y * theta_y) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

impl Default for KernelGeometry {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// A sampled differential impulse response.
///
/// `values` is row-major; row `i` samples `θy = angle(i)` and column `j`
/// samples `θx = angle(j)`. Applied to images as an unflipped correlation,
/// so columns run along image x and rows along image y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub values: Vec<f64>,
    pub size: usize,
    pub source: AspParams,
    pub dc_removed: bool,
    pub angular_extent: f64,
    pub envelope_sigma: f64,
}

impl Kernel {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn geometry(&self) -> KernelGeometry {
        KernelGeometry { size: self.size, extent: self.angular_extent, sigma: self.envelope_sigma }
    }
}

/// Samples `differential_response` times the Gaussian envelope on the grid
/// described by `geometry`. With `remove_dc` the grid mean is subtracted.
pub fn make_kernel(params: &AspParams, geometry: KernelGeometry, remove_dc: bool) -> Result<Kernel> {
    params.validate_response()?;
    geometry.validate()?;
    let k = geometry.size;
    let mut values = Vec::with_capacity(k * k);
    for i in 0..k {
        let ty = geometry.angle(i);
        for j in 0..k {
            let tx = geometry.angle(j);
            values.push(differential_response(params, tx, ty) * geometry.envelope(tx, ty));
        }
    }
    if remove_dc {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        // a second pass absorbs the rounding left by the first
        let residual = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= residual);
    }
    Ok(Kernel {
        values,
        size: k,
        source: *params,
        dc_removed: remove_dc,
        angular_extent: geometry.extent,
        envelope_sigma: geometry.sigma,
    })
}

/// A repeating group of ASPs on the sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub pixels: Vec<AspParams>,
    pub rows: usize,
    pub cols: usize,
    /// Pixel pitch in micrometers; informational.
    pub pitch_um: f64,
}

impl TileConfig {
    pub fn new(pixels: Vec<AspParams>, rows: usize, cols: usize, pitch_um: f64) -> Result<Self> {
        let tile = Self { pixels, rows, cols, pitch_um };
        tile.validate()?;
        Ok(tile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() > self.rows * self.cols {
            return Err(OpticsError::InvalidTile(format!(
                "{} pixels do not fit a {}x{} tile",
                self.pixels.len(),
                self.rows,
                self.cols
            )));
        }
        for (i, p) in self.pixels.iter().enumerate() {
            p.validate()?;
            for q in &self.pixels[..i] {
                if p.alpha == q.alpha && p.beta == q.beta && p.gamma == q.gamma {
                    return Err(OpticsError::InvalidTile(format!(
                        "duplicate pixel (alpha={}, beta={}, gamma={})",
                        p.alpha, p.beta, p.gamma
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Angular frequencies of the default tile: low, medium, high.
pub const DEFAULT_BETAS: [f64; 3] = [10.0, 20.0, 30.0];

/// Orientations of the default tile. Vertical is stored as −π/2, the
/// canonical form of π/2; for cosine pixels both give the same kernel.
pub const DEFAULT_GAMMAS: [f64; 4] = [0.0, FRAC_PI_4, -FRAC_PI_2, -FRAC_PI_4];

/// The 12 cosine-phase (α = 0) pixels of a 4×6 tile with 10 µm pitch:
/// three frequencies crossed with four orientations, frequency-major.
pub fn default_tile() -> TileConfig {
    let pixels = DEFAULT_BETAS
        .iter()
        .flat_map(|&beta| DEFAULT_GAMMAS.iter().map(move |&gamma| AspParams { alpha: 0.0, beta, gamma, m: 1.0 }))
        .collect();
    TileConfig { pixels, rows: 4, cols: 6, pitch_um: 10.0 }
}

/// Frozen first-layer filters: one DC-free kernel per tile pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub kernels: Vec<Kernel>,
    pub tile: TileConfig,
}

pub fn make_filter_bank(tile: &TileConfig, geometry: KernelGeometry) -> Result<FilterBank> {
    tile.validate()?;
    let kernels = tile.pixels.iter().map(|p| make_kernel(p, geometry, true)).collect::<Result<Vec<_>>>()?;
    Ok(FilterBank { kernels, tile: tile.clone() })
}

impl FilterBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Kernel side length; zero for an empty bank.
    pub fn kernel_size(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.size)
    }

    pub fn geometry(&self) -> Option<KernelGeometry> {
        self.kernels.first().map(Kernel::geometry)
    }

    /// Every kernel's values, concatenated in bank order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.kernels.iter().flat_map(|k| k.values.iter().copied()).collect()
    }
}

/// Spectral peak of one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageEntry {
    /// Peak DFT bin, signed, horizontal then vertical.
    pub peak_bin: (i64, i64),
    /// Peak radial frequency (cycles per pixel).
    pub radial_frequency: f64,
    /// Direction of the peak in `[−π/2, π/2)`, measured like γ.
    pub orientation: f64,
    pub magnitude: f64,
    /// Set when the kernel has no non-DC energy.
    pub degenerate: bool,
}

/// Locates each kernel's dominant non-DC frequency with a direct 2-D DFT.
///
/// A real kernel has a conjugate-symmetric spectrum, so of each pair of equal
/// peaks the one with positive horizontal frequency (or zero horizontal and
/// positive vertical) is reported.
pub fn frequency_coverage(bank: &FilterBank) -> Result<Vec<CoverageEntry>> {
    if bank.is_empty() {
        return Err(OpticsError::EmptyBank);
    }
    Ok(bank.kernels.iter().map(kernel_peak).collect())
}

fn signed_bin(u: usize, k: usize) -> i64 {
    if u <= k / 2 {
        u as i64
    } else {
        u as i64 - k as i64
    }
}

fn kernel_peak(kernel: &Kernel) -> CoverageEntry {
    let k = kernel.size;
    let mut best: Option<((i64, i64), f64)> = None;
    let mut max_abs = 0.0f64;
    for v in 0..k {
        for u in 0..k {
            if u == 0 && v == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let phase = -TAU * ((u * j) as f64 + (v * i) as f64) / k as f64;
                    let x = kernel.at(i, j);
                    re += x * phase.cos();
                    im += x * phase.sin();
                }
            }
            let mag = re.hypot(im);
            max_abs = max_abs.max(mag);
            let bin = (signed_bin(u, k), signed_bin(v, k));
            let canonical = bin.0 > 0 || (bin.0 == 0 && bin.1 > 0);
            best = match best {
                None => Some((bin, mag)),
                Some((b, m)) => {
                    let tol = 1e-9 * m.max(1e-300);
                    let prev_canonical = b.0 > 0 || (b.0 == 0 && b.1 > 0);
                    if mag > m + tol || ((mag - m).abs() <= tol && canonical && !prev_canonical) {
                        Some((bin, mag))
                    } else {
                        Some((b, m))
                    }
                }
            };
        }
    }
    let ((bx, by), magnitude) = best.expect("kernel has at least 3x3 samples");
    let degenerate = max_abs <= 1e-12;
    let fx = bx as f64 / k as f64;
    let fy = by as f64 / k as f64;
    let mut orientation = fy.atan2(fx);
    if orientation >= FRAC_PI_2 {
        orientation -= PI;
    } else if orientation < -FRAC_PI_2 {
        orientation += PI;
    }
    CoverageEntry { peak_bin: (bx, by), radial_frequency: fx.hypot(fy), orientation, magnitude, degenerate }
}

/// Absolute difference between two orientations, modulo π.
pub fn orientation_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

const BANK_MAGIC: &[u8; 4] = b"ASPB";
const BANK_VERSION: u8 = 1;

/// Writes a bank in the little-endian `ASPB` layout described in
/// `docs/formats.md`.
pub fn write_filter_bank<W: Write>(bank: &FilterBank, mut out: W) -> Result<()> {
    let geometry = bank.geometry().ok_or(OpticsError::EmptyBank)?;
    out.write_all(BANK_MAGIC)?;
    out.write_all(&[BANK_VERSION])?;
    out.write_all(&(bank.len() as u32).to_le_bytes())?;
    out.write_all(&(geometry.size as u32).to_le_bytes())?;
    out.write_all(&geometry.extent.to_le_bytes())?;
    out.write_all(&geometry.sigma.to_le_bytes())?;
    out.write_all(&(bank.tile.rows as u32).to_le_bytes())?;
    out.write_all(&(bank.tile.cols as u32).to_le_bytes())?;
    out.write_all(&bank.tile.pitch_um.to_le_bytes())?;
    for kernel in &bank.kernels {
        if kernel.size != geometry.size {
            return Err(OpticsError::Format("kernels differ in size".into()));
        }
        let p = kernel.source;
        for x in [p.alpha, p.beta, p.gamma, p.m] {
            out.write_all(&x.to_le_bytes())?;
        }
        out.write_all(&[kernel.dc_removed as u8])?;
        for v in &kernel.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => OpticsError::Format("truncated file".into()),
        _ => OpticsError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(input)?))
}

pub fn read_filter_bank<R: Read>(mut input: R) -> Result<FilterBank> {
    let magic: [u8; 4] = read_array(&mut input)?;
    if &magic != BANK_MAGIC {
        return Err(OpticsError::Format(format!("bad magic {magic:?}")));
    }
    let [version] = read_array(&mut input)?;
    if version != BANK_VERSION {
        return Err(OpticsError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let size = read_u32(&mut input)? as usize;
    let extent = read_f64(&mut input)?;
    let sigma = read_f64(&mut input)?;
    let rows = read_u32(&mut input)? as usize;
    let cols = read_u32(&mut input)? as usize;
    let pitch_um = read_f64(&mut input)?;
    let geometry = KernelGeometry { size, extent, sigma };
    geometry.validate().map_err(|e| OpticsError::Format(e.to_string()))?;
    let mut kernels = Vec::with_capacity(count.min(4096));
    let mut pixels = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let source = AspParams {
            alpha: read_f64(&mut input)?,
            beta: read_f64(&mut input)?,
            gamma: read_f64(&mut input)?,
            m: read_f64(&mut input)?,
        };
        let [dc] = read_array(&mut input)?;
        let values = (0..size * size).map(|_| read_f64(&mut input)).collect::<Result<Vec<_>>>()?;
        pixels.push(source);
        kernels.push(Kernel {
            values,
            size,
            source,
            dc_removed: dc != 0,
            angular_extent: extent,
            envelope_sigma: sigma,
        });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(OpticsError::Format("trailing bytes after last kernel".into()));
    }
    Ok(FilterBank { kernels, tile: TileConfig { pixels, rows, cols, pitch_um } })
}

/// One CSV row per kernel: parameters followed by row-major values.
pub fn filter_bank_csv(bank: &FilterBank) -> String {
    let k = bank.kernel_size();
    let mut s = String::from("index,alpha,beta,gamma,m,size");
    for i in 0..k * k {
        s.push_str(&format!(",v{i}"));
    }
    s.push('\n');
    for (idx, kernel) in bank.kernels.iter().enumerate() {
        let p = kernel.source;
        s.push_str(&format!("{idx},{},{},{},{},{}", p.alpha, p.beta, p.gamma, p.m, kernel.size));
        for v in &kernel.values {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}
