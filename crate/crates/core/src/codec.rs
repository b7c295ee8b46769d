//! Edge-sparse readout model: coefficient thresholding, run-length coding
//! of zero runs, and bandwidth accounting.
//!
//! Token grammar (per plane, raster order, byte aligned):
//!
//! | token            | bytes                         | bits            |
//! |------------------|-------------------------------|-----------------|
//! | literal `c`      | `c as u8`, `c ≠ −128`         | 8               |
//! | zero run `n ≥ 1` | `0x80`, LEB128 varint `n`     | 8 + 8·len(n)    |
//! | literal `−128`   | `0x80`, `0x00`                | 16              |
//!
//! The encoder codes a lone zero as the literal `0x00` and longer zero
//! stretches as runs, which keeps the encoded size non-increasing as the
//! threshold grows. A run never crosses a plane boundary.

use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::par;
use crate::sensor::QuantizedStack;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

const ESCAPE: u8 = 0x80;

/// Zeroes every code with `|code| ≤ tau`.
pub fn threshold_stack(q: &QuantizedStack, tau: u8) -> QuantizedStack {
    let tau = tau as i16;
    let planes =
        q.planes.iter().map(|p| p.iter().map(|&c| if (c as i16).abs() <= tau { 0 } else { c }).collect()).collect();
    QuantizedStack { planes, ..q.clone() }
}

/// Code energy `Σ c²` kept after thresholding at `tau`.
pub fn retained_energy(q: &QuantizedStack, tau: u8) -> u64 {
    q.codes().filter(|c| (*c as i16).abs() > tau as i16).map(|c| (c as i64 * c as i64) as u64).sum()
}

/// Largest threshold that still keeps at least `fraction` of the code
/// energy. An all-zero stack yields 0.
pub fn energy_retention_threshold(q: &QuantizedStack, fraction: f64) -> u8 {
    // energy per magnitude, then a suffix scan
    let mut by_mag = [0u64; 129];
    for c in q.codes() {
        let m = (c as i16).unsigned_abs() as usize;
        by_mag[m] += (m * m) as u64;
    }
    let total: u64 = by_mag.iter().sum();
    if total == 0 {
        return 0;
    }
    let need = fraction * total as f64;
    // kept(tau) = Σ_{m > tau} by_mag[m]
    let mut kept = total;
    let mut best = 0u8;
    for tau in 0..=127u8 {
        kept -= by_mag[tau as usize];
        if (kept as f64) >= need {
            best = tau;
        } else {
            break;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Run(u64),
    Literal(i8),
}

impl Token {
    pub fn bits(&self) -> u64 {
        match *self {
            Token::Run(n) => 8 + 8 * varint_len(n) as u64,
            Token::Literal(-128) => 16,
            Token::Literal(_) => 8,
        }
    }
}

fn varint_len(mut n: u64) -> usize {
    let mut len = 1;
    while n >= 0x80 {
        n >>= 7;
        len += 1;
    }
    len
}

fn push_varint(out: &mut Vec<u8>, mut n: u64) {
    while n >= 0x80 {
        out.push((n as u8 & 0x7f) | 0x80);
        n >>= 7;
    }
    out.push(n as u8);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RleHeader {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub bits_per_code: u8,
    /// Threshold applied before encoding (informational).
    pub threshold: u8,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RleStream {
    pub header: RleHeader,
    pub tokens: Vec<Token>,
    /// Sum of token costs; the header is not counted.
    pub bit_count: u64,
}

fn encode_plane(plane: &[i8]) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run = 0u64;
    let flush = |tokens: &mut Vec<Token>, run: u64| match run {
        0 => {}
        1 => tokens.push(Token::Literal(0)),
        n => tokens.push(Token::Run(n)),
    };
    for &c in plane {
        if c == 0 {
            run += 1;
        } else {
            flush(&mut tokens, run);
            run = 0;
            tokens.push(Token::Literal(c));
        }
    }
    flush(&mut tokens, run);
    tokens
}

/// Run-length encodes a stack as is (no thresholding).
pub fn rle_encode(q: &QuantizedStack) -> RleStream {
    encode_with_header(q, 0)
}

/// Thresholds at `tau`, then encodes, recording `tau` in the header.
pub fn rle_encode_thresholded(q: &QuantizedStack, tau: u8) -> RleStream {
    encode_with_header(&threshold_stack(q, tau), tau)
}

fn encode_with_header(q: &QuantizedStack, threshold: u8) -> RleStream {
    let per_plane = par::map_slice(&q.planes, |p| encode_plane(p));
    let tokens: Vec<Token> = per_plane.into_iter().flatten().collect();
    let bit_count = tokens.iter().map(Token::bits).sum();
    RleStream {
        header: RleHeader {
            height: q.height,
            width: q.width,
            depth: q.depth(),
            bits_per_code: 8,
            threshold,
            scale: q.scale(),
        },
        tokens,
        bit_count,
    }
}

/// Rebuilds the (thresholded) stack from its tokens.
pub fn rle_decode(s: &RleStream) -> Result<QuantizedStack> {
    let h = &s.header;
    let plane_len = h.height * h.width;
    let mut planes: Vec<Vec<i8>> = Vec::with_capacity(h.depth);
    let mut current: Vec<i8> = Vec::with_capacity(plane_len);
    for (i, token) in s.tokens.iter().enumerate() {
        if planes.len() == h.depth {
            return Err(CodecError::Malformed(format!("token {i} past the last plane")));
        }
        match *token {
            Token::Run(0) => return Err(CodecError::Malformed(format!("empty run at token {i}"))),
            Token::Run(n) => {
                let room = (plane_len - current.len()) as u64;
                if n > room {
                    return Err(CodecError::Malformed(format!(
                        "run of {n} overflows plane {} with {room} pixels left",
                        planes.len()
                    )));
                }
                current.resize(current.len() + n as usize, 0);
            }
            Token::Literal(c) => current.push(c),
        }
        if current.len() == plane_len {
            planes.push(std::mem::replace(&mut current, Vec::with_capacity(plane_len)));
        }
    }
    if plane_len == 0 {
        planes.resize(h.depth, Vec::new());
    }
    if planes.len() != h.depth {
        return Err(CodecError::Malformed(format!("truncated: {} of {} planes complete", planes.len(), h.depth)));
    }
    if !(h.scale > 0.0 && h.scale.is_finite()) {
        return Err(CodecError::Malformed(format!("invalid scale {}", h.scale)));
    }
    Ok(QuantizedStack::new(h.height, h.width, planes, h.scale))
}

/// Serializes tokens with the byte grammar in the module docs.
pub fn token_bytes(tokens: &[Token]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        match *t {
            Token::Run(n) => {
                out.push(ESCAPE);
                push_varint(&mut out, n);
            }
            Token::Literal(-128) => out.extend_from_slice(&[ESCAPE, 0]),
            Token::Literal(c) => out.push(c as u8),
        }
    }
    out
}

pub fn parse_tokens(bytes: &[u8]) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        i += 1;
        if b != ESCAPE {
            tokens.push(Token::Literal(b as i8));
            continue;
        }
        let mut n: u64 = 0;
        let mut shift = 0u32;
        loop {
            let Some(&byte) = bytes.get(i) else {
                return Err(CodecError::Malformed("truncated varint".into()));
            };
            i += 1;
            if shift >= 64 || (shift == 63 && byte > 1) {
                return Err(CodecError::Malformed("varint overflow".into()));
            }
            n |= ((byte & 0x7f) as u64) << shift;
            shift += 7;
            if byte & 0x80 == 0 {
                break;
            }
        }
        tokens.push(if n == 0 { Token::Literal(-128) } else { Token::Run(n) });
    }
    Ok(tokens)
}

const STREAM_MAGIC: &[u8; 4] = b"ASPR";
const STREAM_VERSION: u8 = 1;

/// Writes an `ASPR` stream file; layout in `docs/formats.md`.
pub fn write_stream<W: Write>(s: &RleStream, mut out: W) -> Result<()> {
    let body = token_bytes(&s.tokens);
    out.write_all(STREAM_MAGIC)?;
    out.write_all(&[STREAM_VERSION])?;
    for n in [s.header.height, s.header.width, s.header.depth] {
        out.write_all(&(n as u32).to_le_bytes())?;
    }
    out.write_all(&[s.header.bits_per_code, s.header.threshold])?;
    out.write_all(&s.header.scale.to_le_bytes())?;
    out.write_all(&(body.len() as u64).to_le_bytes())?;
    out.write_all(&body)?;
    Ok(())
}

pub fn read_stream<R: Read>(mut input: R) -> Result<RleStream> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    const HEADER: usize = 4 + 1 + 12 + 2 + 8 + 8;
    if data.len() < HEADER {
        return Err(CodecError::Malformed("truncated header".into()));
    }
    if &data[..4] != STREAM_MAGIC {
        return Err(CodecError::Malformed("bad magic".into()));
    }
    if data[4] != STREAM_VERSION {
        return Err(CodecError::Malformed(format!("unsupported version {}", data[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(data[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let header = RleHeader {
        height: dim(0),
        width: dim(1),
        depth: dim(2),
        bits_per_code: data[17],
        threshold: data[18],
        scale: f64::from_le_bytes(data[19..27].try_into().unwrap()),
    };
    let len = u64::from_le_bytes(data[27..35].try_into().unwrap()) as usize;
    let body = &data[HEADER..];
    if body.len() != len {
        return Err(CodecError::Malformed(format!("expected {len} token bytes, found {}", body.len())));
    }
    let tokens = parse_tokens(body)?;
    let bit_count = tokens.iter().map(Token::bits).sum();
    let stream = RleStream { header, tokens, bit_count };
    // validates plane structure
    rle_decode(&stream)?;
    Ok(stream)
}

/// Published reference point: a conventional 384×384 8-bit sensor needs
/// 1,179,648 bits per frame; the edge readout it was compared with needed
/// about 120 Kbit, a 10:1 reduction.
pub const REFERENCE_RAW_BITS: u64 = 384 * 384 * 8;
pub const REFERENCE_ENCODED_BITS: u64 = 120_000;
pub const REFERENCE_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// `H·W·8`: one conventional 8-bit frame of the scene.
    pub image_raw_bits: u64,
    /// `H·W·D·8`: every plane digitized densely at 8 bits.
    pub stack_raw_bits: u64,
    pub encoded_bits: u64,
    /// `stack_raw_bits / encoded_bits`.
    pub ratio: f64,
    /// `image_raw_bits / encoded_bits`.
    pub image_ratio: f64,
    pub threshold: u8,
}

pub fn bandwidth_report(s: &RleStream) -> BandwidthReport {
    let h = &s.header;
    let image_raw_bits = (h.height * h.width * 8) as u64;
    let stack_raw_bits = image_raw_bits * h.depth as u64;
    let denom = s.bit_count.max(1) as f64;
    BandwidthReport {
        height: h.height,
        width: h.width,
        depth: h.depth,
        image_raw_bits,
        stack_raw_bits,
        encoded_bits: s.bit_count,
        ratio: stack_raw_bits as f64 / denom,
        image_ratio: image_raw_bits as f64 / denom,
        threshold: h.threshold,
    }
}

impl BandwidthReport {
    pub const CSV_HEADER: &'static str =
        "height,width,depth,image_raw_bits,stack_raw_bits,encoded_bits,ratio,image_ratio,threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{}",
            self.height,
            self.width,
            self.depth,
            self.image_raw_bits,
            self.stack_raw_bits,
            self.encoded_bits,
            self.ratio,
            self.image_ratio,
            self.threshold
        )
    }
}
