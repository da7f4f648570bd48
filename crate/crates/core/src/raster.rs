//! Binary PGM (P5, maxval 255) and grayscale little-endian PFM I/O.
//!
//! Both readers are strict: anything this crate would not itself write is
//! rejected with a typed error rather than guessed at. In memory, rows run
//! top-to-bottom; PFM stores them bottom-to-top, and the flip happens here.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("unsupported endianness: PFM scale {0} is big-endian")]
    UnsupportedEndianness(f64),
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("pixel buffer length {len} does not match {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if pixels.len() != width * height {
            return Err(RasterError::SizeMismatch {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl FloatMap {
    /// Validating constructor: length must match and every value be finite.
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, RasterError> {
        if values.len() != width * height {
            return Err(RasterError::SizeMismatch {
                width,
                height,
                len: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFiniteValue(i));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Sum with 64-bit accumulation.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// Minimal tokenizer for netpbm-style headers (whitespace separated, `#`
/// comments to end of line).
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str, RasterError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(RasterError::MalformedHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| RasterError::MalformedHeader("non-ascii header".into()))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, RasterError> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| RasterError::MalformedHeader(format!("bad {what}: {tok:?}")))
    }

    /// Consumes exactly one whitespace byte separating header from data.
    fn end_of_header(&mut self) -> Result<usize, RasterError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(RasterError::MalformedHeader(
                "missing whitespace after header".into(),
            )),
        }
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, RasterError> {
    let mut hdr = HeaderReader::new(bytes);
    let magic = hdr.token()?;
    if magic != "P5" {
        return Err(RasterError::MalformedHeader(format!(
            "expected P5, found {magic:?}"
        )));
    }
    let width: usize = hdr.number("width")?;
    let height: usize = hdr.number("height")?;
    let maxval: u32 = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(RasterError::UnsupportedMaxval(maxval));
    }
    let start = hdr.end_of_header()?;
    let expected = width * height;
    let data = &bytes[start..];
    if data.len() < expected {
        return Err(RasterError::TruncatedData {
            expected,
            found: data.len(),
        });
    }
    GrayImage::new(width, height, data[..expected].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, RasterError> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), RasterError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.values.len() * 4);
    for row in (0..map.height).rev() {
        for v in &map.values[row * map.width..(row + 1) * map.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatMap, RasterError> {
    let mut hdr = HeaderReader::new(bytes);
    let magic = hdr.token()?;
    if magic != "Pf" {
        return Err(RasterError::MalformedHeader(format!(
            "expected grayscale Pf, found {magic:?}"
        )));
    }
    let width: usize = hdr.number("width")?;
    let height: usize = hdr.number("height")?;
    let scale: f64 = hdr.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(RasterError::MalformedHeader(format!("bad scale {scale}")));
    }
    if scale > 0.0 {
        return Err(RasterError::UnsupportedEndianness(scale));
    }
    let start = hdr.end_of_header()?;
    let expected = width * height * 4;
    let data = &bytes[start..];
    if data.len() < expected {
        return Err(RasterError::TruncatedData {
            expected,
            found: data.len(),
        });
    }
    let mut values = vec![0f32; width * height];
    for (file_row, chunk) in data[..expected].chunks_exact(width * 4).enumerate() {
        let row = height - 1 - file_row;
        for (col, b) in chunk.chunks_exact(4).enumerate() {
            values[row * width + col] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    FloatMap::new(width, height, values)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatMap, RasterError> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(map: &FloatMap, path: impl AsRef<Path>) -> Result<(), RasterError> {
    fs::write(path, encode_pfm(map))?;
    Ok(())
}
