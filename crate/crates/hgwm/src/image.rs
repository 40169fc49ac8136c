//! In-memory images and their on-disk codecs: binary PPM (P6) for RGB,
//! binary PGM (P5) for label maps, raw little-endian f32 for depth.
//!
//! RGB is written with maxval 65535 so that stored future frames stay
//! within 1/65535 of the renderer output.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Label value for pixels that carry no instance class (background).
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB in `[0, 1]`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                op: "rgb image",
                left: vec![height, width, 3],
                right: vec![data.len()],
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Round-trips the image through the 16-bit PPM quantizer.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize16(v) as f64 / 65535.0).collect(),
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n65535\n", self.width, self.height).into_bytes();
        buf.reserve(self.data.len() * 2);
        for &v in &self.data {
            buf.extend_from_slice(&quantize16(v).to_be_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, offset) = parse_pnm_header(&bytes, b"P6").map_err(|d| Error::parse(path, d))?;
        let n = header.width * header.height * 3;
        let data = decode_samples(&bytes[offset..], n, header.maxval).map_err(|d| Error::parse(path, d))?;
        Ok(Self {
            width: header.width,
            height: header.height,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Camera-frame depth in meters; `0` marks pixels with no surface.
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Rounds every sample to f32, which is what the file stores.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path, width: usize, height: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != width * height * 4 {
            return Err(Error::parse(
                path,
                format!("expected {} bytes of f32 depth, found {}", width * height * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self { width, height, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![IGNORE_LABEL; width * height],
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.data);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, offset) = parse_pnm_header(&bytes, b"P5").map_err(|d| Error::parse(path, d))?;
        if header.maxval > 255 {
            return Err(Error::parse(path, "label maps must be 8-bit"));
        }
        let n = header.width * header.height;
        let body = &bytes[offset..];
        if body.len() < n {
            return Err(Error::parse(path, "truncated pixel data"));
        }
        Ok(Self {
            width: header.width,
            height: header.height,
            data: body[..n].to_vec(),
        })
    }
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(PnmHeader, usize), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("missing {} magic", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed header number".to_string())?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    Ok((PnmHeader { width, height, maxval }, pos + 1))
}

fn decode_samples(body: &[u8], n: usize, maxval: usize) -> Result<Vec<f64>, String> {
    let scale = maxval as f64;
    if maxval < 256 {
        if body.len() < n {
            return Err("truncated pixel data".into());
        }
        Ok(body[..n].iter().map(|&b| b as f64 / scale).collect())
    } else {
        if body.len() < 2 * n {
            return Err("truncated pixel data".into());
        }
        Ok(body[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect())
    }
}
