//! Binary Netpbm images: P5 (grayscale) and P6 (RGB), 8 or 16 bits per
//! sample. 16-bit samples are big-endian, as the format requires.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u16>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), width * height);
        PnmImage {
            width,
            height,
            channels: 1,
            maxval,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        PnmImage {
            width,
            height,
            channels: 3,
            maxval: 255,
            data: data.into_iter().map(u16::from).collect(),
        }
    }

    /// Sample `(y, x, channel)` scaled to `[0, 1]`.
    pub fn normalized(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c] as f32 / self.maxval as f32
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out =
            format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        } else {
            out.extend(self.data.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|&b| b != b'\n' && b != b'\r')
                {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PnmImage> {
    let fail = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(fail("not a binary PGM (P5) or PPM (P6) file")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h
        .number()
        .filter(|&v| v > 0)
        .ok_or_else(|| fail("bad width"))?;
    let height = h
        .number()
        .filter(|&v| v > 0)
        .ok_or_else(|| fail("bad height"))?;
    let maxval = h
        .number()
        .filter(|&v| (1..=65535).contains(&v))
        .ok_or_else(|| fail("bad maxval"))? as u16;
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("missing whitespace after maxval"));
    }
    let raster = &bytes[h.pos + 1..];
    let samples = width * height * channels;
    let wide = maxval > 255;
    let need = samples * if wide { 2 } else { 1 };
    if raster.len() < need {
        return Err(fail(&format!(
            "raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    let data = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    };
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval,
        data,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
