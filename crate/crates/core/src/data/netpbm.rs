//! Binary netpbm image I/O: PGM (P5, grayscale) and PPM (P6, RGB), maxval up
//! to 255. Reading yields a (C, H, W) tensor with values scaled to [0, 1] by
//! dividing by maxval; writing quantizes to bytes with maxval 255. For
//! images whose values are already multiples of 1/255 the write → read round
//! trip is bit-exact.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        record: path.display().to_string(),
        message: message.into(),
    }
}

/// The canonical byte → unit-interval mapping for maxval-255 images. Every
/// producer of byte-quantized pixel values (reader, synthesizer, tests) goes
/// through this one function so round trips are bit-exact.
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos > start {
            Some(&self.bytes[start..self.pos])
        } else {
            None
        }
    }

    fn unsigned(&mut self) -> Option<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok).ok()?.parse().ok()
    }
}

/// Read a P5 or P6 file into a (C, H, W) tensor with values in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ingestion(path, format!("cannot open image: {e}")))?
        .read_to_end(&mut raw)
        .map_err(|e| ingestion(path, format!("cannot read image: {e}")))?;
    let mut scan = HeaderScanner {
        bytes: &raw,
        pos: 0,
    };
    let magic = scan
        .token()
        .ok_or_else(|| ingestion(path, "empty file"))?;
    let channels = match magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        other => {
            return Err(ingestion(
                path,
                format!(
                    "unsupported magic '{}' (expected P5 or P6)",
                    String::from_utf8_lossy(other)
                ),
            ))
        }
    };
    let width = scan
        .unsigned()
        .ok_or_else(|| ingestion(path, "malformed header: missing width"))?;
    let height = scan
        .unsigned()
        .ok_or_else(|| ingestion(path, "malformed header: missing height"))?;
    let maxval = scan
        .unsigned()
        .ok_or_else(|| ingestion(path, "malformed header: missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(ingestion(path, "image dimensions must be positive"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ingestion(
            path,
            format!("maxval {maxval} unsupported (must be 1..=255)"),
        ));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if scan.pos >= raw.len() || !raw[scan.pos].is_ascii_whitespace() {
        return Err(ingestion(path, "malformed header: missing data separator"));
    }
    let data_start = scan.pos + 1;
    let expected = channels * width * height;
    let data = &raw[data_start..];
    if data.len() != expected {
        return Err(ingestion(
            path,
            format!(
                "pixel payload holds {} bytes, expected {expected}",
                data.len()
            ),
        ));
    }
    // Interleaved rows (P6: RGBRGB...) → planar (C, H, W).
    let mut values = vec![0.0f32; expected];
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                let byte = data[(r * width + c) * channels + ch];
                values[ch * height * width + r * width + c] = if maxval == 255 {
                    byte_to_unit(byte)
                } else {
                    byte as f32 / maxval as f32
                };
            }
        }
    }
    Tensor::new(vec![channels, height, width], values)
}

/// Write a (C, H, W) tensor with values in [0, 1] as P5 (C = 1) or P6
/// (C = 3), maxval 255. Values are clamped, then rounded to bytes.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "write_image expects a (C, H, W) tensor, got shape {shape:?}"
        )));
    }
    let (channels, height, width) = (shape[0], shape[1], shape[2]);
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(Error::Contract(format!(
                "write_image supports 1 or 3 channels, got {other}"
            )))
        }
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    let data = image.data();
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                let v = data[ch * height * width + r * width + c].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| ingestion(path, format!("cannot create: {e}")))?;
    file.write_all(&out)
        .map_err(|e| ingestion(path, format!("cannot write: {e}")))?;
    Ok(())
}
