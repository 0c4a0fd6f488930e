//! Binary PGM (P5) reading and writing. 16-bit samples are big-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

fn image_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Image { path: path.to_path_buf(), detail: detail.into() }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

/// Parses P5 bytes into a `[H, W]` tensor of raw sample values.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(image_err(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| image_err(path, "non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(image_err(path, format!("expected magic P5, found {:?}", fields[0])));
    }
    let parse = |s: &str, name: &str| {
        s.parse::<usize>().map_err(|_| image_err(path, format!("invalid {name} {s:?}")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(image_err(path, format!("unsupported geometry {width}x{height} maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * bytes_per_sample;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| image_err(path, format!("raster truncated: expected {needed} bytes")))?;
    let data: Vec<f32> = if bytes_per_sample == 1 {
        raster.iter().map(|&b| f32::from(b)).collect()
    } else {
        raster.chunks_exact(2).map(|c| f32::from(u16::from_be_bytes([c[0], c[1]]))).collect()
    };
    Ok(Tensor::new(vec![height, width], data)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes, path)
}

/// Encodes a `[H, W]` tensor as 16-bit P5, rounding and clamping to `0..=65535`.
pub fn encode16(pixels: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    let (h, w) = pixels.dims2("pgm")?;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(h * w * 2);
    for &v in pixels.data() {
        let s = v.round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&s.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm16(path: &Path, pixels: &Tensor<f32>) -> Result<(), DataError> {
    let bytes = encode16(pixels)?;
    write_bytes(path, &bytes)
}

/// Writes an 8-bit P5 image from row-major samples.
pub fn write_pgm8(path: &Path, height: usize, width: usize, samples: &[u8]) -> Result<(), DataError> {
    if samples.len() != height * width {
        return Err(image_err(path, format!("{} samples for a {height}x{width} image", samples.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    write_bytes(path, &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}
