//! Binary portable pixmap / graymap files.
//!
//! Images travel as P6 (RGB, maxval 255); masks as P5 with the class index
//! per pixel and 255 for background. Pixel values map linearly between
//! `[0, 1]` doubles and bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write channel-major `[3×h×w]` pixels in `[0, 1]` as binary P6.
pub fn write_ppm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    debug_assert_eq!(pixels.len(), 3 * width * height);
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    for i in 0..plane {
        for c in 0..3 {
            buf.push(quantize(pixels[c * plane + i]));
        }
    }
    write_all(path, &buf)
}

/// Read binary P6 into channel-major `[0, 1]` doubles.
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = read_all(path)?;
    let (magic, width, height, maxval, body) = parse_header(&bytes, path)?;
    if magic != "P6" {
        return Err(Error::Data(format!("{}: expected P6, got {magic}", path.display())));
    }
    let plane = width * height;
    if body.len() < 3 * plane {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    let mut pixels = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            pixels[c * plane + i] = body[3 * i + c] as f64 / maxval as f64;
        }
    }
    Ok((pixels, width, height))
}

/// Write a per-pixel byte mask as binary P5.
pub fn write_pgm(path: &Path, values: &[u8], width: usize, height: usize) -> Result<()> {
    debug_assert_eq!(values.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(values);
    write_all(path, &buf)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = read_all(path)?;
    let (magic, width, height, _maxval, body) = parse_header(&bytes, path)?;
    if magic != "P5" {
        return Err(Error::Data(format!("{}: expected P5, got {magic}", path.display())));
    }
    if body.len() < width * height {
        return Err(Error::Data(format!("{}: truncated mask data", path.display())));
    }
    Ok((body[..width * height].to_vec(), width, height))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_all(path: &Path, buf: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(buf))
        .map_err(|e| Error::io(path, e))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Parse `magic width height maxval` allowing `#` comments, returning the
/// remaining body.
fn parse_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(String, usize, usize, u32, &'a [u8])> {
    let mut pos = 0;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 && pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    if fields.len() < 4 || pos >= bytes.len() {
        return Err(Error::Data(format!("{}: malformed header", path.display())));
    }
    pos += 1; // single whitespace after maxval
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: bad header field `{s}`", path.display())))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let maxval = parse(&fields[3])? as u32;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    Ok((fields[0].clone(), width, height, maxval, &bytes[pos..]))
}
