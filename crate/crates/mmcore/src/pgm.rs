//! Portable graymap I/O for image artifacts.
//!
//! Masks export as plain-text P2 (diffable golden files); sampled images as
//! binary P5 with maxval 255. Pixel values in [0,1] map linearly onto the
//! gray range.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        other => Err(Error::Config(format!(
            "expected a grayscale image, got shape {other:?}"
        ))),
    }
}

fn quantize(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = image_dims(img)?;
    let bytes = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((h, w, bytes))
}

/// Write an image as binary P5.
pub fn write_p5(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, bytes) = quantize(img)?;
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Write an image as plain-text P2.
pub fn write_p2(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, bytes) = quantize(img)?;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in bytes.chunks(w) {
        let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a P5 graymap back into a [1 x H x W] tensor with values in [0,1].
pub fn read_p5(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let err = |offset: usize, reason: &str| Error::Format {
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if !bytes.starts_with(b"P5\n") {
        return Err(err(0, "missing P5 magic"));
    }
    // Header: magic, "<w> <h>", maxval, each newline-terminated.
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| err(bytes.len(), "truncated header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| err(0, "non-utf8 header"))?;
    let mut fields = header.split_whitespace().skip(1);
    let w: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(3, "bad width"))?;
    let h: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(3, "bad height"))?;
    let maxval: f64 = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(3, "bad maxval"))?;
    let pixels = &bytes[header_end..];
    if pixels.len() != w * h {
        return Err(err(header_end, "pixel payload size mismatch"));
    }
    let data = pixels.iter().map(|&b| b as f64 / maxval).collect();
    Tensor::from_vec(vec![1, h, w], data)
}
