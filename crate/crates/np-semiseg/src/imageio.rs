//! Binary PPM (P6) images and PGM (P5) label masks.
//!
//! Images are `[3, H, W]` tensors in [0, 1], stored at 8 bits per channel;
//! generated data is quantized to the same grid so files round-trip
//! losslessly. Masks store raw class ids.

use crate::tensor::Tensor;
use crate::{LabelMap, NpError, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(NpError::Shape(format!(
            "ppm needs [3, H, W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let mut buf = Vec::with_capacity(32 + 3 * n);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    for pix in 0..n {
        for c in 0..3 {
            let v = image.data()[c * n + pix].clamp(0.0, 1.0);
            buf.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, data) = parse_netpbm_header(&bytes, path)?;
    if magic != "P6" {
        return Err(NpError::Format(format!("{}: expected P6", path.display())));
    }
    if maxval != 255 {
        return Err(NpError::Format(format!(
            "{}: only maxval 255 supported",
            path.display()
        )));
    }
    let n = h * w;
    if data.len() < 3 * n {
        return Err(NpError::Format(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    let mut out = vec![0.0f32; 3 * n];
    for pix in 0..n {
        for c in 0..3 {
            out[c * n + pix] = data[pix * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], out)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + labels.data.len());
    write!(buf, "P5\n{} {}\n255\n", labels.w, labels.h)?;
    buf.extend_from_slice(&labels.data);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, data) = parse_netpbm_header(&bytes, path)?;
    if magic != "P5" {
        return Err(NpError::Format(format!("{}: expected P5", path.display())));
    }
    if maxval != 255 {
        return Err(NpError::Format(format!(
            "{}: only maxval 255 supported",
            path.display()
        )));
    }
    if data.len() < h * w {
        return Err(NpError::Format(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    LabelMap::new(h, w, data[..h * w].to_vec())
}

/// Returns (magic, width, height, maxval, raster) for P5/P6 files.
fn parse_netpbm_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<(&'a str, usize, usize, usize, &'a [u8])> {
    let mut pos = 0usize;
    let next_token = |start_at: usize| -> Result<(usize, usize)> {
        let mut p = start_at;
        loop {
            while p < bytes.len() && bytes[p].is_ascii_whitespace() {
                p += 1;
            }
            if p < bytes.len() && bytes[p] == b'#' {
                while p < bytes.len() && bytes[p] != b'\n' {
                    p += 1;
                }
                continue;
            }
            break;
        }
        let start = p;
        while p < bytes.len() && !bytes[p].is_ascii_whitespace() {
            p += 1;
        }
        if start == p {
            return Err(NpError::Format(format!(
                "{}: truncated header",
                path.display()
            )));
        }
        Ok((start, p))
    };
    let parse_num = |range: (usize, usize)| -> Result<usize> {
        std::str::from_utf8(&bytes[range.0..range.1])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NpError::Format(format!("{}: bad header number", path.display())))
    };
    let (s0, e0) = next_token(pos)?;
    let magic = std::str::from_utf8(&bytes[s0..e0])
        .map_err(|_| NpError::Format(format!("{}: bad magic", path.display())))?;
    pos = e0;
    let r1 = next_token(pos)?;
    let w = parse_num(r1)?;
    pos = r1.1;
    let r2 = next_token(pos)?;
    let h = parse_num(r2)?;
    pos = r2.1;
    let r3 = next_token(pos)?;
    let maxval = parse_num(r3)?;
    pos = r3.1;
    // single whitespace byte separates header from raster
    if pos >= bytes.len() {
        return Err(NpError::Format(format!(
            "{}: missing raster",
            path.display()
        )));
    }
    Ok((magic, w, h, maxval, &bytes[pos + 1..]))
}
