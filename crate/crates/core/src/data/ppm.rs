//! Binary PPM (P6) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decodes a P6 file into a `[3,H,W]` tensor scaled to `[0,1]` by `1/maxval`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::data(path, format!("not a binary PPM (magic {magic:?})")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse::<usize>()
            .map_err(|_| Error::data(path, format!("bad PPM {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::data(path, format!("bad PPM geometry {width}x{height}, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * bps;
    if bytes.len() < pos + need {
        return Err(Error::data(path, "truncated PPM raster"));
    }
    let raster = &bytes[pos..pos + need];
    let scale = 1.0 / maxval as f32;
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let s = i * 3 + c;
            let v = if bps == 1 {
                raster[s] as usize
            } else {
                ((raster[2 * s] as usize) << 8) | raster[2 * s + 1] as usize
            };
            if v > maxval {
                return Err(Error::data(path, format!("PPM sample {v} exceeds maxval {maxval}")));
            }
            data[c * plane + i] = v as f32 * scale;
        }
    }
    Ok(Tensor::from_parts(vec![3, height, width], data))
}

/// Encodes a `[3,H,W]` tensor with values in `[0,1]` as an 8-bit P6 file.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("PPM needs [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}
