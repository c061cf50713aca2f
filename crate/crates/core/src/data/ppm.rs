//! Binary PPM (P6, maxval 255) for eyeballing images.

use std::fs;
use std::path::Path;

use crate::diff::Tensor;
use crate::image::Image;

use super::DataError;

/// Quantize with `round(v·255)` after clamping to `[0, 1]`. One-channel
/// images are written as gray, extra channels are dropped.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for k in 0..3 {
                let v = img.get(i, j, if c >= 3 { k } else { 0 });
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), DataError> {
    fs::write(path, encode_ppm(img)).map_err(|e| DataError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| e.at(path))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let bad = |offset: usize, reason: &str| DataError::Format {
        path: None,
        offset,
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "truncated PPM header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    if fields[0].1 != "P6" {
        return Err(bad(0, "expected magic \"P6\""));
    }
    let num = |k: usize| -> Result<usize, DataError> {
        fields[k].1.parse().map_err(|_| bad(fields[k].0, "expected a number"))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(bad(fields[3].0, "only maxval 255 is supported"));
    }
    let need = pos + w * h * 3;
    if bytes.len() < need {
        return Err(bad(bytes.len(), "truncated PPM payload"));
    }
    let data = bytes[pos..need].iter().map(|&b| b as f32 / 255.0).collect();
    let t = Tensor::new(vec![h, w, 3], data).map_err(|e| bad(pos, &e.to_string()))?;
    Image::new(t).map_err(|e| bad(pos, &e.to_string()))
}
