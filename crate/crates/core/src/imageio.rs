//! Binary PPM (`P6`, maxval 255) images as `[1,3,H,W]` tensors in `[0,1]`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PPM: {0}")]
    Format(String),
    #[error("expected a 1x3xHxW tensor, got {0}")]
    Shape(Shape),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

/// Rounds `[0,1]` samples to 8 bits, clamping anything outside.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(ImageError::Format("truncated header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, ImageError> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Format(format!("bad {what}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, ImageError> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(ImageError::Format("not a P6 file".into()));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Format(format!("maxval {maxval} unsupported")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Format("empty image".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| ImageError::Format(format!("raster needs {n} bytes")))?;
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = dequantize(px[c]);
        }
    }
    Ok(Tensor::new(Shape::new(1, 3, height, width), data).expect("sized above"))
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, ImageError> {
    let [n, c, h, w] = image.shape().0;
    if n != 1 || c != 3 {
        return Err(ImageError::Shape(image.shape()));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = image.data();
    out.reserve(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor, ImageError> {
    let bytes = fs::read(path).map_err(|e| ImageError::Io(path.display().to_string(), e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), ImageError> {
    fs::write(path, encode_ppm(image)?).map_err(|e| ImageError::Io(path.display().to_string(), e))
}
