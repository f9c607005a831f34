//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(m) => return Err(image_err(path, 0, format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
        None => return Err(image_err(path, bytes.len(), "truncated before magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][k];
            return Err(match bytes.get(pos) {
                None => image_err(path, pos, format!("truncated header, expected {what}")),
                Some(_) => image_err(path, pos, format!("expected {what}")),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| image_err(path, start, "header value out of range"))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        None => return Err(image_err(path, pos, "truncated header")),
        Some(_) => return Err(image_err(path, pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(image_err(path, pos, format!("only 8-bit images (maxval 255) are supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(image_err(path, pos, "empty image"));
    }
    Ok(Header {
        channels,
        width,
        height,
        payload: pos,
    })
}

/// Decodes PPM/PGM bytes into `[3, H, W]` values in `[0, 1]`; grayscale is
/// replicated across channels. `path` only labels errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, path)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let data = &bytes[h.payload..];
    if data.len() < need {
        return Err(image_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", data.len()),
        ));
    }
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if h.channels == 3 { data[p * 3 + c] } else { data[p] };
            out[c * plane + p] = src as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], out)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| image_err(path, 0, e.to_string()))?;
    decode_image(&bytes, path)
}

/// Encodes a `[3, H, W]` tensor as P6, rounding to the nearest 8-bit level.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape("encode_ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if *c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn save_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Bilinear resize of a `[C, H, W]` image (pixel-center aligned).
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("resize_bilinear", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let d = image.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = &d[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, w, out_w);
                let top = base[y0 * w + x0] * (1.0 - fx) + base[y0 * w + x1] * fx;
                let bot = base[y1 * w + x0] * (1.0 - fx) + base[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
