//! Binary PPM (P6) images as `3 × H × W` tensors in `[0, 1]`.

use std::path::Path;

use rrc_core::{Real, Tensor};

use crate::error::{io, Error, Result};

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(rrc_core::Error::Contract(format!("PPM needs a 3 x H x W image, got {shape:?}")).into());
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |message: &str| Error::Format {
        path: origin.to_path_buf(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
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
            return Err(fail("truncated PPM header"));
        }
        header.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("bad PPM header"))?);
    }
    if header[0] != "P6" {
        return Err(fail("only binary P6 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad PPM header number"));
    let (w, h, max) = (num(header[1])?, num(header[2])?, num(header[3])?);
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(fail("unsupported PPM extents or depth"));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| fail("truncated PPM pixel data"))?;
    let plane = w * h;
    let data = (0..3 * plane)
        .map(|i| {
            let (c, p) = (i / plane, i % plane);
            pixels[3 * p + c] as Real / max as Real
        })
        .collect();
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(io(path))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    decode(&bytes, path)
}
