//! Binary PPM (P6) images with maxval 255.

use std::path::Path;

use infu_tensor::Tensor;

use crate::error::{invalid, Result};

/// `[0, 1]` to a byte, clamping first and rounding half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(invalid(format!(
            "PPM needs a [3×H×W] image, got {:?}",
            image.shape()
        )));
    };
    if c != 3 {
        return Err(invalid(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    // header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("PPM header truncated"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| invalid("PPM header not ASCII"))?,
        );
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(invalid(format!("not a P6 PPM: {:?}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| invalid(format!("bad PPM header field {s:?}")))
    };
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(invalid(format!("PPM maxval {max} unsupported")));
    }
    let raster = bytes.get(pos..).filter(|r| r.len() == w * h * 3);
    let raster = raster.ok_or_else(|| invalid("PPM raster has the wrong length"))?;
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}
