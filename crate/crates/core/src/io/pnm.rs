use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Maps a value in `[-1, 1]` (clamped) to a byte as `floor(127.5 (v + 1) + 0.5)`.
pub fn pixel_byte(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    (127.5 * (v + 1.0) + 0.5).floor().min(255.0) as u8
}

/// Binary PGM (`P5`) for 1 channel or PPM (`P6`) for 3 channels, maxval 255.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("image must be (C, H, W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        other => return Err(Error::invalid(format!("cannot write {other}-channel image"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(pixel_byte(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn dump_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pnm(image)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Tiles equally sized images row-major into one image with a 1-pixel border of -1.
pub fn dump_grid(images: &[Tensor], cols: usize, path: &Path) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to tile"))?;
    let s = first.shape().to_vec();
    if s.len() != 3 || cols == 0 {
        return Err(Error::invalid("grid needs (C, H, W) images and at least one column"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut data = vec![-1.0; c * gh * gw];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != s.as_slice() {
            return Err(Error::shape("dump_grid", &s, img.shape()));
        }
        let (r0, c0) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[ch * gh * gw + (r0 + y) * gw + c0 + x] = img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    dump_image(&Tensor::new(&[c, gh, gw], data)?, path)
}
