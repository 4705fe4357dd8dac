use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, LumaA, Rgb, Rgba};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `(C, H, W)` map (or the first sample of `(N, C, H, W)`) as an
/// 8-bit PNG with C ∈ {1, 2, 3, 4}. Values are mapped linearly from
/// `[lo, hi]` to `[0, 255]` and clamped.
pub fn write_png(path: &Path, x: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let (c, h, w, data) = match x.rank() {
        3 => (x.dim(0), x.dim(1), x.dim(2), x.values("write_png")?),
        4 => {
            let per = x.dim(1) * x.dim(2) * x.dim(3);
            (x.dim(1), x.dim(2), x.dim(3), &x.values("write_png")?[..per])
        }
        _ => return Err(Error::shape("write_png", format!("expected (C, H, W), got {:?}", x.shape()))),
    };
    if hi <= lo {
        return Err(Error::invalid("write_png needs hi > lo"));
    }
    let px = |ch: usize, y: u32, xx: u32| -> u8 {
        let v = data[ch * h * w + y as usize * w + xx as usize];
        ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
    };
    let (w32, h32) = (w as u32, h as u32);
    let res = match c {
        1 => ImageBuffer::from_fn(w32, h32, |xx, y| Luma([px(0, y, xx)])).save(path),
        2 => ImageBuffer::from_fn(w32, h32, |xx, y| LumaA([px(0, y, xx), px(1, y, xx)])).save(path),
        3 => ImageBuffer::from_fn(w32, h32, |xx, y| Rgb([px(0, y, xx), px(1, y, xx), px(2, y, xx)])).save(path),
        4 => ImageBuffer::from_fn(w32, h32, |xx, y| Rgba([px(0, y, xx), px(1, y, xx), px(2, y, xx), px(3, y, xx)]))
            .save(path),
        _ => return Err(Error::invalid(format!("cannot write {c} channels as an image"))),
    };
    res.map_err(|e| Error::Serialization(e.to_string()))
}

/// Raw little-endian f32 dump with a JSON shape sidecar (`<path>.json`).
pub fn write_raw(path: &Path, x: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = x.values("write_raw")?.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    fs::write(side, serde_json::to_vec(&serde_json::json!({ "dtype": "f32", "shape": x.shape() }))?)?;
    Ok(())
}
