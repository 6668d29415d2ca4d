use std::io::Write;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_bytes(img: &Array) -> Result<(u32, u32, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Image(format!("expected [H, W, 3] image, got {s:?}")));
    }
    Ok((
        s[1] as u32,
        s[0] as u32,
        img.data().iter().map(|&v| to_byte(v)).collect(),
    ))
}

/// Binary portable pixmap, 8 bits per channel.
pub fn write_ppm(path: impl AsRef<Path>, img: &Array) -> Result<()> {
    let (w, h, bytes) = rgb_bytes(img)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Binary portable graymap of a boolean mask, 255 where set.
pub fn write_pgm(path: impl AsRef<Path>, mask: &[bool], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::Image(format!(
            "mask of {} for {height}x{width}",
            mask.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_png(path: impl AsRef<Path>, img: &Array) -> Result<()> {
    let (w, h, bytes) = rgb_bytes(img)?;
    image::save_buffer(path, &bytes, w, h, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))
}

/// Reads an 8-bit image as `[H, W, 3]` in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Array> {
    let img = image::open(path)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Ok(Array::new(vec![h as usize, w as usize, 3], data)?)
}
