//! Grayscale PNG input/output.

use crate::{Error, Result};
use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use std::io::Write;
use std::path::Path;

/// Loads an 8- or 16-bit grayscale PNG as raw intensity values (no
/// normalization; 8-bit yields 0..255, 16-bit 0..65535).
pub fn load_image_grid(path: &Path) -> Result<Array2<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Validation(format!("{}: undecodable image: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f32
            }))
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f32
            }))
        }
        other => Err(Error::Validation(format!(
            "{}: expected 8- or 16-bit grayscale PNG, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Loads a stored saliency map (16-bit grayscale PNG) as raw f64 weights.
/// Callers renormalize (and geometrically align) the grid.
pub fn load_saliency_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Validation(format!("{}: undecodable image: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f64
            }))
        }
        other => Err(Error::Validation(format!(
            "{}: saliency maps must be 16-bit grayscale PNG, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes a u16 grid as a 16-bit grayscale PNG.
pub fn save_u16_png(path: &Path, grid: &Array2<u16>) -> Result<()> {
    let (h, w) = grid.dim();
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for ((r, c), &v) in grid.indexed_iter() {
        buf.put_pixel(c as u32, r as u32, Luma([v]));
    }
    buf.save(path).map_err(|e| {
        Error::io(
            path,
            std::io::Error::other(format!("png encode failed: {e}")),
        )
    })
}

/// Exports a nonnegative map as a 16-bit PNG scaled so its maximum hits
/// 65535, plus a sidecar `<name>.scale.txt` recording the scale factor so
/// the original values are recoverable as `png/65535 × factor`.
pub fn save_saliency_png(path: &Path, weights: &Array2<f64>) -> Result<()> {
    let max = weights.iter().copied().fold(0.0f64, f64::max);
    let grid = if max > 0.0 {
        weights.mapv(|v| ((v / max) * 65535.0).round().clamp(0.0, 65535.0) as u16)
    } else {
        weights.mapv(|_| 0u16)
    };
    save_u16_png(path, &grid)?;
    let sidecar = path.with_extension("scale.txt");
    let mut f = std::fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    writeln!(f, "{max:.17e}").map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}
