//! PNG image files <-> (3, h, w) float arrays with values in [0, 1].

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};

pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (img[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(())
}
