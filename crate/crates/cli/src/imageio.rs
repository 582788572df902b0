//! PNG and PPM reading and writing.

use std::path::Path;

use image::ImageReader;

use ssmflow::color::RgbImage;
use ssmflow::Tensor;

use crate::CliError;

/// `[H, W, 3]` in `[0, 1]`; the format is sniffed from the content.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>, CliError> {
    let err = |e: &dyn std::fmt::Display| crate::invalid(format!("{}: {e}", path.display()));
    let img = ImageReader::open(path)
        .map_err(|e| err(&e))?
        .with_guessed_format()
        .map_err(|e| err(&e))?
        .decode()
        .map_err(|e| err(&e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).map_err(crate::internal)
}

/// Format chosen by extension (`.png`, `.ppm`).
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| crate::internal("image buffer size mismatch"))?;
    buf.save(path).map_err(|e| crate::invalid(format!("{}: {e}", path.display())))
}
