//! PNG/JPEG decoding into rasters and network input tensors.

use std::path::Path;

use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::{Scalar, Tensor};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.into(),
            message: other.to_string(),
        },
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    Ok(reader.decode().map_err(|e| image_err(path, e))?.to_rgb8())
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::io::create_dir(parent)?;
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Luma (ITU-R 601) in `[0, 255]`.
pub fn to_gray(img: &RgbImage) -> Raster<f32> {
    let data = img
        .pixels()
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect();
    Raster::from_vec(img.width() as usize, img.height() as usize, data).expect("dims match")
}

pub fn load_gray(path: &Path) -> Result<Raster<f32>> {
    load_rgb(path).map(|img| to_gray(&img))
}

/// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    let scale = T::from_f64(1.0 / 255.0);
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data_mut()[c * h * w + i] = T::from_f64(p[c] as f64) * scale;
        }
    }
    t
}

/// Copy out a `w x h` window starting at `(x0, y0)`.
pub fn crop(img: &RgbImage, x0: u32, y0: u32, w: u32, h: u32) -> RgbImage {
    image::imageops::crop_imm(img, x0, y0, w, h).to_image()
}
