use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageReader, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

/// Height x width x 3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Array3<f32>);

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        debug_assert_eq!(data.dim().2, 3);
        Self(data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        Self(data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w, _) = self.0.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.0[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.0.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn decode(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

/// Decode at native resolution. Grayscale sources are replicated to 3 channels.
pub fn load_native(path: &Path) -> Result<ImageTensor> {
    Ok(ImageTensor::from_rgb8(&decode(path)?))
}

pub(crate) fn load_rgb8_square(path: &Path, target: u32) -> Result<RgbImage> {
    let img = decode(path)?;
    Ok(resize_center_crop(&img, target))
}

/// Decode, resize so the shorter side equals `target_size` (aspect kept),
/// then center-crop to `target_size` x `target_size`.
pub fn load_image(path: &Path, target_size: u32) -> Result<ImageTensor> {
    Ok(ImageTensor::from_rgb8(&load_rgb8_square(path, target_size)?))
}

pub(crate) fn resize_center_crop(img: &RgbImage, target: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == target && h == target {
        return img.clone();
    }
    let scale = f64::from(target) / f64::from(w.min(h));
    let nw = ((f64::from(w) * scale).round() as u32).max(target);
    let nh = ((f64::from(h) * scale).round() as u32).max(target);
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let x0 = (nw - target) / 2;
    let y0 = (nh - target) / 2;
    imageops::crop_imm(&resized, x0, y0, target, target).to_image()
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.to_rgb8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    #[test]
    fn resizes_and_crops_to_square() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.png");
        RgbImage::from_pixel(1024, 1024, image::Rgb([10, 20, 30])).save(&p).unwrap();
        let t = load_image(&p, 224).unwrap();
        assert_eq!(t.0.dim(), (224, 224, 3));
        assert!((t.0[[5, 5, 2]] - 30.0 / 255.0).abs() < 1e-6);

        let p = dir.path().join("wide.png");
        RgbImage::new(300, 100).save(&p).unwrap();
        assert_eq!(load_image(&p, 50).unwrap().0.dim(), (50, 50, 3));
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        GrayImage::from_pixel(8, 8, Luma([51])).save(&p).unwrap();
        let t = load_image(&p, 8).unwrap();
        assert!(t.0.iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn truncated_and_non_image_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        RgbImage::new(64, 64).save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&p, 32).is_err());
        let q = dir.path().join("note.png");
        fs::write(&q, "not an image").unwrap();
        assert!(load_native(&q).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let t = ImageTensor(Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 31 + x * 7 + c) % 256) as f32 / 255.0));
        save_png(&t, &p).unwrap();
        assert_eq!(load_native(&p).unwrap(), t);
    }
}
