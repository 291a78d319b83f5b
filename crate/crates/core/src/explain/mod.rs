//! Grad-CAM heatmaps, heatmap-guided masking and t-SNE embeddings.

mod tsne;

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_rgb8_square, ImageRecord, ImageTensor};
use crate::error::{Error, Result};
use crate::eval::{accuracy_percent, check_graded};
use crate::loss::NUM_GRADES;
use crate::train::ModelBundle;

pub use tsne::{silhouette_score, tsne, tsne_embed, write_embedding, EmbeddingPlot, TsneConfig};

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `H x W`, min-max normalised to `[0, 1]`.
    pub values: Array2<f32>,
    pub target_layer: String,
    pub target_class: usize,
}

/// Channel weights: spatial mean of the gradient of each channel.
pub fn gradcam_weights(grad: &Array3<f32>) -> Vec<f32> {
    grad.outer_iter().map(|g| g.mean().unwrap_or(0.0)).collect()
}

/// Rectified weighted channel sum, bilinearly upsampled to `height x width`
/// and min-max normalised (constant maps become all zeros).
pub fn gradcam_from_parts(activation: &Array3<f32>, grad: &Array3<f32>, height: usize, width: usize) -> Array2<f32> {
    let weights = gradcam_weights(grad);
    let (_, h, w) = activation.dim();
    let mut cam = Array2::<f32>::zeros((h, w));
    for (a, &wk) in activation.outer_iter().zip(&weights) {
        cam.scaled_add(wk, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    normalize(upsample_bilinear(&cam, height, width))
}

fn normalize(mut m: Array2<f32>) -> Array2<f32> {
    let (lo, hi) = m.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo > 0.0 {
        m.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        m.fill(0.0);
    }
    m
}

/// Half-pixel-centred bilinear resize.
fn upsample_bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let pos = ((i as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f32)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, height, h);
        let (x0, x1, fx) = coord(x, width, w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn to_chw(image: &ImageTensor) -> Array3<f32> {
    image.0.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

/// Grad-CAM of `target_class` at `layer` (the last convolutional stage by
/// default) for one image already at the model's input size.
pub fn gradcam(model: &mut ModelBundle, image: &ImageTensor, target_class: usize, layer: Option<&str>) -> Result<Heatmap> {
    if target_class >= NUM_GRADES {
        return Err(Error::Explain(format!("target class {target_class} is outside 0..{NUM_GRADES}")));
    }
    let layer = layer.unwrap_or(model.network.last_stage()).to_string();
    let (act, grad) = model.network.activation_and_grad(to_chw(image), target_class, &layer)?;
    Ok(Heatmap { values: gradcam_from_parts(&act, &grad, image.height(), image.width()), target_layer: layer, target_class })
}

/// Sets every pixel whose heatmap value exceeds `threshold` to black.
pub fn mask_high_activation(image: &ImageTensor, heatmap: &Array2<f32>, threshold: f32) -> Result<ImageTensor> {
    if heatmap.dim() != (image.height(), image.width()) {
        return Err(Error::Explain(format!("heatmap is {:?} but image is {}x{}", heatmap.dim(), image.height(), image.width())));
    }
    let mut out = image.clone();
    for ((y, x), &v) in heatmap.indexed_iter() {
        if v > threshold {
            out.0.slice_mut(ndarray::s![y, x, ..]).fill(0.0);
        }
    }
    Ok(out)
}

pub fn zeroed_pixel_count(heatmap: &Array2<f32>, threshold: f32) -> usize {
    heatmap.iter().filter(|&&v| v > threshold).count()
}

/// `m` circularly shifted by `(dy, dx)`: same number of masked pixels,
/// different placement.
fn roll(m: &Array2<f32>, dy: usize, dx: usize) -> Array2<f32> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| m[[(y + h - dy % h) % h, (x + w - dx % w) % w]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingResult {
    pub normal_accuracy: f64,
    pub masked_accuracy: f64,
    /// Accuracy with each Grad-CAM mask moved to a random position.
    pub random_mask_accuracy: f64,
    /// Mean fraction of pixels zeroed per image.
    pub masked_fraction: f64,
    pub n: usize,
}

fn batch_of(images: &[ImageTensor]) -> ndarray::Array4<f32> {
    let views: Vec<_> = images.iter().map(to_chw).collect();
    let views: Vec<_> = views.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal image sizes")
}

/// Accuracy before and after masking each image's high-activation region,
/// with Grad-CAM targeted at the model's own prediction.
pub fn masking_experiment(model: &mut ModelBundle, test_set: &[ImageRecord], threshold: f32, seed: u64) -> Result<MaskingResult> {
    check_graded(test_set)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("explain.mask_threshold", "must lie in [0, 1]"));
    }
    let size = model.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = test_set.iter().map(|r| usize::from(r.label)).collect();
    let (mut normal, mut masked, mut random) = (Vec::new(), Vec::new(), Vec::new());
    let mut zeroed = 0usize;
    for chunk in test_set.chunks(32) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|r| load_rgb8_square(&r.image_path, size).map(|i| ImageTensor::from_rgb8(&i)))
            .collect::<Result<_>>()?;
        let preds = model.predict(batch_of(&images));
        let (mut m_imgs, mut r_imgs) = (Vec::new(), Vec::new());
        for (img, &p) in images.iter().zip(&preds) {
            let heat = gradcam(model, img, p, None)?.values;
            zeroed += zeroed_pixel_count(&heat, threshold);
            m_imgs.push(mask_high_activation(img, &heat, threshold)?);
            let (h, w) = heat.dim();
            let shifted = roll(&heat, rng.random_range(0..h), rng.random_range(0..w));
            r_imgs.push(mask_high_activation(img, &shifted, threshold)?);
        }
        normal.extend(preds);
        masked.extend(model.predict(batch_of(&m_imgs)));
        random.extend(model.predict(batch_of(&r_imgs)));
    }
    Ok(MaskingResult {
        normal_accuracy: accuracy_percent(&normal, &labels)?,
        masked_accuracy: accuracy_percent(&masked, &labels)?,
        random_mask_accuracy: accuracy_percent(&random, &labels)?,
        masked_fraction: zeroed as f64 / (labels.len() * (size as usize).pow(2)) as f64,
        n: labels.len(),
    })
}

/// Writes the image blended with a blue-to-red rendering of the heatmap.
pub fn write_heatmap_overlay(image: &ImageTensor, heatmap: &Heatmap, path: &Path) -> Result<()> {
    let base = image.to_rgb8();
    let (w, h) = base.dimensions();
    if heatmap.values.dim() != (h as usize, w as usize) {
        return Err(Error::Explain("heatmap and image sizes differ".into()));
    }
    let out = RgbImage::from_fn(w, h, |x, y| {
        let v = heatmap.values[[y as usize, x as usize]];
        let color = [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v];
        let px = base.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| (0.5 * f32::from(px[c]) + 0.5 * 255.0 * color[c]).round().clamp(0.0, 255.0) as u8))
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
