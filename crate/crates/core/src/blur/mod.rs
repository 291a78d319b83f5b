//! Large-kernel blurs and the forge that materialises blurred twins.

mod forge;
mod median;
mod smooth;

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};

pub use forge::{forge_adversarial_set, twin_file_name};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlurMethod {
    #[default]
    Median,
    Gaussian,
    Box,
    Bilateral,
}

impl BlurMethod {
    pub const ALL: [BlurMethod; 4] = [BlurMethod::Median, BlurMethod::Gaussian, BlurMethod::Box, BlurMethod::Bilateral];

    pub fn as_str(self) -> &'static str {
        match self {
            BlurMethod::Median => "median",
            BlurMethod::Gaussian => "gaussian",
            BlurMethod::Box => "box",
            BlurMethod::Bilateral => "bilateral",
        }
    }
}

impl fmt::Display for BlurMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlurMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "median" => Ok(BlurMethod::Median),
            "gaussian" => Ok(BlurMethod::Gaussian),
            "box" => Ok(BlurMethod::Box),
            "bilateral" => Ok(BlurMethod::Bilateral),
            other => Err(Error::config("blur.method", format!("unsupported blur method `{other}`"))),
        }
    }
}

/// How windows are completed past the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    /// Mirror with the edge pixel repeated (`cba|abcd|dcb`), folded as often
    /// as needed when the kernel exceeds the image.
    #[default]
    Reflect,
    /// Clamp to the nearest edge pixel.
    Replicate,
}

/// Map a possibly out-of-range coordinate onto `0..n`.
pub(crate) fn map_index(i: isize, n: usize, border: Border) -> usize {
    let n_i = n as isize;
    match border {
        Border::Replicate => i.clamp(0, n_i - 1) as usize,
        Border::Reflect => {
            let period = 2 * n_i;
            let m = i.rem_euclid(period);
            (if m >= n_i { period - 1 - m } else { m }) as usize
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurSpec {
    pub method: BlurMethod,
    /// Odd window side length in pixels.
    pub kernel: usize,
    /// Spatial sigma for gaussian and bilateral; defaults to `kernel / 6`.
    pub sigma_space: Option<f64>,
    /// Range sigma for bilateral, in [0, 1] intensity units; defaults to 0.1.
    pub sigma_color: Option<f64>,
    pub border: Border,
    /// Fraction of originals that receive a blurred twin.
    pub ratio: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            method: BlurMethod::Median,
            kernel: 151,
            sigma_space: None,
            sigma_color: None,
            border: Border::Reflect,
            ratio: 1.0,
        }
    }
}

impl BlurSpec {
    pub fn with_method(method: BlurMethod, kernel: usize) -> Self {
        Self { method, kernel, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return Err(Error::config("blur.kernel", format!("kernel must be odd and >= 3, got {}", self.kernel)));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config("blur.ratio", format!("ratio must lie in (0, 1], got {}", self.ratio)));
        }
        for (key, v) in [("blur.sigma_space", self.sigma_space), ("blur.sigma_color", self.sigma_color)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(key, format!("sigma must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn sigma_space(&self) -> f64 {
        self.sigma_space.unwrap_or(self.kernel as f64 / 6.0)
    }

    pub fn sigma_color(&self) -> f64 {
        self.sigma_color.unwrap_or(0.1)
    }
}

fn planes(img: &ImageTensor) -> Vec<Vec<f32>> {
    (0..3).map(|c| img.0.index_axis(ndarray::Axis(2), c).iter().copied().collect()).collect()
}

fn from_planes(h: usize, w: usize, planes: &[Vec<f32>]) -> ImageTensor {
    ImageTensor(Array3::from_shape_fn((h, w, 3), |(y, x, c)| planes[c][y * w + x]))
}

fn quantize(plane: &[f32]) -> Option<Vec<u8>> {
    plane
        .iter()
        .map(|&v| {
            let q = (v * 255.0).round();
            ((0.0..=255.0).contains(&q) && q / 255.0 == v).then_some(q as u8)
        })
        .collect()
}

fn check_image(image: &ImageTensor) -> Result<()> {
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::Blur("image has zero extent".into()));
    }
    Ok(())
}

/// Blur each channel with `spec`. Output has the input's shape.
///
/// The median is exact: every output value is the middle element of its
/// (odd-sized) window. Channels whose values all lie on the 8-bit grid
/// (`q / 255`) go through the constant-time histogram path; anything else
/// goes through an exact histogram over value ranks.
pub fn apply_blur(image: &ImageTensor, spec: &BlurSpec) -> Result<ImageTensor> {
    spec.validate()?;
    check_image(image)?;
    let (h, w) = (image.height(), image.width());
    let k = spec.kernel;
    let out = match spec.method {
        BlurMethod::Median => {
            let planes = planes(image);
            let filtered: Vec<Vec<f32>> = planes
                .iter()
                .map(|p| match quantize(p) {
                    Some(q) => median::median_u8(&q, w, h, k, spec.border).into_iter().map(|v| f32::from(v) / 255.0).collect(),
                    None => median::median_ranked(p, w, h, k, spec.border),
                })
                .collect();
            from_planes(h, w, &filtered)
        }
        BlurMethod::Gaussian => {
            let sigma = spec.sigma_space();
            let filtered: Vec<Vec<f32>> =
                planes(image).iter().map(|p| smooth::gaussian(p, w, h, k, sigma, spec.border)).collect();
            from_planes(h, w, &filtered)
        }
        BlurMethod::Box => {
            let filtered: Vec<Vec<f32>> = planes(image).iter().map(|p| smooth::box_mean(p, w, h, k, spec.border)).collect();
            from_planes(h, w, &filtered)
        }
        BlurMethod::Bilateral => {
            let src: Vec<f32> = image.0.iter().copied().collect();
            let out = smooth::bilateral(&src, w, h, k, spec.sigma_space(), spec.sigma_color(), spec.border);
            ImageTensor(Array3::from_shape_vec((h, w, 3), out).expect("shape preserved"))
        }
    };
    Ok(out)
}

/// Reference median filter: sorts every window. Meant for small images.
pub fn median_filter_oracle(image: &ImageTensor, kernel: usize, border: Border) -> Result<ImageTensor> {
    BlurSpec { kernel, ..BlurSpec::default() }.validate()?;
    check_image(image)?;
    let (h, w) = (image.height(), image.width());
    let filtered: Vec<Vec<f32>> = planes(image).iter().map(|p| median::median_sort(p, w, h, kernel, border)).collect();
    Ok(from_planes(h, w, &filtered))
}
