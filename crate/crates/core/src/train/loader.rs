use std::path::PathBuf;

use ndarray::Array4;
use rayon::prelude::*;

use crate::data::{load_rgb8_square, ImageRecord};
use crate::error::Result;

/// Preload decoded images when the whole set fits in this many bytes.
pub const CACHE_LIMIT_BYTES: usize = 2 << 30;

/// Decodes records to square RGB tensors, caching them when they fit.
pub struct ImageLoader {
    paths: Vec<PathBuf>,
    size: u32,
    cache: Option<Vec<Vec<u8>>>,
}

impl ImageLoader {
    pub fn new(records: &[ImageRecord], size: u32) -> Result<Self> {
        let paths: Vec<PathBuf> = records.iter().map(|r| r.image_path.clone()).collect();
        let bytes = paths.len() * (size as usize).pow(2) * 3;
        let cache = if bytes <= CACHE_LIMIT_BYTES {
            Some(paths.par_iter().map(|p| load_rgb8_square(p, size).map(|img| img.into_raw())).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self { paths, size, cache })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// NCHW batch with values in `[0, 1]` for the given record indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Array4<f32>> {
        let s = self.size as usize;
        let raw: Vec<std::borrow::Cow<'_, [u8]>> = match &self.cache {
            Some(cache) => indices.iter().map(|&i| cache[i].as_slice().into()).collect(),
            None => indices
                .par_iter()
                .map(|&i| load_rgb8_square(&self.paths[i], self.size).map(|img| img.into_raw().into()))
                .collect::<Result<_>>()?,
        };
        Ok(to_nchw(&raw, s))
    }
}

/// Interleaved RGB8 buffers to an NCHW `f32` batch.
pub(crate) fn to_nchw<B: AsRef<[u8]>>(images: &[B], size: usize) -> Array4<f32> {
    let mut out = Array4::<f32>::zeros((images.len(), 3, size, size));
    for (i, img) in images.iter().enumerate() {
        let img = img.as_ref();
        for c in 0..3 {
            let mut plane = out.slice_mut(ndarray::s![i, c, .., ..]);
            for (j, v) in plane.iter_mut().enumerate() {
                *v = f32::from(img[j * 3 + c]) / 255.0;
            }
        }
    }
    out
}
