use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{apply_blur, BlurSpec};
use crate::data::{load_native, save_png, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::loss::BLUR_LABEL;

/// `<source-stem>__blur_<method>_<kernel>.png`
pub fn twin_file_name(source: &Path, spec: &BlurSpec) -> String {
    let stem = source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    format!("{stem}__blur_{}_{}.png", spec.method, spec.kernel)
}

/// Number of twins for `n` originals at `ratio`: `ceil(ratio * n)`.
pub(crate) fn twin_count(n: usize, ratio: f64) -> usize {
    // The small offset absorbs representation error in products such as 0.3 * 10.
    (((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Blur a seeded sample of the originals at native resolution, write the
/// results under `out_dir/<dataset_id>/`, and return the originals followed
/// by their label-5 twins.
pub fn forge_adversarial_set(manifest: &DatasetManifest, spec: &BlurSpec, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    if let Some(r) = manifest.records.iter().find(|r| r.is_blurred()) {
        return Err(Error::Blur(format!("input manifest already contains blurred record {}", r.image_path.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out_dir = std::path::absolute(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let probe = out_dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&out_dir, e))?;
    let _ = fs::remove_file(&probe);

    let n = manifest.records.len();
    let m = twin_count(n, spec.ratio);
    let mut chosen: Vec<usize> = (0..n).collect();
    if m < n {
        chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        chosen.truncate(m);
        chosen.sort_unstable();
    }

    let targets: Vec<(usize, PathBuf)> = chosen
        .iter()
        .map(|&i| {
            let r = &manifest.records[i];
            let dir = out_dir.join(r.dataset_id.as_str());
            (i, dir.join(twin_file_name(&r.image_path, spec)))
        })
        .collect();
    let mut seen = HashSet::new();
    for (i, p) in &targets {
        if !seen.insert(p) {
            return Err(Error::Blur(format!(
                "two originals map to the same twin file {} (duplicate stem at {})",
                p.display(),
                manifest.records[*i].image_path.display()
            )));
        }
    }

    let twins: Vec<ImageRecord> = targets
        .par_iter()
        .map(|(i, dest)| {
            let src = &manifest.records[*i];
            let img = load_native(&src.image_path)?;
            let blurred = apply_blur(&img, spec)?;
            save_png(&blurred, dest)?;
            Ok(ImageRecord {
                image_path: dest.clone(),
                dataset_id: src.dataset_id.clone(),
                camera_id: src.camera_id,
                label: BLUR_LABEL as u8,
                quality: src.quality,
                source_record: Some(src.image_path.clone()),
            })
        })
        .collect::<Result<_>>()?;

    let mut records = manifest.records.clone();
    records.extend(twins);
    DatasetManifest::new(records, manifest.label_maps.clone())
}
