#![allow(dead_code)]

use std::path::Path;

use advblur::blur::{forge_adversarial_set, BlurMethod, BlurSpec};
use advblur::data::{build_splits, DatasetManifest, Selector, SplitMode, SplitSpec, Splits};
use advblur::train::{make_synthetic_dataset, DomainStyle, SynthSpec, TrainConfig};

/// Small synthetic set: `n` images at 32 pixels.
pub fn tiny_synth(dir: &Path, n: usize, seed: u64) -> DatasetManifest {
    let mut spec = SynthSpec::new(n, vec![DomainStyle::reference()], seed);
    spec.native_size = 32;
    make_synthetic_dataset(&spec, &dir.join("synth")).unwrap()
}

pub fn cheap_blur() -> BlurSpec {
    BlurSpec::with_method(BlurMethod::Median, 15)
}

pub fn forged(dir: &Path, manifest: &DatasetManifest) -> DatasetManifest {
    forge_adversarial_set(manifest, &cheap_blur(), &dir.join("forged"), 0).unwrap()
}

pub fn pooled_split() -> SplitSpec {
    let mut s = SplitSpec::new(SplitMode::Explicit { train: Selector::default(), tests: vec![] });
    s.val_fraction = 0.2;
    s.in_domain_test_fraction = 0.2;
    s
}

pub fn splits(manifest: &DatasetManifest) -> Splits {
    build_splits(manifest, &pooled_split()).unwrap()
}

pub fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        image_size: 16,
        seeds: vec![0],
        blur: Some(cheap_blur()),
        bn_recalibration_batches: 4,
        ..TrainConfig::desk_scale()
    }
}
