//! Dataset manifests, label harmonisation, split protocols and image loading.

mod image_io;
mod manifest;
mod split;

pub(crate) use image_io::load_rgb8_square;
pub use image_io::{load_image, load_native, save_png, ImageTensor};
pub use manifest::{
    default_label_maps, load_manifest, load_manifest_with, map_labels, write_manifest, CameraId, DatasetId, DatasetManifest,
    ImageRecord, LabelMaps, Quality, MANIFEST_HEADER, MANIFEST_SCHEMA_VERSION,
};
pub use split::{build_splits, NamedSet, Selector, SplitMode, SplitSpec, Splits};
