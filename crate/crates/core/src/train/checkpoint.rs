use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelBundle, ModelMeta};
use crate::error::{Error, Result};
use crate::nn::{read_safetensors, write_safetensors, Backbone, Network};

/// Metadata key holding the JSON-encoded [`ModelMeta`].
pub const CHECKPOINT_META_KEY: &str = "advblur_meta";
const WEIGHTS_HASH_KEY: &str = "weights_sha256";

fn weights_hash(tensors: &[(String, ndarray::ArrayD<f32>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Writes weights and metadata to a single safetensors file.
pub fn save_checkpoint(bundle: &mut ModelBundle, path: &Path) -> Result<()> {
    let mut tensors = bundle.network.state();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut meta = HashMap::new();
    meta.insert(CHECKPOINT_META_KEY.to_string(), serde_json::to_string(&bundle.meta)?);
    meta.insert(WEIGHTS_HASH_KEY.to_string(), weights_hash(&tensors));
    let bytes = write_safetensors(&tensors, meta).map_err(|message| Error::Checkpoint { path: path.to_path_buf(), message })?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
///
/// When `expected_hash` is given and differs from the stored config hash the
/// load is refused unless `allow_mismatch` is set, in which case a warning is
/// logged.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>, allow_mismatch: bool) -> Result<ModelBundle> {
    let corrupt = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let extra = header.metadata().clone().ok_or_else(|| corrupt("missing metadata header".into()))?;
    let meta_json = extra.get(CHECKPOINT_META_KEY).ok_or_else(|| corrupt(format!("missing `{CHECKPOINT_META_KEY}` metadata")))?;
    let meta: ModelMeta = serde_json::from_str(meta_json).map_err(|e| corrupt(e.to_string()))?;
    if meta.config.hash() != meta.config_hash {
        return Err(corrupt("stored config does not match its hash".into()));
    }
    if let Some(expected) = expected_hash {
        if expected != meta.config_hash {
            if !allow_mismatch {
                return Err(Error::HashMismatch { expected: expected.to_string(), found: meta.config_hash });
            }
            log::warn!("{}: config hash {} differs from expected {expected}; loading anyway", path.display(), meta.config_hash);
        }
    }
    let tensors = read_safetensors(&bytes).map_err(corrupt)?;
    let mut sorted: Vec<(String, ndarray::ArrayD<f32>)> = tensors.clone().into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if extra.get(WEIGHTS_HASH_KEY) != Some(&weights_hash(&sorted)) {
        return Err(corrupt("weights do not match their recorded hash".into()));
    }
    let outputs = meta.config.num_outputs();
    let mut network = match meta.config.backbone {
        Backbone::SmallCnn => Network::small_cnn(outputs, 0),
        Backbone::Resnet50Pretrained => Network::resnet50(outputs, 0),
    };
    network.load_state(&tensors).map_err(corrupt)?;
    Ok(ModelBundle { network, meta })
}
