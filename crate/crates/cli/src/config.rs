//! Run configuration: one JSON document resolved from built-in defaults, a
//! config file, the `ADVBLUR_OUT` environment variable and `--set` overrides,
//! in increasing order of precedence.

use std::fmt;
use std::path::{Path, PathBuf};

use advblur::ablation::AblationAxis;
use advblur::data::{DatasetId, LabelMaps, SplitSpec};
use advblur::eval::Layout;
use advblur::explain::TsneConfig;
use advblur::train::{DomainStyle, LossMode, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "ADVBLUR_OUT";

/// Bad user input, reported with the dotted key it concerns.
#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid value for `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl From<advblur::Error> for ConfigError {
    fn from(e: advblur::Error) -> Self {
        match e {
            advblur::Error::InvalidConfig { key, message } => Self { key, message },
            other => Self::new("config", other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
    pub ablation: AblationConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of originals. Defaults to the `prepare` output, then the `synth` output.
    pub manifest: Option<PathBuf>,
    /// Manifest with blurred twins. Defaults to the `forge-blur` output.
    pub forged_manifest: Option<PathBuf>,
    /// Extra label maps merged over the built-in ones.
    pub label_maps: LabelMaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub layout: Layout,
    /// Row label in tables. Derived from the training setup when absent.
    pub method: Option<String>,
    /// Checkpoints to evaluate. Defaults to one per training seed.
    pub checkpoints: Vec<PathBuf>,
    pub allow_config_mismatch: bool,
    /// Blurred held-out images used for the uniformity diagnostic.
    pub uniformity_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            layout: Layout::ExternalTable,
            method: None,
            checkpoints: Vec::new(),
            allow_config_mismatch: false,
            uniformity_samples: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub mask_threshold: f32,
    pub gradcam_images: usize,
    /// Grad-CAM target stage; the last convolutional stage when absent.
    pub target_layer: Option<String>,
    /// Test set used by gradcam, mask-eval and tsne. The first one when absent.
    pub test_set: Option<String>,
    pub tsne_samples: usize,
    pub tsne: TsneConfig,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            mask_threshold: advblur::explain::DEFAULT_MASK_THRESHOLD,
            gradcam_images: 8,
            target_layer: None,
            test_set: None,
            tsne_samples: 500,
            tsne: TsneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    /// Every variant of the axis when empty.
    pub variants: Vec<String>,
    /// The `split` protocol when empty.
    pub protocols: Vec<SplitSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { axis: AblationAxis::Loss, variants: Vec::new(), protocols: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Saved report JSON files. Defaults to the `eval` output.
    pub inputs: Vec<PathBuf>,
    /// Falls back to `eval.layout`.
    pub layout: Option<Layout>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut synth = SynthSpec::new(250, vec![DomainStyle::reference(), DomainStyle::shifted()], 0);
        synth.native_size = 128;
        let shifted = DomainStyle::shifted().dataset_id;
        let mut split = SplitSpec::single_source(DatasetId::Synthetic, vec![shifted]);
        split.in_domain_test_fraction = 0.2;
        let mut train = TrainConfig::desk_scale();
        train.epochs = 5;
        train.seeds = vec![0];
        Self {
            schema_version: SCHEMA_VERSION,
            output_root: PathBuf::from("advblur_runs"),
            data: DataConfig::default(),
            synth,
            train,
            split,
            eval: EvalConfig::default(),
            explain: ExplainConfig::default(),
            ablation: AblationConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults < `file` < `env_out` < `overrides`.
    pub fn resolve(file: Option<&Path>, env_out: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialise");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
            let mut layer: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError::new("config", format!("{} is not valid JSON: {e}", path.display())))?;
            if !layer.is_object() {
                return Err(ConfigError::new("config", "top level must be a JSON object"));
            }
            hoist(&mut layer);
            merge(&mut value, layer);
        }
        if let Some(out) = env_out.filter(|s| !s.is_empty()) {
            value["output_root"] = Value::String(out.to_string());
        }
        for o in overrides {
            let (key, raw) =
                o.split_once('=').ok_or_else(|| ConfigError::new(o.as_str(), "override must look like key.path=value"))?;
            let key = key.trim();
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, &hoisted_key(key), parsed).map_err(|m| ConfigError::new(key, m))?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let key = display_key(&path);
            ConfigError::new(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::new("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        if self.output_root.as_os_str().is_empty() {
            return Err(ConfigError::new("output_root", "must not be empty"));
        }
        self.train.validate()?;
        self.split.validate()?;
        self.synth.validate()?;
        let t = self.explain.mask_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(ConfigError::new("explain.mask_threshold", format!("must lie in (0, 1), got {t}")));
        }
        if self.explain.tsne_samples < 4 {
            return Err(ConfigError::new("explain.tsne_samples", "need at least 4 samples"));
        }
        let allowed = self.ablation.axis.all_variants();
        if let Some(v) = self.ablation.variants.iter().find(|v| !allowed.contains(v)) {
            return Err(ConfigError::new(
                "ablation.variants",
                format!("`{v}` is not a {} variant (expected one of {allowed:?})", self.ablation.axis.as_str()),
            ));
        }
        for p in &self.ablation.protocols {
            p.validate()?;
        }
        Ok(())
    }

    /// Row label for tables built from this configuration.
    pub fn method_name(&self) -> String {
        if let Some(m) = &self.eval.method {
            return m.clone();
        }
        match (&self.train.blur, self.train.loss_mode) {
            (None, _) => "baseline".into(),
            (Some(_), LossMode::Cce6) => "cce6".into(),
            (Some(_), LossMode::Custom) => "advblur".into(),
        }
    }
}

/// The blur and loss sections live inside `train`; accept them at top level too.
const HOISTED: [&str; 2] = ["blur", "loss"];

fn hoist(layer: &mut Value) {
    let obj = layer.as_object_mut().expect("checked object");
    for key in HOISTED {
        if let Some(v) = obj.remove(key) {
            let train = obj.entry("train").or_insert_with(|| Value::Object(Map::new()));
            if let Some(t) = train.as_object_mut() {
                match t.get_mut(key) {
                    Some(existing) => merge(existing, v),
                    None => {
                        t.insert(key.to_string(), v);
                    }
                }
            }
        }
    }
}

fn hoisted_key(key: &str) -> String {
    let head = key.split('.').next().unwrap_or_default();
    if HOISTED.contains(&head) {
        format!("train.{key}")
    } else {
        key.to_string()
    }
}

/// Reports hoisted sections under their short names.
fn display_key(path: &str) -> String {
    for key in HOISTED {
        if let Some(rest) = path.strip_prefix("train.") {
            if rest == key || rest.starts_with(&format!("{key}.")) {
                return rest.to_string();
            }
        }
    }
    path.to_string()
}

/// Objects merge key by key; any other value replaces.
pub fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err("empty path segment".into());
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Null => {
                *cur = Value::Object(Map::new());
                cur.as_object_mut().expect("just created")
            }
            Value::Object(m) => m,
            _ => return Err(format!("`{}` is not an object", parts[..i].join("."))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}
