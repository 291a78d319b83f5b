//! Ablations over the loss (dual loss vs. six-way cross-entropy) and over the
//! blur method, with every other setting held fixed.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blur::{forge_adversarial_set, BlurMethod};
use crate::data::{build_splits, write_manifest, DatasetManifest, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{aggregate_seeds, evaluate, render_report, EvalReport, EvalRow, Layout, Provenance, RenderedTable};
use crate::train::{save_checkpoint, train, LossMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Loss,
    Blur,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Loss => "loss",
            AblationAxis::Blur => "blur",
        }
    }

    /// Config field that varies along this axis.
    pub fn field(self) -> &'static str {
        match self {
            AblationAxis::Loss => "loss_mode",
            AblationAxis::Blur => "blur.method",
        }
    }

    pub fn all_variants(self) -> Vec<String> {
        match self {
            AblationAxis::Loss => vec!["custom".into(), "cce6".into()],
            AblationAxis::Blur => BlurMethod::ALL.iter().map(|m| m.as_str().to_string()).collect(),
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(AblationAxis::Loss),
            "blur" => Ok(AblationAxis::Blur),
            other => Err(Error::config("ablation.axis", format!("unknown axis `{other}` (loss or blur)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub variants: Vec<String>,
    pub base_config: TrainConfig,
    pub protocols: Vec<SplitSpec>,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("ablation.variants", "at least one variant is required"));
        }
        let allowed = self.axis.all_variants();
        for (i, v) in self.variants.iter().enumerate() {
            if !allowed.contains(v) {
                return Err(Error::config(
                    "ablation.variants",
                    format!("`{v}` is not a {} variant (expected one of {allowed:?})", self.axis.as_str()),
                ));
            }
            if self.variants[..i].contains(v) {
                return Err(Error::config("ablation.variants", format!("`{v}` is listed twice")));
            }
        }
        if self.base_config.blur.is_none() {
            return Err(Error::config("blur", "ablations need a blur configuration"));
        }
        if self.protocols.is_empty() {
            return Err(Error::config("ablation.protocols", "at least one split protocol is required"));
        }
        for p in &self.protocols {
            p.validate()?;
        }
        self.base_config.validate()
    }

    /// Base configuration with the ablated field set to `variant`.
    pub fn variant_config(&self, variant: &str) -> Result<TrainConfig> {
        let mut cfg = self.base_config.clone();
        match self.axis {
            AblationAxis::Loss => {
                cfg.loss_mode = match variant {
                    "custom" => LossMode::Custom,
                    "cce6" => LossMode::Cce6,
                    other => return Err(Error::config("ablation.variants", format!("`{other}` is not a loss variant"))),
                }
            }
            AblationAxis::Blur => {
                let blur = cfg.blur.as_mut().ok_or_else(|| Error::config("blur", "missing blur configuration"))?;
                blur.method = variant.parse()?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: String,
    pub protocol: String,
    pub report: EvalReport,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub results: Vec<VariantResult>,
    /// One comparative table per protocol.
    pub tables: Vec<(String, RenderedTable)>,
}

/// Trains and evaluates every (variant, protocol, seed) combination under
/// `out_root/ablations/<axis>/`.
pub fn run_ablation(spec: &AblationSpec, originals: &DatasetManifest, out_root: &Path) -> Result<AblationOutcome> {
    spec.validate()?;
    if originals.records.iter().any(|r| r.is_blurred()) {
        return Err(Error::Ablation("expected a manifest of originals; blurred twins are forged per variant".into()));
    }
    let configs: Vec<(String, TrainConfig)> =
        spec.variants.iter().map(|v| spec.variant_config(v).map(|c| (v.clone(), c))).collect::<Result<_>>()?;
    let field = spec.axis.field();
    let reference = configs[0].1.hash_excluding(&[field]);
    if let Some((v, _)) = configs.iter().find(|(_, c)| c.hash_excluding(&[field]) != reference) {
        return Err(Error::Ablation(format!("variant `{v}` differs from the base config outside `{field}`")));
    }

    let axis_dir = out_root.join("ablations").join(spec.axis.as_str());
    let mut results = Vec::new();
    let mut shared_forge: Option<DatasetManifest> = None;
    for (variant, cfg) in &configs {
        let blur = cfg.blur.as_ref().expect("validated");
        let forged = match (spec.axis, &shared_forge) {
            (AblationAxis::Loss, Some(m)) => m.clone(),
            _ => {
                let forge_dir: PathBuf = match spec.axis {
                    AblationAxis::Loss => axis_dir.join("forged"),
                    AblationAxis::Blur => axis_dir.join(variant).join("forged"),
                };
                let m = forge_adversarial_set(originals, blur, &forge_dir, spec.base_config.seeds[0])?;
                write_manifest(&m, &forge_dir.join("manifest.csv"))?;
                if spec.axis == AblationAxis::Loss {
                    shared_forge = Some(m.clone());
                }
                m
            }
        };
        for protocol in &spec.protocols {
            let splits = build_splits(&forged, protocol)?;
            if splits.tests.is_empty() {
                return Err(Error::Ablation(format!("protocol {} has no test sets", protocol.name())));
            }
            let mut per_seed = Vec::new();
            for &seed in &cfg.seeds {
                let run_dir = axis_dir.join(variant).join(format!("seed_{seed}"));
                let stem = protocol.name();
                let (mut model, _) = train(cfg, &splits, seed, Some(&run_dir.join(format!("{stem}_history.jsonl"))))?;
                save_checkpoint(&mut model, &run_dir.join(format!("{stem}.safetensors")))?;
                let rows = splits
                    .tests
                    .iter()
                    .map(|t| {
                        evaluate(&mut model, &t.name, &t.records).map(|a| EvalRow {
                            method: variant.clone(),
                            domain: a.domain,
                            accuracy: a.accuracy,
                            std: None,
                            n: a.n,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let report = EvalReport::new(rows, Provenance { config_hashes: vec![cfg.hash()], seeds: vec![seed] })?;
                write_eval_csv(&report, &run_dir.join(format!("{stem}_eval.csv")))?;
                per_seed.push(report);
            }
            let report = if per_seed.len() > 1 { aggregate_seeds(&per_seed)? } else { per_seed.pop().expect("one seed") };
            results.push(VariantResult { variant: variant.clone(), protocol: protocol.name(), report, config_hash: cfg.hash() });
        }
    }

    let mut tables = Vec::new();
    for protocol in &spec.protocols {
        let name = protocol.name();
        let reports: Vec<EvalReport> = results.iter().filter(|r| r.protocol == name).map(|r| r.report.clone()).collect();
        let table = render_report(&reports, Layout::AblationTable, &axis_dir.join(format!("{name}_table")))?;
        tables.push((name, table));
    }
    Ok(AblationOutcome { results, tables })
}

/// Writes one report as `method,domain,accuracy,std,n` rows.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "domain", "accuracy", "std", "n"])?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.domain.clone(),
            r.accuracy.to_string(),
            r.std.map(|s| s.to_string()).unwrap_or_default(),
            r.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
