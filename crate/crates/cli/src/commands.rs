use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use advblur::ablation::{run_ablation, write_eval_csv, AblationSpec};
use advblur::blur::forge_adversarial_set;
use advblur::data::{
    build_splits, default_label_maps, load_manifest_with, write_manifest, DatasetManifest, ImageRecord, LabelMaps, Splits,
};
use advblur::eval::{
    aggregate_seeds, evaluate, render_report, uniformity_diagnostic, EvalReport, EvalRow, Layout, Provenance, MASKED_ROW,
    NORMAL_ROW,
};
use advblur::explain::{gradcam, masking_experiment, tsne_embed, write_embedding, write_heatmap_overlay};
use advblur::train::{argmax_grades, load_checkpoint, make_synthetic_dataset, save_checkpoint, train, ModelBundle};
use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Prepare,
    ForgeBlur,
    Synth,
    Train,
    Eval,
    Gradcam,
    MaskEval,
    Tsne,
    Ablate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::ForgeBlur => "forge-blur",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcam => "gradcam",
            Command::MaskEval => "mask-eval",
            Command::Tsne => "tsne",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }

    /// Directory under the output root that holds this command's artifacts.
    pub fn stage_dir(self) -> &'static str {
        match self {
            Command::Prepare => "prepared",
            Command::ForgeBlur => "forged",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcam => "gradcam",
            Command::MaskEval => "masking",
            Command::Tsne => "tsne",
            Command::Ablate => "ablations",
            Command::Report => "report",
        }
    }
}

const MANIFEST: &str = "manifest.csv";
const LABEL_MAPS: &str = "label_maps.json";
const LOCK_FILE: &str = ".advblur.lock";

/// Path layout derived from the resolved configuration.
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.output_root.clone() }
    }

    fn stage(&self, c: Command) -> PathBuf {
        self.root.join(c.stage_dir())
    }

    fn originals(&self, cfg: &RunConfig) -> Option<PathBuf> {
        if let Some(p) = &cfg.data.manifest {
            return Some(p.clone());
        }
        [Command::Prepare, Command::Synth].into_iter().map(|c| self.stage(c).join(MANIFEST)).find(|p| p.is_file())
    }

    fn forged(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.forged_manifest.clone().unwrap_or_else(|| self.stage(Command::ForgeBlur).join(MANIFEST))
    }

    fn checkpoint(&self, seed: u64) -> PathBuf {
        self.stage(Command::Train).join(format!("seed_{seed}")).join("model.safetensors")
    }

    fn checkpoints(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        if cfg.eval.checkpoints.is_empty() {
            cfg.train.seeds.iter().map(|&s| self.checkpoint(s)).collect()
        } else {
            cfg.eval.checkpoints.clone()
        }
    }

    fn report_inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        if cfg.report.inputs.is_empty() {
            vec![self.stage(Command::Eval).join("report.json")]
        } else {
            cfg.report.inputs.clone()
        }
    }
}

/// Human-readable steps for `--dry-run`. Reads nothing beyond path existence.
pub fn plan(cmd: Command, cfg: &RunConfig) -> Vec<String> {
    let l = Paths::new(cfg);
    let out = l.stage(cmd);
    let originals = l
        .originals(cfg)
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<missing: set data.manifest or run synth/prepare>".into());
    let forged = l.forged(cfg).display().to_string();
    let seeds = format!("{:?}", cfg.train.seeds);
    let mut steps = match cmd {
        Command::Synth => vec![format!(
            "render {} images for each of {} domain(s) at {} px into {}",
            cfg.synth.n,
            cfg.synth.domains.len(),
            cfg.synth.native_size,
            out.display()
        )],
        Command::Prepare => vec![
            format!("load and validate {originals}"),
            format!("write the normalised manifest to {}", out.join(MANIFEST).display()),
        ],
        Command::ForgeBlur => match &cfg.train.blur {
            Some(b) => vec![
                format!("load originals from {originals}"),
                format!("blur a {} fraction with {} (kernel {}) into {}", b.ratio, b.method, b.kernel, out.display()),
            ],
            None => vec!["copy the originals manifest unchanged (no blur configured)".into()],
        },
        Command::Train => vec![
            format!("load {forged} and build the {} split", cfg.split.name()),
            format!("train {} for {} epoch(s) with seeds {seeds}", cfg.train.backbone.as_str(), cfg.train.epochs),
            format!("write checkpoints under {}", out.display()),
        ],
        Command::Eval => vec![
            format!("evaluate {} checkpoint(s) on the {} test sets", l.checkpoints(cfg).len(), cfg.split.name()),
            format!("render a {:?} report into {}", cfg.eval.layout, out.display()),
        ],
        Command::Gradcam => {
            vec![format!("render Grad-CAM overlays for {} test image(s) into {}", cfg.explain.gradcam_images, out.display())]
        }
        Command::MaskEval => vec![format!(
            "mask heatmap values above {} and re-evaluate; write a masking table into {}",
            cfg.explain.mask_threshold,
            out.display()
        )],
        Command::Tsne => vec![format!(
            "embed up to {} test feature vectors (perplexity {}) into {}",
            cfg.explain.tsne_samples,
            cfg.explain.tsne.perplexity,
            out.display()
        )],
        Command::Ablate => vec![format!(
            "ablate {} over {:?} with seeds {seeds}, writing under {}",
            cfg.ablation.axis.as_str(),
            ablation_variants(cfg),
            out.display()
        )],
        Command::Report => vec![format!(
            "render {:?} from {:?} into {}",
            cfg.report.layout.unwrap_or(cfg.eval.layout),
            l.report_inputs(cfg),
            out.display()
        )],
    };
    steps.push(format!("write resolved_config.json and summary.json into {}", out.display()));
    steps
}

fn ablation_variants(cfg: &RunConfig) -> Vec<String> {
    if cfg.ablation.variants.is_empty() {
        cfg.ablation.axis.all_variants()
    } else {
        cfg.ablation.variants.clone()
    }
}

/// Exclusive claim on an output root, released on drop.
pub struct RootLock {
    path: PathBuf,
    _file: File,
}

impl RootLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(LOCK_FILE);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("output root {} is locked by another invocation (remove {} if it is stale)", root.display(), path.display())
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
        };
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path, _file: file })
    }
}

impl Drop for RootLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs one command and writes its resolved config and summary.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Value> {
    let l = Paths::new(cfg);
    let out = l.stage(cmd);
    let summary = match cmd {
        Command::Synth => synth(cfg, &out)?,
        Command::Prepare => prepare(cfg, &l, &out)?,
        Command::ForgeBlur => forge(cfg, &l, &out)?,
        Command::Train => train_cmd(cfg, &l, &out)?,
        Command::Eval => eval_cmd(cfg, &l, &out)?,
        Command::Gradcam => gradcam_cmd(cfg, &l, &out)?,
        Command::MaskEval => mask_cmd(cfg, &l, &out)?,
        Command::Tsne => tsne_cmd(cfg, &l, &out)?,
        Command::Ablate => ablate_cmd(cfg, &l)?,
        Command::Report => report_cmd(cfg, &l, &out)?,
    };
    let summary = json!({ "command": cmd.name(), "output_root": cfg.output_root, "result": summary });
    write_json(&out.join("resolved_config.json"), &serde_json::to_value(cfg)?)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn label_maps_for(cfg: &RunConfig, manifest: &Path) -> Result<LabelMaps> {
    let mut maps = default_label_maps();
    let sidecar = manifest.with_file_name(LABEL_MAPS);
    if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?;
        let extra: LabelMaps = serde_json::from_str(&text).with_context(|| format!("parsing {}", sidecar.display()))?;
        maps.extend(extra);
    }
    maps.extend(cfg.data.label_maps.clone());
    Ok(maps)
}

fn load(cfg: &RunConfig, path: &Path, key: &str) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(ConfigError::new(key, format!("manifest {} does not exist", path.display())).into());
    }
    Ok(load_manifest_with(path, &label_maps_for(cfg, path)?)?)
}

fn load_originals(cfg: &RunConfig, l: &Paths) -> Result<DatasetManifest> {
    let path = l
        .originals(cfg)
        .ok_or_else(|| ConfigError::new("data.manifest", "no manifest configured and no synth or prepare output found"))?;
    load(cfg, &path, "data.manifest")
}

fn save_manifest(m: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(MANIFEST);
    write_manifest(m, &path)?;
    write_json(&dir.join(LABEL_MAPS), &serde_json::to_value(&m.label_maps)?)?;
    Ok(path)
}

fn histogram(m: &DatasetManifest) -> Value {
    json!(m.label_histogram())
}

fn splits(cfg: &RunConfig, l: &Paths) -> Result<Splits> {
    let m = load(cfg, &l.forged(cfg), "data.forged_manifest")?;
    Ok(build_splits(&m, &cfg.split)?)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let m = make_synthetic_dataset(&cfg.synth, out)?;
    let path = save_manifest(&m, out)?;
    Ok(json!({ "manifest": path, "records": m.len(), "labels": histogram(&m) }))
}

fn prepare(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let mut m = load_originals(cfg, l)?;
    let before = m.len();
    if cfg.split.drop_reject_quality {
        m.records.retain(|r| r.quality != Some(advblur::data::Quality::Reject));
        m = DatasetManifest::new(m.records, m.label_maps)?;
    }
    let path = save_manifest(&m, out)?;
    let split = build_splits(&m, &cfg.split)?;
    Ok(json!({
        "manifest": path,
        "records": m.len(),
        "dropped_reject": before - m.len(),
        "labels": histogram(&m),
        "split": split_sizes(&split),
    }))
}

fn split_sizes(s: &Splits) -> Value {
    let tests: serde_json::Map<String, Value> = s.tests.iter().map(|t| (t.name.clone(), json!(t.records.len()))).collect();
    json!({ "train": s.train.len(), "val": s.val.len(), "tests": tests })
}

fn forge(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let originals = load_originals(cfg, l)?;
    let forged = match &cfg.train.blur {
        Some(spec) => forge_adversarial_set(&originals, spec, out, cfg.split.seed)?,
        None => originals,
    };
    let path = save_manifest(&forged, out)?;
    Ok(json!({ "manifest": path, "records": forged.len(), "labels": histogram(&forged) }))
}

fn train_cmd(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let splits = splits(cfg, l)?;
    let mut runs = Vec::new();
    for &seed in &cfg.train.seeds {
        let dir = out.join(format!("seed_{seed}"));
        let (mut model, history) = train(&cfg.train, &splits, seed, Some(&dir.join("history.jsonl")))?;
        let ckpt = l.checkpoint(seed);
        save_checkpoint(&mut model, &ckpt)?;
        write_json(&dir.join("history.json"), &serde_json::to_value(&history)?)?;
        log::info!("seed {seed}: best epoch {}", history.best_epoch);
        runs.push(json!({
            "seed": seed,
            "checkpoint": ckpt,
            "best_epoch": history.best_epoch,
            "best_val_accuracy": history.epochs.iter().find(|e| e.epoch == history.best_epoch).map(|e| e.val_accuracy),
        }));
    }
    Ok(json!({ "config_hash": cfg.train.hash(), "split": split_sizes(&splits), "runs": runs }))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<ModelBundle> {
    if !path.is_file() {
        return Err(ConfigError::new("eval.checkpoints", format!("checkpoint {} does not exist", path.display())).into());
    }
    let expected = cfg.train.hash();
    Ok(load_checkpoint(path, Some(&expected), cfg.eval.allow_config_mismatch)?)
}

fn eval_cmd(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let splits = splits(cfg, l)?;
    if splits.tests.is_empty() {
        return Err(ConfigError::new("split", "the split protocol defines no test sets").into());
    }
    let forged = load(cfg, &l.forged(cfg), "data.forged_manifest")?;
    let held_out = held_out_twins(&forged, &splits, cfg.eval.uniformity_samples);
    let method = cfg.method_name();
    let mut per_seed = Vec::new();
    let mut uniformity = Vec::new();
    for ckpt in l.checkpoints(cfg) {
        let mut model = load_model(cfg, &ckpt)?;
        let rows = splits
            .tests
            .iter()
            .map(|t| {
                evaluate(&mut model, &t.name, &t.records).map(|a| EvalRow {
                    method: method.clone(),
                    domain: a.domain,
                    accuracy: a.accuracy,
                    std: None,
                    n: a.n,
                })
            })
            .collect::<advblur::Result<Vec<_>>>()?;
        let seed = model.meta.seed;
        let report =
            EvalReport::new(rows, Provenance { config_hashes: vec![model.meta.config_hash.clone()], seeds: vec![seed] })?;
        write_eval_csv(&report, &out.join(format!("seed_{seed}.csv")))?;
        if !held_out.is_empty() {
            let u = uniformity_diagnostic(&mut model, &held_out)?;
            uniformity.push(json!({ "seed": seed, "mean_max_softmax": u.mean_max_softmax, "mean_bi_loss": u.mean_bi_loss, "n": held_out.len() }));
        }
        per_seed.push(report);
    }
    let report = if per_seed.len() > 1 { aggregate_seeds(&per_seed)? } else { per_seed.pop().expect("at least one checkpoint") };
    let report_path = out.join("report.json");
    write_json(&report_path, &serde_json::to_value(&report)?)?;
    let table = render_report(std::slice::from_ref(&report), cfg.eval.layout, &out.join("table"))?;
    println!("{}", table.text);
    Ok(json!({
        "report": report_path,
        "table_csv": table.csv_path,
        "table_text": table.text_path,
        "average": report.average,
        "rows": report.rows,
        "uniformity": uniformity,
    }))
}

/// Blurred twins whose sources sit in a test set.
fn held_out_twins(forged: &DatasetManifest, splits: &Splits, limit: usize) -> Vec<ImageRecord> {
    let sources: std::collections::HashSet<&PathBuf> =
        splits.tests.iter().flat_map(|t| t.records.iter().map(|r| &r.image_path)).collect();
    forged.records.iter().filter(|r| r.source_record.as_ref().is_some_and(|s| sources.contains(s))).take(limit).cloned().collect()
}

fn explain_inputs(cfg: &RunConfig, l: &Paths) -> Result<(ModelBundle, String, Vec<ImageRecord>)> {
    let splits = splits(cfg, l)?;
    let set = match &cfg.explain.test_set {
        Some(name) => splits.tests.iter().find(|t| &t.name == name).ok_or_else(|| {
            let names: Vec<&str> = splits.tests.iter().map(|t| t.name.as_str()).collect();
            ConfigError::new("explain.test_set", format!("no test set `{name}` (available: {names:?})"))
        })?,
        None => splits.tests.first().ok_or_else(|| ConfigError::new("split", "the split protocol defines no test sets"))?,
    };
    let ckpt = l.checkpoints(cfg).into_iter().next().expect("validated non-empty seeds");
    let model = load_model(cfg, &ckpt)?;
    Ok((model, set.name.clone(), set.records.clone()))
}

fn gradcam_cmd(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let (mut model, set, records) = explain_inputs(cfg, l)?;
    let chosen: Vec<ImageRecord> = records.into_iter().take(cfg.explain.gradcam_images).collect();
    let (logits, _) = model.infer_records(&chosen)?;
    let preds = argmax_grades(&logits);
    let size = model.image_size();
    let mut items = Vec::new();
    for (r, &pred) in chosen.iter().zip(&preds) {
        let img = advblur::data::load_image(&r.image_path, size)?;
        let heat = gradcam(&mut model, &img, pred, cfg.explain.target_layer.as_deref())?;
        let stem = r.image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = out.join(format!("{stem}_gradcam.png"));
        write_heatmap_overlay(&img, &heat, &path)?;
        items.push(
            json!({ "image": r.image_path, "label": r.label, "predicted": pred, "layer": heat.target_layer, "overlay": path }),
        );
    }
    Ok(json!({ "test_set": set, "images": items }))
}

fn mask_cmd(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let (mut model, set, records) = explain_inputs(cfg, l)?;
    let res = masking_experiment(&mut model, &records, cfg.explain.mask_threshold, cfg.explain.seed)?;
    let prov = Provenance { config_hashes: vec![model.meta.config_hash.clone()], seeds: vec![model.meta.seed] };
    let row = |method: &str, acc: f64| EvalRow { method: method.into(), domain: set.clone(), accuracy: acc, std: None, n: res.n };
    let reports = vec![
        EvalReport::new(vec![row(NORMAL_ROW, res.normal_accuracy)], prov.clone())?,
        EvalReport::new(vec![row(MASKED_ROW, res.masked_accuracy)], prov)?,
    ];
    let report_path = out.join("report.json");
    write_json(&report_path, &serde_json::to_value(&reports)?)?;
    let table = render_report(&reports, Layout::MaskingTable, &out.join("table"))?;
    println!("{}", table.text);
    Ok(json!({ "test_set": set, "threshold": cfg.explain.mask_threshold, "result": res, "table_text": table.text_path }))
}

fn tsne_cmd(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let (mut model, set, records) = explain_inputs(cfg, l)?;
    let records: Vec<ImageRecord> = records.into_iter().take(cfg.explain.tsne_samples).collect();
    let plot = tsne_embed(&mut model, &records, &cfg.explain.tsne).map_err(|e| match e {
        advblur::Error::InvalidConfig { key, message } => anyhow::Error::new(ConfigError::new(format!("explain.{key}"), message)),
        other => other.into(),
    })?;
    let (csv, png) = write_embedding(&plot, &out.join("embedding"))?;
    Ok(json!({ "test_set": set, "points": records.len(), "csv": csv, "png": png }))
}

fn ablate_cmd(cfg: &RunConfig, l: &Paths) -> Result<Value> {
    let originals = load_originals(cfg, l)?;
    let spec = AblationSpec {
        axis: cfg.ablation.axis,
        variants: ablation_variants(cfg),
        base_config: cfg.train.clone(),
        protocols: if cfg.ablation.protocols.is_empty() { vec![cfg.split.clone()] } else { cfg.ablation.protocols.clone() },
    };
    let outcome = run_ablation(&spec, &originals, &cfg.output_root)?;
    for (_, t) in &outcome.tables {
        println!("{}", t.text);
    }
    let results: Vec<Value> = outcome
        .results
        .iter()
        .map(|r| json!({ "variant": r.variant, "protocol": r.protocol, "average": r.report.average, "config_hash": r.config_hash }))
        .collect();
    let tables: HashMap<&str, &Path> = outcome.tables.iter().map(|(p, t)| (p.as_str(), t.text_path.as_path())).collect();
    Ok(json!({ "axis": spec.axis.as_str(), "results": results, "tables": tables }))
}

fn report_cmd(cfg: &RunConfig, l: &Paths, out: &Path) -> Result<Value> {
    let mut reports = Vec::new();
    for path in l.report_inputs(cfg) {
        if !path.is_file() {
            return Err(ConfigError::new("report.inputs", format!("{} does not exist", path.display())).into());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        match v {
            Value::Array(items) => {
                for item in items {
                    reports.push(serde_json::from_value::<EvalReport>(item)?);
                }
            }
            other => reports.push(serde_json::from_value(other)?),
        }
    }
    let layout = cfg.report.layout.unwrap_or(cfg.eval.layout);
    let table = render_report(&reports, layout, &out.join("table"))?;
    println!("{}", table.text);
    Ok(json!({ "layout": layout, "table_csv": table.csv_path, "table_text": table.text_path }))
}
