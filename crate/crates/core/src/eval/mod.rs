//! Accuracy evaluation, multi-seed aggregation, the blurred-input uniformity
//! diagnostic and table rendering.

mod report;

use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::loss::{blurred_image_loss, softmax, LossConfig, NUM_GRADES};
use crate::train::{argmax_grades, ModelBundle};

pub use report::{format_one_decimal, render_report, round_half_up, Layout, RenderedTable, MASKED_ROW, NORMAL_ROW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub domain: String,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    /// Spread over seeds, present on aggregated reports.
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hashes: Vec<String>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean of the row accuracies.
    pub average: f64,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, provenance: Provenance) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Eval("report has no rows".into()));
        }
        for r in &rows {
            if !(0.0..=100.0).contains(&r.accuracy) {
                return Err(Error::Eval(format!("accuracy {} for {} is outside [0, 100]", r.accuracy, r.domain)));
            }
            if r.n == 0 {
                return Err(Error::Eval(format!("row {} has no samples", r.domain)));
            }
        }
        let average = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
        Ok(Self { rows, average, provenance })
    }

    /// Every row's method tag replaced by `method`.
    pub fn with_method(mut self, method: &str) -> Self {
        for r in &mut self.rows {
            r.method = method.to_string();
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
    pub n: usize,
}

/// Percentage of predictions equal to their labels.
pub fn accuracy_percent(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Eval("prediction/label count mismatch".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub(crate) fn check_graded(records: &[ImageRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    if let Some(r) = records.iter().find(|r| usize::from(r.label) >= NUM_GRADES) {
        return Err(Error::Eval(format!("test set contains a record with label {} ({})", r.label, r.image_path.display())));
    }
    Ok(())
}

/// Top-1 accuracy of the model over real grades on `test_set`.
pub fn evaluate(model: &mut ModelBundle, domain: &str, test_set: &[ImageRecord]) -> Result<DomainAccuracy> {
    check_graded(test_set)?;
    let (logits, _) = model.infer_records(test_set)?;
    let labels: Vec<usize> = test_set.iter().map(|r| usize::from(r.label)).collect();
    Ok(DomainAccuracy {
        domain: domain.to_string(),
        accuracy: accuracy_percent(&argmax_grades(&logits), &labels)?,
        n: labels.len(),
    })
}

/// Per-row mean and population standard deviation across seeds.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.len() < 2 {
        return Err(Error::Eval(format!("need at least 2 reports to aggregate, got {}", reports.len())));
    }
    let key = |r: &EvalReport| -> Vec<(String, String)> { r.rows.iter().map(|x| (x.method.clone(), x.domain.clone())).collect() };
    let first = key(&reports[0]);
    if let Some(bad) = reports.iter().position(|r| key(r) != first) {
        return Err(Error::Eval(format!("report {bad} has different rows than report 0")));
    }
    let k = reports.len() as f64;
    let rows = (0..first.len())
        .map(|i| {
            let values: Vec<f64> = reports.iter().map(|r| r.rows[i].accuracy).collect();
            let mean = values.iter().sum::<f64>() / k;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
            let base = &reports[0].rows[i];
            EvalRow { method: base.method.clone(), domain: base.domain.clone(), accuracy: mean, std: Some(var.sqrt()), n: base.n }
        })
        .collect();
    let mut provenance = Provenance::default();
    for r in reports {
        for h in &r.provenance.config_hashes {
            if !provenance.config_hashes.contains(h) {
                provenance.config_hashes.push(h.clone());
            }
        }
        provenance.seeds.extend(&r.provenance.seeds);
    }
    EvalReport::new(rows, provenance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityDiagnostic {
    pub mean_max_softmax: f64,
    pub mean_bi_loss: f64,
    pub n: usize,
}

/// Uniformity statistics of the real-grade softmax for a batch of logits.
pub fn uniformity_from_logits(logits: &ndarray::Array2<f32>, cfg: &LossConfig) -> Result<UniformityDiagnostic> {
    if logits.nrows() == 0 {
        return Err(Error::Eval("empty blurred set".into()));
    }
    let (mut max_sum, mut loss_sum) = (0f64, 0f64);
    for row in logits.rows() {
        let z: Vec<f64> = row.iter().take(cfg.num_classes).map(|&v| f64::from(v)).collect();
        let p = softmax(&z)?;
        max_sum += p.iter().copied().fold(0.0, f64::max);
        loss_sum += blurred_image_loss(&z, cfg)?;
    }
    let n = logits.nrows();
    Ok(UniformityDiagnostic { mean_max_softmax: max_sum / n as f64, mean_bi_loss: loss_sum / n as f64, n })
}

/// Runs the model on blurred twins and reports how close its real-grade
/// softmax is to uniform.
pub fn uniformity_diagnostic(model: &mut ModelBundle, blurred_set: &[ImageRecord]) -> Result<UniformityDiagnostic> {
    if blurred_set.is_empty() {
        return Err(Error::Eval("empty blurred set".into()));
    }
    if let Some(r) = blurred_set.iter().find(|r| !r.is_blurred()) {
        return Err(Error::Eval(format!("{} is not a blurred record", r.image_path.display())));
    }
    let (logits, _) = model.infer_records(blurred_set)?;
    let cfg = model.meta.config.loss.clone();
    uniformity_from_logits(&logits, &cfg)
}
