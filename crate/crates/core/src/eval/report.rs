use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::intervals::{interval_mae, record_intervals, IntervalErrors};
use super::metrics::{miou, Confusion, MiouClasses};
use crate::dsp::PreparedExample;
use crate::error::{Error, Result};
use crate::ingest::{DelineationMask, ReferenceIntervals, NUM_CLASSES};

/// Anything that maps signals to dense class predictions.
pub trait Segmenter {
    /// One label per input sample for every signal in the batch.
    fn segment(&self, signals: &[&[f32]]) -> Result<Vec<Vec<u8>>>;
}

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "P", "QRS", "T"];

/// Segmentation and interval metrics of one model on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by class name; `None` when the class is absent on both sides.
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    /// `None` for interval-only evaluation sets.
    pub miou: Option<f64>,
    pub mae_ms: IntervalErrors,
    pub confusion: Confusion,
    pub n_records: usize,
}

impl MetricsReport {
    pub fn iou(&self, class: usize) -> Option<f64> {
        self.per_class_iou.get(CLASS_NAMES[class]).copied().flatten()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub classes: MiouClasses,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            classes: MiouClasses::All,
            batch_size: 16,
        }
    }
}

/// Builds a report from per-record predictions. Confusion counts cover every
/// position; interval extraction only looks at the unpadded region.
pub fn report_from_predictions(
    samples: &[PreparedExample],
    predictions: &[Vec<u8>],
    fs: f64,
    classes: MiouClasses,
) -> Result<MetricsReport> {
    if samples.len() != predictions.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut conf = Confusion::default();
    let mut any_mask = false;
    let mut pred_iv = BTreeMap::new();
    let mut ref_iv: BTreeMap<String, ReferenceIntervals> = BTreeMap::new();
    for (sample, pred) in samples.iter().zip(predictions) {
        if let Some(truth) = &sample.mask {
            conf.record(pred, truth)?;
            any_mask = true;
        }
        let reference = match (&sample.mask, &sample.intervals) {
            (Some(truth), _) => Some(record_intervals(
                &DelineationMask::new(truth[..sample.valid_len].to_vec())?,
                fs,
            )),
            (None, Some(iv)) => Some(*iv),
            (None, None) => None,
        };
        if let Some(reference) = reference {
            let valid = pred[..sample.valid_len.min(pred.len())].to_vec();
            pred_iv.insert(sample.key.clone(), record_intervals(&DelineationMask::new(valid)?, fs));
            ref_iv.insert(sample.key.clone(), reference);
        }
    }
    let (per_class, miou_value) = if any_mask {
        let (per, m) = miou(&conf, classes)?;
        (per, Some(m))
    } else {
        ([None; NUM_CLASSES], None)
    };
    Ok(MetricsReport {
        per_class_iou: CLASS_NAMES
            .iter()
            .zip(per_class)
            .map(|(n, v)| (n.to_string(), v))
            .collect(),
        miou: miou_value,
        mae_ms: interval_mae(&pred_iv, &ref_iv),
        confusion: conf,
        n_records: samples.len(),
    })
}

/// Runs the model over `samples` in batches and scores its argmax predictions.
pub fn evaluate(
    model: &dyn Segmenter,
    samples: &[PreparedExample],
    fs: f64,
    options: EvalOptions,
) -> Result<MetricsReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(options.batch_size.max(1)) {
        let signals: Vec<&[f32]> = chunk.iter().map(|s| s.signal.as_slice()).collect();
        predictions.extend(model.segment(&signals)?);
    }
    report_from_predictions(samples, &predictions, fs, options.classes)
}

/// One flat result row: run identity plus the report's headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub algorithm: String,
    pub backbone: String,
    pub ratio: String,
    pub seed: u64,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
    #[serde(rename = "IoU_P")]
    pub iou_p: Option<f64>,
    #[serde(rename = "IoU_QRS")]
    pub iou_qrs: Option<f64>,
    #[serde(rename = "IoU_T")]
    pub iou_t: Option<f64>,
    #[serde(rename = "IoU_BG")]
    pub iou_bg: Option<f64>,
    #[serde(rename = "MAE_PR")]
    pub mae_pr: Option<f64>,
    #[serde(rename = "MAE_QRS")]
    pub mae_qrs: Option<f64>,
    #[serde(rename = "MAE_QT")]
    pub mae_qt: Option<f64>,
    #[serde(rename = "MAE_Avg")]
    pub mae_avg: Option<f64>,
    pub coverage_pr: f64,
    pub coverage_qrs: f64,
    pub coverage_qt: f64,
}

impl MetricsRow {
    pub fn new(dataset: &str, algorithm: &str, backbone: &str, ratio: &str, seed: u64, report: &MetricsReport) -> Self {
        Self {
            dataset: dataset.to_string(),
            algorithm: algorithm.to_string(),
            backbone: backbone.to_string(),
            ratio: ratio.to_string(),
            seed,
            miou: report.miou,
            iou_p: report.iou(1),
            iou_qrs: report.iou(2),
            iou_t: report.iou(3),
            iou_bg: report.iou(0),
            mae_pr: report.mae_ms.pr,
            mae_qrs: report.mae_ms.qrs,
            mae_qt: report.mae_ms.qt,
            mae_avg: report.mae_ms.avg,
            coverage_pr: report.mae_ms.coverage_pr,
            coverage_qrs: report.mae_ms.coverage_qrs,
            coverage_qt: report.mae_ms.coverage_qt,
        }
    }

    pub fn to_csv_line(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(self).map_err(|e| Error::parse("metrics row", e))?;
        let bytes = w.into_inner().map_err(|e| Error::parse("metrics row", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn write_rows(path: &std::path::Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_rows(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path.display().to_string(), e)))
        .collect()
}
