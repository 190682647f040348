//! Segmentation metrics (per-class IoU, mIoU) and clinical interval metrics
//! (beat-wise PR/QRS/QT extraction and MAE).

mod intervals;
mod metrics;
mod report;

pub use intervals::{
    beat_intervals, group_beats, interval_mae, mask_runs, mask_to_spans, record_intervals, Beat,
    IntervalErrors, IntervalMeasurement, WaveClass, WaveSpan, MIN_SPAN_MS, P_WINDOW_MS,
    T_WINDOW_MS,
};
pub use metrics::{confusion, miou, Confusion, MiouClasses};
pub use report::{
    evaluate, read_rows, report_from_predictions, write_rows, EvalOptions, MetricsReport,
    MetricsRow, Segmenter, CLASS_NAMES,
};
