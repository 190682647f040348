//! Wave spans, beat association and PR/QRS/QT measurement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ingest::{DelineationMask, ReferenceIntervals, BACKGROUND};

/// Waveform classes that can be delineated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WaveClass {
    P,
    #[serde(rename = "QRS")]
    Qrs,
    T,
}

impl WaveClass {
    pub const ALL: [WaveClass; 3] = [WaveClass::P, WaveClass::Qrs, WaveClass::T];

    /// Class id used in masks.
    pub fn label(self) -> u8 {
        match self {
            WaveClass::P => 1,
            WaveClass::Qrs => 2,
            WaveClass::T => 3,
        }
    }

    pub fn from_label(label: u8) -> Option<WaveClass> {
        match label {
            1 => Some(WaveClass::P),
            2 => Some(WaveClass::Qrs),
            3 => Some(WaveClass::T),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WaveClass::P => "P",
            WaveClass::Qrs => "QRS",
            WaveClass::T => "T",
        }
    }
}

/// A contiguous wave region; `offset_idx` is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WaveSpan {
    pub wave_class: WaveClass,
    pub onset_idx: usize,
    pub offset_idx: usize,
}

impl WaveSpan {
    pub fn new(wave_class: WaveClass, onset_idx: usize, offset_idx: usize) -> Self {
        Self {
            wave_class,
            onset_idx,
            offset_idx,
        }
    }

    pub fn len(&self) -> usize {
        self.offset_idx - self.onset_idx + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Beat {
    pub p: Option<WaveSpan>,
    pub qrs: WaveSpan,
    pub t: Option<WaveSpan>,
}

/// Measured intervals. Fields are absent when the waves defining them are.
pub type IntervalMeasurement = ReferenceIntervals;

/// Maximal runs of non-background labels, in temporal order.
pub fn mask_runs(mask: &DelineationMask) -> Vec<WaveSpan> {
    let labels = mask.labels();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let label = labels[i];
        let start = i;
        while i < labels.len() && labels[i] == label {
            i += 1;
        }
        if label != BACKGROUND {
            let class = WaveClass::from_label(label).expect("mask labels are validated");
            spans.push(WaveSpan::new(class, start, i - 1));
        }
    }
    spans
}

/// Runs of non-background labels lasting at least `min_dur_ms`.
pub fn mask_to_spans(mask: &DelineationMask, fs: f64, min_dur_ms: f64) -> Vec<WaveSpan> {
    mask_runs(mask)
        .into_iter()
        .filter(|s| s.len() as f64 * 1000.0 / fs >= min_dur_ms)
        .collect()
}

/// Maximum P onset to QRS onset distance for a P wave to join a beat.
pub const P_WINDOW_MS: f64 = 400.0;
/// Maximum QRS onset to T offset distance for a T wave to join a beat.
pub const T_WINDOW_MS: f64 = 600.0;

/// Anchors one beat on every QRS span and attaches the nearest admissible
/// P and T waves. Each P/T span joins at most one beat.
pub fn group_beats(spans: &[WaveSpan], fs: f64) -> Vec<Beat> {
    let ms = |samples: usize| samples as f64 * 1000.0 / fs;
    let mut p_used = vec![false; spans.len()];
    let mut t_used = vec![false; spans.len()];
    let mut beats = Vec::new();
    for qrs in spans.iter().filter(|s| s.wave_class == WaveClass::Qrs) {
        let p = spans
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                s.wave_class == WaveClass::P
                    && !p_used[*i]
                    && s.offset_idx < qrs.onset_idx
                    && ms(qrs.onset_idx - s.onset_idx) <= P_WINDOW_MS
            })
            .max_by_key(|(_, s)| s.offset_idx)
            .map(|(i, s)| {
                p_used[i] = true;
                *s
            });
        let t = spans
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                s.wave_class == WaveClass::T
                    && !t_used[*i]
                    && s.onset_idx > qrs.offset_idx
                    && ms(s.offset_idx - qrs.onset_idx) <= T_WINDOW_MS
            })
            .min_by_key(|(_, s)| s.onset_idx)
            .map(|(i, s)| {
                t_used[i] = true;
                *s
            });
        beats.push(Beat { p, qrs: *qrs, t });
    }
    beats
}

pub fn beat_intervals(beat: &Beat, fs: f64) -> IntervalMeasurement {
    let ms = |samples: usize| samples as f64 * 1000.0 / fs;
    IntervalMeasurement {
        pr_ms: beat.p.map(|p| ms(beat.qrs.onset_idx - p.onset_idx)),
        qrs_ms: Some(ms(beat.qrs.len())),
        qt_ms: beat.t.map(|t| ms(t.offset_idx - beat.qrs.onset_idx + 1)),
    }
}

/// Minimum run length kept before interval extraction.
pub const MIN_SPAN_MS: f64 = 20.0;

/// Record-level intervals: per-interval median over the beats defining it.
pub fn record_intervals(mask: &DelineationMask, fs: f64) -> IntervalMeasurement {
    let spans = mask_to_spans(mask, fs, MIN_SPAN_MS);
    let per_beat: Vec<IntervalMeasurement> = group_beats(&spans, fs)
        .iter()
        .map(|b| beat_intervals(b, fs))
        .collect();
    let collect = |f: fn(&IntervalMeasurement) -> Option<f64>| {
        median(per_beat.iter().filter_map(f).collect())
    };
    IntervalMeasurement {
        pr_ms: collect(|m| m.pr_ms),
        qrs_ms: collect(|m| m.qrs_ms),
        qt_ms: collect(|m| m.qt_ms),
    }
}

pub(crate) fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Interval MAEs and the fraction of records where both sides define each interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalErrors {
    pub pr: Option<f64>,
    pub qrs: Option<f64>,
    pub qt: Option<f64>,
    /// Mean of the three MAEs; undefined when any of them is.
    pub avg: Option<f64>,
    pub coverage_pr: f64,
    pub coverage_qrs: f64,
    pub coverage_qt: f64,
}

/// Mean absolute error per interval over the records present in both maps.
pub fn interval_mae(
    predictions: &BTreeMap<String, IntervalMeasurement>,
    references: &BTreeMap<String, ReferenceIntervals>,
) -> IntervalErrors {
    let keys: Vec<&String> = predictions.keys().filter(|k| references.contains_key(*k)).collect();
    let reduce = |f: fn(&ReferenceIntervals) -> Option<f64>| -> (Option<f64>, f64) {
        let errors: Vec<f64> = keys
            .iter()
            .filter_map(|k| match (f(&predictions[*k]), f(&references[*k])) {
                (Some(p), Some(r)) => Some((p - r).abs()),
                _ => None,
            })
            .collect();
        let coverage = if keys.is_empty() {
            0.0
        } else {
            errors.len() as f64 / keys.len() as f64
        };
        let mae = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
        (mae, coverage)
    };
    let (pr, coverage_pr) = reduce(|m| m.pr_ms);
    let (qrs, coverage_qrs) = reduce(|m| m.qrs_ms);
    let (qt, coverage_qt) = reduce(|m| m.qt_ms);
    let avg = match (pr, qrs, qt) {
        (Some(a), Some(b), Some(c)) => Some((a + b + c) / 3.0),
        _ => None,
    };
    IntervalErrors {
        pr,
        qrs,
        qt,
        avg,
        coverage_pr,
        coverage_qrs,
        coverage_qt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::spans_to_mask;

    const FS: f64 = 250.0;

    fn sp(c: WaveClass, on: usize, off: usize) -> WaveSpan {
        WaveSpan::new(c, on, off)
    }

    #[test]
    fn all_background_has_no_spans() {
        assert!(mask_to_spans(&DelineationMask::background(300), FS, MIN_SPAN_MS).is_empty());
    }

    #[test]
    fn short_blip_is_dropped() {
        let mask = spans_to_mask(&[sp(WaveClass::Qrs, 40, 41), sp(WaveClass::T, 80, 100)], 200).unwrap();
        let spans = mask_to_spans(&mask, FS, MIN_SPAN_MS);
        assert_eq!(spans, vec![sp(WaveClass::T, 80, 100)]);
        assert_eq!(mask_runs(&mask).len(), 2);
    }

    #[test]
    fn single_clean_beat() {
        let spans = [sp(WaveClass::P, 10, 20), sp(WaveClass::Qrs, 50, 70), sp(WaveClass::T, 90, 140)];
        let beats = group_beats(&spans, FS);
        assert_eq!(beats.len(), 1);
        assert_eq!(beats[0].p, Some(spans[0]));
        assert_eq!(beats[0].t, Some(spans[2]));
    }

    #[test]
    fn p_wave_joins_only_the_first_of_two_qrs() {
        // Enumerated by hand: P(10,20) is within 400 ms of both QRS onsets,
        // the first QRS claims it, so the second beat has no P.
        let spans = [sp(WaveClass::P, 10, 20), sp(WaveClass::Qrs, 50, 70), sp(WaveClass::Qrs, 90, 110)];
        let beats = group_beats(&spans, FS);
        assert_eq!(beats.len(), 2);
        assert_eq!(beats[0].p, Some(spans[0]));
        assert_eq!(beats[1].p, None);
    }

    #[test]
    fn distant_p_wave_is_not_assigned() {
        // 500 ms = 125 samples at 250 Hz between P onset and QRS onset.
        let spans = [sp(WaveClass::P, 0, 20), sp(WaveClass::Qrs, 125, 145)];
        assert_eq!(group_beats(&spans, FS)[0].p, None);
    }

    #[test]
    fn beat_interval_arithmetic() {
        let beat = Beat {
            p: Some(sp(WaveClass::P, 10, 30)),
            qrs: sp(WaveClass::Qrs, 50, 72),
            t: Some(sp(WaveClass::T, 90, 144)),
        };
        let m = beat_intervals(&beat, FS);
        assert_eq!(m.pr_ms, Some(160.0));
        assert_eq!(m.qrs_ms, Some(92.0));
        assert_eq!(m.qt_ms, Some(380.0));
        let no_p = Beat { p: None, ..beat };
        assert_eq!(beat_intervals(&no_p, FS).pr_ms, None);
    }

    fn beat_spans(start: usize, qrs_len: usize) -> [WaveSpan; 3] {
        [
            sp(WaveClass::P, start, start + 20),
            sp(WaveClass::Qrs, start + 40, start + 40 + qrs_len - 1),
            sp(WaveClass::T, start + 70, start + 134),
        ]
    }

    #[test]
    fn median_ignores_one_outlier_beat() {
        let mut spans = Vec::new();
        for k in 0..10 {
            let qrs_len = if k == 4 { 28 } else { 23 };
            spans.extend(beat_spans(k * 250, qrs_len));
        }
        let mask = spans_to_mask(&spans, 2500).unwrap();
        let m = record_intervals(&mask, FS);
        assert_eq!(m.qrs_ms, Some(92.0));
        assert_eq!(m.pr_ms, Some(160.0));
        assert_eq!(m.qt_ms, Some(380.0));
    }

    #[test]
    fn no_qrs_means_no_intervals() {
        let mask = spans_to_mask(&[sp(WaveClass::P, 10, 30), sp(WaveClass::T, 100, 150)], 300).unwrap();
        assert!(record_intervals(&mask, FS).is_empty());
    }

    fn iv(pr: f64, qrs: f64, qt: f64) -> ReferenceIntervals {
        ReferenceIntervals {
            pr_ms: Some(pr),
            qrs_ms: Some(qrs),
            qt_ms: Some(qt),
        }
    }

    #[test]
    fn identical_intervals_give_zero_error() {
        let m: BTreeMap<String, _> = [("a".to_string(), iv(160.0, 90.0, 380.0))].into();
        let e = interval_mae(&m, &m);
        assert_eq!((e.pr, e.qrs, e.qt, e.avg), (Some(0.0), Some(0.0), Some(0.0), Some(0.0)));
        assert_eq!(e.coverage_pr, 1.0);
    }

    #[test]
    fn pr_error_is_absolute_difference() {
        let p: BTreeMap<String, _> = [("a".to_string(), iv(160.0, 90.0, 380.0))].into();
        let r: BTreeMap<String, _> = [("a".to_string(), iv(172.0, 90.0, 380.0))].into();
        assert_eq!(interval_mae(&p, &r).pr, Some(12.0));
    }

    #[test]
    fn average_is_mean_of_three() {
        // Errors of 13.1, 9.7 and 21.9 ms average to 14.9 ms.
        let p: BTreeMap<String, _> = [("a".to_string(), iv(13.1, 9.7, 21.9 + 100.0))].into();
        let r: BTreeMap<String, _> = [("a".to_string(), iv(0.0, 0.0, 100.0))].into();
        let e = interval_mae(&p, &r);
        assert!((e.avg.unwrap() - 14.9).abs() < 1e-9);
    }

    #[test]
    fn undefined_interval_reduces_coverage() {
        let p: BTreeMap<String, _> = [
            ("a".to_string(), iv(160.0, 90.0, 380.0)),
            ("b".to_string(), ReferenceIntervals { pr_ms: None, ..iv(0.0, 90.0, 380.0) }),
        ]
        .into();
        let e = interval_mae(&p, &p);
        assert_eq!(e.coverage_pr, 0.5);
        assert_eq!(e.coverage_qrs, 1.0);
    }
}
