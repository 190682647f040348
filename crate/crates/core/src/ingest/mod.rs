//! Canonical dataset format, dataset adapters, subject-wise splitting and
//! label-ratio subsampling.

pub mod adapters;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::WaveSpan;

pub use manifest::{
    load_dataset, merge_datasets, DatasetHandle, DatasetInfo, DatasetWriter, LabelType,
    ManifestEntry, SpanEntry, BLOB_FILE, INFO_FILE, MANIFEST_FILE, SPLIT_FILE,
};
pub(crate) use manifest::write_json;

/// Class id of unlabeled positions.
pub const BACKGROUND: u8 = 0;
/// Number of segmentation classes: background, P, QRS, T.
pub const NUM_CLASSES: usize = 4;

/// A single-lead ECG signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub subject_id: String,
    pub dataset_id: String,
    pub lead_id: String,
    pub fs_hz: f64,
    /// Millivolts.
    pub samples: Vec<f32>,
}

impl EcgRecord {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Validation(format!(
                "record `{}` lead `{}` has no samples",
                self.record_id, self.lead_id
            )));
        }
        if !(self.fs_hz > 0.0) {
            return Err(Error::Validation(format!(
                "record `{}` has non-positive sampling rate {}",
                self.record_id, self.fs_hz
            )));
        }
        Ok(())
    }

    /// `dataset_id/record_id`, unique across merged datasets.
    pub fn qualified_id(&self) -> String {
        qualify(&self.dataset_id, &self.record_id)
    }

    pub fn qualified_subject(&self) -> String {
        qualify(&self.dataset_id, &self.subject_id)
    }
}

pub(crate) fn qualify(dataset_id: &str, id: &str) -> String {
    format!("{dataset_id}/{id}")
}

/// Per-sample class labels over {0=background, 1=P, 2=QRS, 3=T}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelineationMask(Vec<u8>);

impl DelineationMask {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some((i, v)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= NUM_CLASSES)
        {
            return Err(Error::Validation(format!(
                "mask value {v} at index {i} is not a class id"
            )));
        }
        Ok(Self(labels))
    }

    pub fn background(len: usize) -> Self {
        Self(vec![BACKGROUND; len])
    }

    pub fn labels(&self) -> &[u8] {
        &self.0
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Set of class ids that occur in the mask.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.0.iter().copied().collect()
    }
}

/// Reference or measured PR/QRS/QT durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceIntervals {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qrs_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qt_ms: Option<f64>,
}

impl ReferenceIntervals {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pr", self.pr_ms), ("qrs", self.qrs_ms), ("qt", self.qt_ms)] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(Error::Validation(format!("{name}_ms must be non-negative, got {v}")));
                }
            }
        }
        if let (Some(qrs), Some(qt)) = (self.qrs_ms, self.qt_ms) {
            if qrs >= qt {
                return Err(Error::Validation(format!(
                    "qrs_ms ({qrs}) must be shorter than qt_ms ({qt})"
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.pr_ms.is_none() && self.qrs_ms.is_none() && self.qt_ms.is_none()
    }
}

/// A signal with optional dense labels and/or interval labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub record: EcgRecord,
    pub mask: Option<DelineationMask>,
    pub intervals: Option<ReferenceIntervals>,
}

impl LabeledExample {
    pub fn unlabeled(record: EcgRecord) -> Self {
        Self {
            record,
            mask: None,
            intervals: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.record.validate()?;
        if let Some(mask) = &self.mask {
            if mask.len() != self.record.samples.len() {
                return Err(Error::Validation(format!(
                    "record `{}` lead `{}`: mask length {} != signal length {}",
                    self.record.record_id,
                    self.record.lead_id,
                    mask.len(),
                    self.record.samples.len()
                )));
            }
        }
        if let Some(iv) = &self.intervals {
            iv.validate()?;
        }
        Ok(())
    }
}

/// Builds a dense mask from wave spans (inclusive offsets).
pub fn spans_to_mask(spans: &[WaveSpan], length: usize) -> Result<DelineationMask> {
    let mut labels = vec![BACKGROUND; length];
    for span in spans {
        if span.onset_idx > span.offset_idx || span.offset_idx >= length {
            return Err(Error::Validation(format!(
                "span {:?} [{}, {}] out of range for length {length}",
                span.wave_class, span.onset_idx, span.offset_idx
            )));
        }
        let label = span.wave_class.label();
        for (i, slot) in labels[span.onset_idx..=span.offset_idx].iter_mut().enumerate() {
            if *slot != BACKGROUND {
                return Err(Error::Validation(format!(
                    "span {:?} [{}, {}] overlaps an earlier span at index {}",
                    span.wave_class,
                    span.onset_idx,
                    span.offset_idx,
                    span.onset_idx + i
                )));
            }
            *slot = label;
        }
    }
    Ok(DelineationMask(labels))
}

/// Annotation attached to a multi-lead recording before lead expansion.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupAnnotation {
    /// One mask shared by every lead.
    Integrated(DelineationMask),
    /// One (optional) mask per lead, in lead order.
    LeadSpecific(Vec<Option<DelineationMask>>),
    IntervalOnly(ReferenceIntervals),
    Unlabeled,
}

/// All leads of one recording, sharing `record_id` and `subject_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLeadGroup {
    pub leads: Vec<EcgRecord>,
    pub annotation: GroupAnnotation,
}

/// Splits a multi-lead recording into independent single-lead examples.
pub fn expand_leads(group: MultiLeadGroup) -> Result<Vec<LabeledExample>> {
    let MultiLeadGroup { leads, annotation } = group;
    let Some(first) = leads.first() else {
        return Ok(Vec::new());
    };
    let (record_id, subject_id, len) = (
        first.record_id.clone(),
        first.subject_id.clone(),
        first.samples.len(),
    );
    for lead in &leads {
        if lead.record_id != record_id || lead.subject_id != subject_id {
            return Err(Error::Validation(format!(
                "lead `{}` belongs to record `{}`/subject `{}`, expected `{record_id}`/`{subject_id}`",
                lead.lead_id, lead.record_id, lead.subject_id
            )));
        }
        if lead.samples.len() != len {
            return Err(Error::Validation(format!(
                "record `{record_id}`: lead `{}` has {} samples, lead `{}` has {len}",
                lead.lead_id,
                lead.samples.len(),
                first.lead_id
            )));
        }
    }

    let masks: Vec<Option<DelineationMask>> = match &annotation {
        GroupAnnotation::Integrated(mask) => vec![Some(mask.clone()); leads.len()],
        GroupAnnotation::LeadSpecific(masks) => {
            if masks.len() != leads.len() {
                return Err(Error::Validation(format!(
                    "record `{record_id}`: {} lead masks for {} leads",
                    masks.len(),
                    leads.len()
                )));
            }
            masks.clone()
        }
        GroupAnnotation::IntervalOnly(_) | GroupAnnotation::Unlabeled => vec![None; leads.len()],
    };
    let intervals = match annotation {
        GroupAnnotation::IntervalOnly(iv) => Some(iv),
        _ => None,
    };

    leads
        .into_iter()
        .zip(masks)
        .map(|(record, mask)| {
            let example = LabeledExample {
                record,
                mask,
                intervals,
            };
            example.validate()?;
            Ok(example)
        })
        .collect()
}

/// Fraction of the training records that carry labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelRatio {
    Sixteenth,
    Eighth,
    Quarter,
    Half,
}

impl LabelRatio {
    pub const ALL: [LabelRatio; 4] = [
        LabelRatio::Sixteenth,
        LabelRatio::Eighth,
        LabelRatio::Quarter,
        LabelRatio::Half,
    ];

    pub fn value(self) -> f64 {
        match self {
            LabelRatio::Sixteenth => 1.0 / 16.0,
            LabelRatio::Eighth => 1.0 / 8.0,
            LabelRatio::Quarter => 1.0 / 4.0,
            LabelRatio::Half => 1.0 / 2.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LabelRatio::Sixteenth => "1/16",
            LabelRatio::Eighth => "1/8",
            LabelRatio::Quarter => "1/4",
            LabelRatio::Half => "1/2",
        }
    }
}

impl fmt::Display for LabelRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LabelRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelRatio::ALL
            .into_iter()
            .find(|r| r.tag() == s.trim())
            .ok_or_else(|| Error::Validation(format!("unknown label ratio `{s}` (expected 1/16, 1/8, 1/4 or 1/2)")))
    }
}

impl Serialize for LabelRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for LabelRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subject-wise train/val/test partition plus nested labeled subsets.
///
/// Subject and record ids are dataset-qualified (`dataset_id/id`) so that
/// manifests of different datasets can be merged by union.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_subjects: BTreeSet<String>,
    pub val_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    #[serde(default)]
    pub label_subsets: BTreeMap<String, BTreeSet<String>>,
}

impl SplitManifest {
    pub fn split_of(&self, qualified_subject: &str) -> Option<Split> {
        if self.train_subjects.contains(qualified_subject) {
            Some(Split::Train)
        } else if self.val_subjects.contains(qualified_subject) {
            Some(Split::Val)
        } else if self.test_subjects.contains(qualified_subject) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn label_subset(&self, ratio: LabelRatio) -> Option<&BTreeSet<String>> {
        self.label_subsets.get(ratio.tag())
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            (&self.train_subjects, &self.val_subjects, "train/val"),
            (&self.train_subjects, &self.test_subjects, "train/test"),
            (&self.val_subjects, &self.test_subjects, "val/test"),
        ];
        for (a, b, name) in pairs {
            if let Some(s) = a.intersection(b).next() {
                return Err(Error::Validation(format!("subject `{s}` appears in both {name} splits")));
            }
        }
        let mut prev: Option<&BTreeSet<String>> = None;
        for ratio in LabelRatio::ALL {
            if let Some(cur) = self.label_subset(ratio) {
                if let Some(p) = prev {
                    if !p.is_subset(cur) {
                        return Err(Error::Validation(format!(
                            "label subset {} does not contain the smaller subsets",
                            ratio.tag()
                        )));
                    }
                }
                prev = Some(cur);
            }
        }
        Ok(())
    }

    /// Union of two manifests over disjoint datasets.
    pub fn union(&self, other: &SplitManifest) -> SplitManifest {
        let mut out = self.clone();
        out.train_subjects.extend(other.train_subjects.iter().cloned());
        out.val_subjects.extend(other.val_subjects.iter().cloned());
        out.test_subjects.extend(other.test_subjects.iter().cloned());
        for (tag, ids) in &other.label_subsets {
            out.label_subsets
                .entry(tag.clone())
                .or_default()
                .extend(ids.iter().cloned());
        }
        out
    }
}

/// Split sizes for `n` items: validation and test are rounded to nearest,
/// train takes the remainder so the total is preserved.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let mut val = (n as f64 * ratios.1 / total).round() as usize;
    let mut test = (n as f64 * ratios.2 / total).round() as usize;
    if n >= 3 {
        val = val.max(1);
        test = test.max(1);
    }
    while val + test >= n && n > 0 {
        if val >= test && val > 0 {
            val -= 1;
        } else if test > 0 {
            test -= 1;
        } else {
            break;
        }
    }
    (n - val - test, val, test)
}

/// Deterministic subject-wise split.
pub fn subject_split(
    subject_ids: &BTreeSet<String>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    if subject_ids.len() < 3 {
        return Err(Error::Validation(format!(
            "subject split needs at least 3 subjects, got {}",
            subject_ids.len()
        )));
    }
    let mut subjects: Vec<&String> = subject_ids.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(subjects.len(), ratios);
    let take = |range: std::ops::Range<usize>| -> BTreeSet<String> {
        subjects[range].iter().map(|s| (*s).clone()).collect()
    };
    Ok(SplitManifest {
        train_subjects: take(0..n_train),
        val_subjects: take(n_train..n_train + n_val),
        test_subjects: take(n_train + n_val..subjects.len()),
        label_subsets: BTreeMap::new(),
    })
}

/// Number of labeled records for `n` training records: `max(1, round(ratio·n))`.
pub fn label_subset_size(n: usize, ratio: LabelRatio) -> usize {
    ((ratio.value() * n as f64).round() as usize).max(1).min(n)
}

/// Draws the labeled subset for one ratio. The same seed shuffles the same
/// permutation for every ratio, so subsets are nested prefixes.
pub fn sample_label_subset(
    train_records: &[String],
    ratio: LabelRatio,
    seed: u64,
) -> Result<BTreeSet<String>> {
    if train_records.is_empty() {
        return Err(Error::Validation("cannot sample a label subset from no records".into()));
    }
    let unique: BTreeSet<&String> = train_records.iter().collect();
    let mut ids: Vec<&String> = unique.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = label_subset_size(ids.len(), ratio);
    Ok(ids[..n].iter().map(|s| (*s).clone()).collect())
}

/// Fills `split.label_subsets` for all four ratios from the given train records.
pub fn assign_label_subsets(split: &mut SplitManifest, train_records: &[String], seed: u64) -> Result<()> {
    split.label_subsets.clear();
    if train_records.is_empty() {
        return Ok(());
    }
    for ratio in LabelRatio::ALL {
        let subset = sample_label_subset(train_records, ratio, seed)?;
        split.label_subsets.insert(ratio.tag().to_string(), subset);
    }
    Ok(())
}
