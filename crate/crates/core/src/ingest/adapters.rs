//! Converters from third-party corpus layouts into the canonical format.
//!
//! Two layouts ship with the crate:
//!
//! * `wfdb`: PhysioNet-style `.hea` headers with format 16 or 212 signal
//!   files and MIT binary annotations carrying `(`/`)` wave boundaries. An
//!   annotation file named after a lead (`rec.ii`) labels that lead only;
//!   otherwise the first of the configured annotator extensions labels all
//!   leads. Long records are cut into non-overlapping windows.
//! * `csv`: `records.csv` plus one single-column CSV per lead, an optional
//!   `spans.csv` (lead `*` = all leads) and an optional `intervals.csv`.
//!
//! Both accept an optional `split.csv` (`subject_id,split`) that is taken
//! verbatim as the official split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    assign_label_subsets, expand_leads, qualify, spans_to_mask, subject_split, DatasetInfo,
    DatasetWriter, DelineationMask, EcgRecord, GroupAnnotation, LabelType, LabeledExample,
    MultiLeadGroup, ReferenceIntervals, Split, SplitManifest, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{WaveClass, WaveSpan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterOptions {
    /// Defaults to the raw directory's name.
    pub dataset_id: Option<String>,
    pub split_seed: u64,
    /// Window length for cutting long annotated records.
    pub window_s: f64,
    /// Integrated annotation extensions tried in order (wfdb only).
    pub annotators: Vec<String>,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        Self {
            dataset_id: None,
            split_seed: 0,
            window_s: 10.0,
            annotators: vec!["atr".into(), "q1c".into(), "pu".into()],
        }
    }
}

pub trait Adapter {
    fn name(&self) -> &'static str;
    /// Reads every record group under `raw_dir`.
    fn read(&self, raw_dir: &Path, options: &AdapterOptions) -> Result<Vec<RecordGroup>>;
}

/// A raw recording after parsing, before lead expansion.
#[derive(Debug, Clone)]
pub struct RecordGroup {
    pub group: MultiLeadGroup,
}

pub fn registry() -> Vec<Box<dyn Adapter>> {
    vec![Box::new(WfdbAdapter), Box::new(CsvAdapter)]
}

pub fn adapter_names() -> Vec<&'static str> {
    registry().iter().map(|a| a.name()).collect()
}

pub fn find_adapter(name: &str) -> Result<Box<dyn Adapter>> {
    registry()
        .into_iter()
        .find(|a| a.name() == name)
        .ok_or_else(|| {
            Error::Validation(format!(
                "unknown adapter `{name}`; registered adapters: {}",
                adapter_names().join(", ")
            ))
        })
}

/// Converts `raw_dir` with the named adapter and writes a canonical dataset
/// (manifest, blob, metadata, split) to `out_dir`. Nothing is left in
/// `out_dir` when any record fails.
pub fn convert(adapter_name: &str, raw_dir: &Path, out_dir: &Path, options: &AdapterOptions) -> Result<PathBuf> {
    let adapter = find_adapter(adapter_name)?;
    let dataset_id = options.dataset_id.clone().unwrap_or_else(|| {
        raw_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let groups = adapter.read(raw_dir, options)?;
    if groups.is_empty() {
        return Err(Error::Validation(format!("no records found under {}", raw_dir.display())));
    }

    let mut examples = Vec::new();
    let mut problems = Vec::new();
    for g in groups {
        let record_id = g.group.leads.first().map(|l| l.record_id.clone()).unwrap_or_default();
        match expand_leads(g.group) {
            Ok(mut ex) => {
                for e in ex.iter_mut() {
                    e.record.dataset_id = dataset_id.clone();
                }
                examples.extend(ex);
            }
            Err(e) => problems.push(format!("{record_id}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!(
            "{} record(s) failed conversion, nothing written:\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }

    let label_type = infer_label_type(&examples);
    let official = read_official_split(raw_dir, &dataset_id)?;
    let subjects: BTreeSet<String> = examples.iter().map(|e| e.record.qualified_subject()).collect();
    let mut split = match &official {
        Some(s) => Some(s.clone()),
        None if subjects.len() >= 3 => Some(subject_split(&subjects, (0.6, 0.2, 0.2), options.split_seed)?),
        None => None,
    };
    if let Some(split) = split.as_mut() {
        if let Some(missing) = subjects.iter().find(|s| split.split_of(s).is_none()) {
            return Err(Error::Validation(format!("official split does not assign subject `{missing}`")));
        }
        if matches!(label_type, LabelType::Integrated | LabelType::LeadSpecific) {
            let train: BTreeSet<String> = examples
                .iter()
                .filter(|e| e.mask.is_some() && split.split_of(&e.record.qualified_subject()) == Some(Split::Train))
                .map(|e| e.record.qualified_id())
                .collect();
            assign_label_subsets(split, &train.into_iter().collect::<Vec<_>>(), options.split_seed)?;
        }
    }

    let staging = staging_dir(out_dir)?;
    let result = (|| {
        let mut writer = DatasetWriter::create(
            &staging,
            DatasetInfo {
                dataset_id: dataset_id.clone(),
                label_type,
                official_split: official.is_some(),
                adapter: adapter.name().to_string(),
            },
        )?;
        for e in &examples {
            writer.add(e)?;
        }
        writer.finish(split.as_ref())
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out_dir.exists() {
        fs::remove_dir_all(out_dir).map_err(Error::io(out_dir))?;
    }
    fs::rename(&staging, out_dir).map_err(Error::io(out_dir))?;
    Ok(out_dir.join(MANIFEST_FILE))
}

/// Sibling directory used while writing. Refuses to clobber a non-empty
/// directory that is not a canonical dataset.
fn staging_dir(out_dir: &Path) -> Result<PathBuf> {
    if out_dir.exists() {
        let is_dataset = out_dir.join(MANIFEST_FILE).exists();
        let is_empty = fs::read_dir(out_dir).map_err(Error::io(out_dir))?.next().is_none();
        if !is_dataset && !is_empty {
            return Err(Error::Validation(format!(
                "{} exists and is not a canonical dataset",
                out_dir.display()
            )));
        }
    }
    let mut name = out_dir.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    let staging = out_dir.with_file_name(name);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(Error::io(&staging))?;
    }
    Ok(staging)
}

fn infer_label_type(examples: &[LabeledExample]) -> LabelType {
    let any_mask = examples.iter().any(|e| e.mask.is_some());
    let any_iv = examples.iter().any(|e| e.intervals.is_some());
    if any_mask {
        // Integrated datasets carry identical masks on every lead of a record.
        let mut by_record: BTreeMap<String, Vec<&Option<DelineationMask>>> = BTreeMap::new();
        for e in examples {
            by_record.entry(e.record.qualified_id()).or_default().push(&e.mask);
        }
        let integrated = by_record.values().all(|m| m.windows(2).all(|w| w[0] == w[1]));
        if integrated {
            LabelType::Integrated
        } else {
            LabelType::LeadSpecific
        }
    } else if any_iv {
        LabelType::IntervalOnly
    } else {
        LabelType::Unlabeled
    }
}

#[derive(Debug, Deserialize)]
struct SplitRow {
    subject_id: String,
    split: String,
}

fn read_official_split(raw_dir: &Path, dataset_id: &str) -> Result<Option<SplitManifest>> {
    let path = raw_dir.join("split.csv");
    if !path.exists() {
        return Ok(None);
    }
    let mut split = SplitManifest::default();
    for row in read_csv::<SplitRow>(&path)? {
        let subject = qualify(dataset_id, &row.subject_id);
        let set = match row.split.trim().to_ascii_lowercase().as_str() {
            "train" => &mut split.train_subjects,
            "val" | "valid" | "validation" => &mut split.val_subjects,
            "test" => &mut split.test_subjects,
            other => {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("subject `{}` has unknown split `{other}`", row.subject_id),
                ))
            }
        };
        set.insert(subject);
    }
    split.validate()?;
    Ok(Some(split))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::parse(path.display().to_string(), e)))
        .collect()
}

// ---------------------------------------------------------------- csv layout

pub struct CsvAdapter;

#[derive(Debug, Deserialize)]
struct RecordRow {
    record_id: String,
    subject_id: String,
    lead_id: String,
    fs_hz: f64,
    signal_file: String,
}

#[derive(Debug, Deserialize)]
struct SpanRow {
    record_id: String,
    lead_id: String,
    class: String,
    onset_idx: usize,
    offset_idx: usize,
}

#[derive(Debug, Deserialize)]
struct IntervalRow {
    record_id: String,
    pr_ms: Option<f64>,
    qrs_ms: Option<f64>,
    qt_ms: Option<f64>,
}

fn read_signal_column(path: &Path) -> Result<Vec<f32>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f32>()
                .map_err(|e| Error::parse(path.display().to_string(), format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn parse_class(name: &str) -> Result<WaveClass> {
    match name.trim().to_ascii_uppercase().as_str() {
        "P" => Ok(WaveClass::P),
        "QRS" | "N" => Ok(WaveClass::Qrs),
        "T" => Ok(WaveClass::T),
        other => Err(Error::parse("spans.csv", format!("unknown wave class `{other}`"))),
    }
}

impl Adapter for CsvAdapter {
    fn name(&self) -> &'static str {
        "csv"
    }

    fn read(&self, raw_dir: &Path, _options: &AdapterOptions) -> Result<Vec<RecordGroup>> {
        let rows: Vec<RecordRow> = read_csv(&raw_dir.join("records.csv"))?;
        let spans_path = raw_dir.join("spans.csv");
        let span_rows: Vec<SpanRow> = if spans_path.exists() { read_csv(&spans_path)? } else { Vec::new() };
        let iv_path = raw_dir.join("intervals.csv");
        let iv_rows: Vec<IntervalRow> = if iv_path.exists() { read_csv(&iv_path)? } else { Vec::new() };

        let mut spans: BTreeMap<(String, String), Vec<WaveSpan>> = BTreeMap::new();
        for s in span_rows {
            spans
                .entry((s.record_id, s.lead_id))
                .or_default()
                .push(WaveSpan::new(parse_class(&s.class)?, s.onset_idx, s.offset_idx));
        }
        let intervals: BTreeMap<String, ReferenceIntervals> = iv_rows
            .into_iter()
            .map(|r| {
                (
                    r.record_id,
                    ReferenceIntervals {
                        pr_ms: r.pr_ms,
                        qrs_ms: r.qrs_ms,
                        qt_ms: r.qt_ms,
                    },
                )
            })
            .collect();

        let mut groups: BTreeMap<String, Vec<EcgRecord>> = BTreeMap::new();
        let mut order = Vec::new();
        for row in rows {
            let samples = read_signal_column(&raw_dir.join(&row.signal_file))
                .map_err(|e| Error::Load {
                    record_id: row.record_id.clone(),
                    reason: e.to_string(),
                })?;
            if !groups.contains_key(&row.record_id) {
                order.push(row.record_id.clone());
            }
            groups.entry(row.record_id.clone()).or_default().push(EcgRecord {
                record_id: row.record_id,
                subject_id: row.subject_id,
                dataset_id: String::new(),
                lead_id: row.lead_id,
                fs_hz: row.fs_hz,
                samples,
            });
        }

        let mut out = Vec::new();
        for record_id in order {
            let leads = groups.remove(&record_id).unwrap_or_default();
            let len = leads.first().map(|l| l.samples.len()).unwrap_or(0);
            let mask_for = |lead: &str| -> Result<Option<DelineationMask>> {
                spans
                    .get(&(record_id.clone(), lead.to_string()))
                    .map(|s| spans_to_mask(s, len))
                    .transpose()
                    .map_err(|e| Error::Validation(format!("record `{record_id}` lead `{lead}`: {e}")))
            };
            let annotation = if let Some(mask) = mask_for("*")? {
                GroupAnnotation::Integrated(mask)
            } else if leads.iter().any(|l| spans.contains_key(&(record_id.clone(), l.lead_id.clone()))) {
                GroupAnnotation::LeadSpecific(
                    leads.iter().map(|l| mask_for(&l.lead_id)).collect::<Result<_>>()?,
                )
            } else if let Some(iv) = intervals.get(&record_id) {
                GroupAnnotation::IntervalOnly(*iv)
            } else {
                GroupAnnotation::Unlabeled
            };
            out.push(RecordGroup {
                group: MultiLeadGroup { leads, annotation },
            });
        }
        Ok(out)
    }
}

// --------------------------------------------------------------- wfdb layout

pub struct WfdbAdapter;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: u32,
    pub gain: f64,
    pub baseline: i32,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfdbHeader {
    pub record_name: String,
    pub fs_hz: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

/// Parses a `.hea` header (single-segment records only).
pub fn parse_header(text: &str) -> Result<WfdbHeader> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let bad = |m: String| Error::parse("wfdb header", m);
    let record_line = lines.next().ok_or_else(|| bad("empty header".into()))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(bad(format!("record line too short: `{record_line}`")));
    }
    if fields[0].contains('/') {
        return Err(bad("multi-segment records are not supported".into()));
    }
    let n_sig: usize = fields[1].parse().map_err(|_| bad(format!("bad signal count `{}`", fields[1])))?;
    let fs_hz = match fields.get(2) {
        Some(f) => f
            .split(['/', '('])
            .next()
            .unwrap_or(f)
            .parse::<f64>()
            .map_err(|_| bad(format!("bad sampling frequency `{f}`")))?,
        None => 250.0,
    };
    let n_samples = match fields.get(3) {
        Some(n) => n.parse().map_err(|_| bad(format!("bad sample count `{n}`")))?,
        None => 0,
    };

    let mut signals = Vec::with_capacity(n_sig);
    for _ in 0..n_sig {
        let line = lines.next().ok_or_else(|| bad("missing signal line".into()))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(bad(format!("signal line too short: `{line}`")));
        }
        let format: u32 = f[1]
            .split(['x', ':', '+'])
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| bad(format!("bad format `{}`", f[1])))?;
        let adc_zero: i32 = f.get(4).and_then(|v| v.parse().ok()).unwrap_or(0);
        let (gain, baseline) = match f.get(2) {
            Some(g) => {
                let head = g.split('/').next().unwrap_or(g);
                let (gain_str, base) = match head.split_once('(') {
                    Some((g, b)) => (g, Some(b.trim_end_matches(')'))),
                    None => (head, None),
                };
                let gain: f64 = gain_str.parse().map_err(|_| bad(format!("bad gain `{g}`")))?;
                let baseline = match base {
                    Some(b) => b.parse().map_err(|_| bad(format!("bad baseline `{g}`")))?,
                    None => adc_zero,
                };
                (if gain == 0.0 { 200.0 } else { gain }, baseline)
            }
            None => (200.0, adc_zero),
        };
        let description = if f.len() > 8 { f[8..].join(" ") } else { String::new() };
        signals.push(SignalSpec {
            file_name: f[0].to_string(),
            format,
            gain,
            baseline,
            description,
        });
    }
    Ok(WfdbHeader {
        record_name: fields[0].to_string(),
        fs_hz,
        n_samples,
        signals,
    })
}

/// Decodes the interleaved digital samples of `n_sig` signals stored in one file.
fn decode_samples(bytes: &[u8], format: u32, n_sig: usize) -> Result<Vec<Vec<i32>>> {
    let mut flat = Vec::new();
    match format {
        16 => {
            flat.extend(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32));
        }
        212 => {
            let sext = |v: i32| if v & 0x800 != 0 { v - 0x1000 } else { v };
            for c in bytes.chunks(3) {
                if c.len() >= 2 {
                    flat.push(sext(c[0] as i32 | ((c[1] as i32 & 0x0F) << 8)));
                }
                if c.len() == 3 {
                    flat.push(sext(c[2] as i32 | ((c[1] as i32 & 0xF0) << 4)));
                }
            }
        }
        other => {
            return Err(Error::parse("wfdb signal", format!("unsupported storage format {other}")));
        }
    }
    let frames = flat.len() / n_sig.max(1);
    let mut out = vec![Vec::with_capacity(frames); n_sig];
    for frame in flat.chunks_exact(n_sig) {
        for (s, v) in out.iter_mut().zip(frame) {
            s.push(*v);
        }
    }
    Ok(out)
}

/// Reads all signals of a record in physical units.
pub fn read_wfdb_signals(dir: &Path, header: &WfdbHeader) -> Result<Vec<Vec<f32>>> {
    let mut out = vec![Vec::new(); header.signals.len()];
    let mut files: Vec<&str> = Vec::new();
    for s in &header.signals {
        if !files.contains(&s.file_name.as_str()) {
            files.push(&s.file_name);
        }
    }
    for file in files {
        let members: Vec<usize> = (0..header.signals.len())
            .filter(|&i| header.signals[i].file_name == file)
            .collect();
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::Load {
            record_id: header.record_name.clone(),
            reason: format!("{}: {e}", path.display()),
        })?;
        let digital = decode_samples(&bytes, header.signals[members[0]].format, members.len())?;
        for (k, &i) in members.iter().enumerate() {
            let spec = &header.signals[i];
            let mut values: Vec<f32> = digital[k]
                .iter()
                .map(|&d| ((d - spec.baseline) as f64 / spec.gain) as f32)
                .collect();
            if header.n_samples > 0 {
                values.truncate(header.n_samples);
            }
            out[i] = values;
        }
    }
    Ok(out)
}

/// One decoded annotation: sample index and MIT code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub sample: usize,
    pub code: u16,
}

pub const CODE_NORMAL: u16 = 1;
pub const CODE_PWAVE: u16 = 24;
pub const CODE_TWAVE: u16 = 27;
pub const CODE_WFON: u16 = 39;
pub const CODE_WFOFF: u16 = 40;
const CODE_SKIP: u16 = 59;
const CODE_NUM: u16 = 60;
const CODE_SUB: u16 = 61;
const CODE_CHN: u16 = 62;
const CODE_AUX: u16 = 63;

/// Decodes an MIT-format binary annotation file.
pub fn parse_mit_annotations(bytes: &[u8]) -> Result<Vec<Annotation>> {
    let words: Vec<u16> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let mut out = Vec::new();
    let mut time: i64 = 0;
    let mut i = 0;
    while i < words.len() {
        let w = words[i];
        let (code, value) = (w >> 10, (w & 0x3FF) as i64);
        i += 1;
        match code {
            0 if value == 0 => break,
            CODE_SKIP => {
                if i + 2 > words.len() {
                    return Err(Error::parse("annotations", "truncated SKIP"));
                }
                let skip = ((words[i] as u32) << 16 | words[i + 1] as u32) as i32;
                time += skip as i64;
                i += 2;
            }
            CODE_AUX => i += (value as usize).div_ceil(2),
            CODE_NUM | CODE_SUB | CODE_CHN => {}
            _ => {
                time += value;
                if time < 0 {
                    return Err(Error::parse("annotations", "negative annotation time"));
                }
                out.push(Annotation {
                    sample: time as usize,
                    code,
                });
            }
        }
    }
    Ok(out)
}

/// Encodes annotations in MIT format; the inverse of `parse_mit_annotations`.
pub fn write_mit_annotations(annotations: &[Annotation]) -> Vec<u8> {
    let mut words: Vec<u16> = Vec::new();
    let mut time = 0usize;
    for a in annotations {
        let delta = a.sample - time;
        if delta > 0x3FF {
            words.push(CODE_SKIP << 10);
            words.push((delta >> 16) as u16);
            words.push((delta & 0xFFFF) as u16);
            words.push(a.code << 10);
        } else {
            words.push(a.code << 10 | delta as u16);
        }
        time = a.sample;
    }
    words.push(0);
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn is_beat_code(code: u16) -> bool {
    matches!(code, 1..=13 | 25 | 30 | 31 | 34 | 35 | 37 | 38)
}

fn peak_class(code: u16) -> Option<WaveClass> {
    match code {
        CODE_PWAVE => Some(WaveClass::P),
        CODE_TWAVE => Some(WaveClass::T),
        c if is_beat_code(c) => Some(WaveClass::Qrs),
        _ => None,
    }
}

/// Turns `(` peak `)` triplets into wave spans. Peaks without both
/// boundaries are ignored.
pub fn annotations_to_spans(annotations: &[Annotation]) -> Vec<WaveSpan> {
    let mut spans = Vec::new();
    let mut onset: Option<usize> = None;
    let mut current: Option<(WaveClass, usize)> = None;
    for a in annotations {
        match a.code {
            CODE_WFON => {
                onset = Some(a.sample);
                current = None;
            }
            CODE_WFOFF => {
                if let Some((class, on)) = current.take() {
                    if a.sample >= on {
                        spans.push(WaveSpan::new(class, on, a.sample));
                    }
                }
                onset = None;
            }
            code => {
                if let (Some(class), Some(on)) = (peak_class(code), onset) {
                    current = Some((class, on));
                }
            }
        }
    }
    spans
}

/// Non-overlapping windows of `win` samples covering `n` (the last may be short).
fn windows(n: usize, win: usize) -> Vec<(usize, usize)> {
    if n <= win || win == 0 {
        return vec![(0, n)];
    }
    (0..n.div_ceil(win)).map(|k| (k * win, ((k + 1) * win).min(n))).collect()
}

fn clip_spans(spans: &[WaveSpan], start: usize, end: usize) -> Vec<WaveSpan> {
    spans
        .iter()
        .filter(|s| s.offset_idx >= start && s.onset_idx < end)
        .map(|s| WaveSpan::new(s.wave_class, s.onset_idx.max(start) - start, s.offset_idx.min(end - 1) - start))
        .collect()
}

#[derive(Debug, Deserialize)]
struct SubjectRow {
    record_id: String,
    subject_id: String,
}

impl WfdbAdapter {
    fn read_record(&self, dir: &Path, name: &str, subjects: &BTreeMap<String, String>, options: &AdapterOptions) -> Result<Vec<RecordGroup>> {
        let hea = dir.join(format!("{name}.hea"));
        let header = parse_header(&fs::read_to_string(&hea).map_err(Error::io(&hea))?)
            .map_err(|e| Error::Load {
                record_id: name.to_string(),
                reason: e.to_string(),
            })?;
        let signals = read_wfdb_signals(dir, &header)?;
        let n = signals.iter().map(Vec::len).min().unwrap_or(0);
        let lead_names: Vec<String> = header
            .signals
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.description.is_empty() {
                    format!("sig{i}")
                } else {
                    s.description.clone()
                }
            })
            .collect();

        let read_ann = |ext: &str| -> Result<Option<Vec<WaveSpan>>> {
            let path = dir.join(format!("{name}.{ext}"));
            if !path.exists() {
                return Ok(None);
            }
            let bytes = fs::read(&path).map_err(Error::io(&path))?;
            Ok(Some(annotations_to_spans(&parse_mit_annotations(&bytes)?)))
        };
        let mut per_lead = Vec::new();
        for lead in &lead_names {
            per_lead.push(read_ann(&lead.to_ascii_lowercase())?);
        }
        let integrated = if per_lead.iter().any(Option::is_some) {
            None
        } else {
            let mut found = None;
            for ext in &options.annotators {
                if let Some(s) = read_ann(ext)? {
                    found = Some(s);
                    break;
                }
            }
            found
        };
        let annotated = integrated.is_some() || per_lead.iter().any(Option::is_some);

        let win = (options.window_s * header.fs_hz).round() as usize;
        let cuts = windows(n, win);
        let subject_id = subjects.get(name).cloned().unwrap_or_else(|| name.to_string());
        let mut out = Vec::new();
        for (k, &(start, end)) in cuts.iter().enumerate() {
            let record_id = if cuts.len() == 1 { name.to_string() } else { format!("{name}_w{k:03}") };
            let clip = |s: &Vec<WaveSpan>| clip_spans(s, start, end);
            let annotation = if let Some(spans) = &integrated {
                let spans = clip(spans);
                if spans.is_empty() {
                    continue;
                }
                GroupAnnotation::Integrated(spans_to_mask(&spans, end - start)?)
            } else if annotated {
                let clipped: Vec<Option<Vec<WaveSpan>>> = per_lead.iter().map(|s| s.as_ref().map(clip)).collect();
                if clipped.iter().flatten().all(Vec::is_empty) {
                    continue;
                }
                GroupAnnotation::LeadSpecific(
                    clipped
                        .iter()
                        .map(|s| s.as_ref().map(|s| spans_to_mask(s, end - start)).transpose())
                        .collect::<Result<_>>()?,
                )
            } else {
                GroupAnnotation::Unlabeled
            };
            let leads = signals
                .iter()
                .zip(&lead_names)
                .map(|(s, lead)| EcgRecord {
                    record_id: record_id.clone(),
                    subject_id: subject_id.clone(),
                    dataset_id: String::new(),
                    lead_id: lead.clone(),
                    fs_hz: header.fs_hz,
                    samples: s[start..end].to_vec(),
                })
                .collect();
            out.push(RecordGroup {
                group: MultiLeadGroup { leads, annotation },
            });
        }
        Ok(out)
    }
}

impl Adapter for WfdbAdapter {
    fn name(&self) -> &'static str {
        "wfdb"
    }

    fn read(&self, raw_dir: &Path, options: &AdapterOptions) -> Result<Vec<RecordGroup>> {
        let mut names: Vec<String> = fs::read_dir(raw_dir)
            .map_err(Error::io(raw_dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "hea").then(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()))?
            })
            .collect();
        names.sort();
        let subjects_path = raw_dir.join("subjects.csv");
        let subjects: BTreeMap<String, String> = if subjects_path.exists() {
            read_csv::<SubjectRow>(&subjects_path)?
                .into_iter()
                .map(|r| (r.record_id, r.subject_id))
                .collect()
        } else {
            BTreeMap::new()
        };

        let mut out = Vec::new();
        let mut problems = Vec::new();
        for name in names {
            match self.read_record(raw_dir, &name, &subjects, options) {
                Ok(groups) => out.extend(groups),
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(format!(
                "{} record(s) could not be read:\n  {}",
                problems.len(),
                problems.join("\n  ")
            )));
        }
        Ok(out)
    }
}

/// Writes a format-16 WFDB record (header plus one interleaved signal file).
pub fn write_wfdb_record(dir: &Path, name: &str, fs_hz: f64, leads: &[(&str, &[f32])], gain: f64) -> Result<()> {
    let n = leads.first().map(|l| l.1.len()).unwrap_or(0);
    let dat = format!("{name}.dat");
    let mut header = format!("{name} {} {fs_hz} {n}\n", leads.len());
    for (lead, _) in leads {
        header.push_str(&format!("{dat} 16 {gain}/mV 16 0 0 0 0 {lead}\n"));
    }
    let hea = dir.join(format!("{name}.hea"));
    fs::write(&hea, header).map_err(Error::io(&hea))?;
    let mut bytes = Vec::with_capacity(2 * n * leads.len());
    for i in 0..n {
        for (_, samples) in leads {
            let d = (samples[i] as f64 * gain).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            bytes.extend_from_slice(&d.to_le_bytes());
        }
    }
    let path = dir.join(&dat);
    fs::write(&path, bytes).map_err(Error::io(&path))
}

/// Encodes spans as `(` peak `)` triplets, peak at the span centre.
pub fn spans_to_annotations(spans: &[WaveSpan]) -> Vec<Annotation> {
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| s.onset_idx);
    let mut out = Vec::with_capacity(3 * sorted.len());
    for s in sorted {
        let code = match s.wave_class {
            WaveClass::P => CODE_PWAVE,
            WaveClass::Qrs => CODE_NORMAL,
            WaveClass::T => CODE_TWAVE,
        };
        out.push(Annotation {
            sample: s.onset_idx,
            code: CODE_WFON,
        });
        out.push(Annotation {
            sample: (s.onset_idx + s.offset_idx) / 2,
            code,
        });
        out.push(Annotation {
            sample: s.offset_idx,
            code: CODE_WFOFF,
        });
    }
    out
}
