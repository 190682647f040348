use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    qualify, spans_to_mask, DelineationMask, EcgRecord, LabelRatio, LabeledExample,
    ReferenceIntervals, Split, SplitManifest,
};
use crate::error::{Error, Result};
use crate::eval::{mask_runs, WaveClass, WaveSpan};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_FILE: &str = "signals.f32";
pub const SPLIT_FILE: &str = "split.json";
pub const INFO_FILE: &str = "dataset.json";

/// One wave annotation in a manifest line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEntry {
    pub class: WaveClass,
    pub onset_idx: usize,
    pub offset_idx: usize,
}

impl From<SpanEntry> for WaveSpan {
    fn from(s: SpanEntry) -> Self {
        WaveSpan::new(s.class, s.onset_idx, s.offset_idx)
    }
}

impl From<WaveSpan> for SpanEntry {
    fn from(s: WaveSpan) -> Self {
        SpanEntry {
            class: s.wave_class,
            onset_idx: s.onset_idx,
            offset_idx: s.offset_idx,
        }
    }
}

/// One line of the canonical manifest: a single lead of a single record.
///
/// `annotations` is `null` for records without delineation labels and a
/// (possibly empty) list otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub subject_id: String,
    pub dataset_id: String,
    pub lead_id: String,
    pub fs_hz: f64,
    pub n_samples: usize,
    pub blob_path: String,
    pub blob_offset_bytes: u64,
    #[serde(default)]
    pub annotations: Option<Vec<SpanEntry>>,
    #[serde(default)]
    pub intervals: Option<ReferenceIntervals>,
}

impl ManifestEntry {
    pub fn qualified_id(&self) -> String {
        qualify(&self.dataset_id, &self.record_id)
    }

    pub fn qualified_subject(&self) -> String {
        qualify(&self.dataset_id, &self.subject_id)
    }

    fn mask(&self) -> Result<Option<DelineationMask>> {
        let Some(spans) = &self.annotations else {
            return Ok(None);
        };
        let spans: Vec<WaveSpan> = spans.iter().copied().map(Into::into).collect();
        spans_to_mask(&spans, self.n_samples)
            .map(Some)
            .map_err(|e| Error::Validation(format!("record `{}` lead `{}`: {e}", self.record_id, self.lead_id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelType {
    LeadSpecific,
    Integrated,
    IntervalOnly,
    Unlabeled,
}

/// Dataset-level metadata stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub label_type: LabelType,
    /// The split file came from the data provider rather than `subject_split`.
    #[serde(default)]
    pub official_split: bool,
    #[serde(default)]
    pub adapter: String,
}

/// Read-only view of one or more canonical datasets.
///
/// Signals are read from their blobs on demand; `&self` methods may be used
/// from several threads at once.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    infos: BTreeMap<String, DatasetInfo>,
    entries: Vec<ManifestEntry>,
    roots: Vec<PathBuf>,
    split: Option<SplitManifest>,
}

/// Opens a canonical dataset from its manifest file (or the directory holding it).
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DatasetHandle> {
    let mut path = manifest_path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(&path).map_err(Error::io(&path))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 1), e))?;
        entries.push(entry);
    }

    let mut seen = BTreeSet::new();
    for entry in &entries {
        validate_entry(entry, &root)?;
        let key = (entry.dataset_id.clone(), entry.record_id.clone(), entry.lead_id.clone());
        if !seen.insert(key) {
            return Err(Error::Validation(format!(
                "duplicate record `{}` lead `{}` in dataset `{}`",
                entry.record_id, entry.lead_id, entry.dataset_id
            )));
        }
    }

    let mut infos = BTreeMap::new();
    let info_path = root.join(INFO_FILE);
    if info_path.exists() {
        let text = fs::read_to_string(&info_path).map_err(Error::io(&info_path))?;
        let info: DatasetInfo =
            serde_json::from_str(&text).map_err(|e| Error::parse(info_path.display().to_string(), e))?;
        infos.insert(info.dataset_id.clone(), info);
    }
    for entry in &entries {
        infos.entry(entry.dataset_id.clone()).or_insert_with(|| DatasetInfo {
            dataset_id: entry.dataset_id.clone(),
            label_type: if entry.annotations.is_some() {
                LabelType::LeadSpecific
            } else if entry.intervals.is_some() {
                LabelType::IntervalOnly
            } else {
                LabelType::Unlabeled
            },
            official_split: false,
            adapter: String::new(),
        });
    }

    let split_path = root.join(SPLIT_FILE);
    let split = if split_path.exists() {
        let text = fs::read_to_string(&split_path).map_err(Error::io(&split_path))?;
        let split: SplitManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(split_path.display().to_string(), e))?;
        split.validate()?;
        Some(split)
    } else {
        None
    };

    let roots = vec![root; entries.len()];
    Ok(DatasetHandle {
        infos,
        entries,
        roots,
        split,
    })
}

fn validate_entry(entry: &ManifestEntry, root: &Path) -> Result<()> {
    let load_err = |reason: String| Error::Load {
        record_id: entry.record_id.clone(),
        reason,
    };
    if entry.n_samples == 0 || !(entry.fs_hz > 0.0) {
        return Err(Error::Validation(format!(
            "record `{}`: n_samples and fs_hz must be positive",
            entry.record_id
        )));
    }
    let blob = root.join(&entry.blob_path);
    let meta = fs::metadata(&blob).map_err(|e| load_err(format!("blob {}: {e}", blob.display())))?;
    let needed = entry.blob_offset_bytes + 4 * entry.n_samples as u64;
    if meta.len() < needed {
        return Err(load_err(format!(
            "blob {} has {} bytes, record needs {needed}",
            blob.display(),
            meta.len()
        )));
    }
    if let Some(spans) = &entry.annotations {
        if let Some(s) = spans
            .iter()
            .find(|s| s.onset_idx > s.offset_idx || s.offset_idx >= entry.n_samples)
        {
            return Err(Error::Validation(format!(
                "record `{}` lead `{}`: span {:?} [{}, {}] exceeds signal length {}",
                entry.record_id, entry.lead_id, s.class, s.onset_idx, s.offset_idx, entry.n_samples
            )));
        }
        entry.mask()?;
    }
    if let Some(iv) = &entry.intervals {
        iv.validate()?;
    }
    Ok(())
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ManifestEntry {
        &self.entries[index]
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = &str> {
        self.infos.keys().map(String::as_str)
    }

    pub fn info(&self, dataset_id: &str) -> Option<&DatasetInfo> {
        self.infos.get(dataset_id)
    }

    /// True when every record of the dataset carries only interval labels.
    pub fn is_interval_only(&self) -> bool {
        !self.entries.is_empty()
            && self
                .entries
                .iter()
                .all(|e| e.annotations.is_none() && e.intervals.is_some())
    }

    pub fn split(&self) -> Option<&SplitManifest> {
        self.split.as_ref()
    }

    pub fn set_split(&mut self, split: SplitManifest) -> Result<()> {
        split.validate()?;
        self.split = Some(split);
        Ok(())
    }

    /// Reads the signal and labels of one manifest line.
    pub fn example(&self, index: usize) -> Result<LabeledExample> {
        let entry = &self.entries[index];
        let blob = self.roots[index].join(&entry.blob_path);
        let load_err = |reason: String| Error::Load {
            record_id: entry.record_id.clone(),
            reason,
        };
        let mut file = File::open(&blob).map_err(|e| load_err(format!("{}: {e}", blob.display())))?;
        file.seek(SeekFrom::Start(entry.blob_offset_bytes))
            .map_err(|e| load_err(e.to_string()))?;
        let mut bytes = vec![0u8; entry.n_samples * 4];
        file.read_exact(&mut bytes).map_err(|e| load_err(e.to_string()))?;
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(LabeledExample {
            record: EcgRecord {
                record_id: entry.record_id.clone(),
                subject_id: entry.subject_id.clone(),
                dataset_id: entry.dataset_id.clone(),
                lead_id: entry.lead_id.clone(),
                fs_hz: entry.fs_hz,
                samples,
            },
            mask: entry.mask()?,
            intervals: entry.intervals,
        })
    }

    /// Lazily enumerates all examples in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = Result<LabeledExample>> + '_ {
        (0..self.len()).map(move |i| self.example(i))
    }

    /// Dataset-qualified subject ids.
    pub fn subjects(&self) -> BTreeSet<String> {
        self.entries.iter().map(ManifestEntry::qualified_subject).collect()
    }

    /// Manifest indices of the given split. Without a split manifest every
    /// record is treated as test data.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.split {
            Some(manifest) => (0..self.len())
                .filter(|&i| manifest.split_of(&self.entries[i].qualified_subject()) == Some(split))
                .collect(),
            None if split == Split::Test => (0..self.len()).collect(),
            None => Vec::new(),
        }
    }

    /// Unique dataset-qualified record ids (pre-lead-expansion) of a split.
    pub fn record_ids(&self, split: Split) -> Vec<String> {
        let ids: BTreeSet<String> = self
            .indices(split)
            .into_iter()
            .map(|i| self.entries[i].qualified_id())
            .collect();
        ids.into_iter().collect()
    }

    /// Train indices whose record belongs to the labeled subset for `ratio`.
    /// `None` selects the whole training split.
    pub fn labeled_indices(&self, ratio: Option<LabelRatio>) -> Result<Vec<usize>> {
        let train = self.indices(Split::Train);
        let Some(ratio) = ratio else {
            return Ok(train);
        };
        let subset = self
            .split
            .as_ref()
            .and_then(|s| s.label_subset(ratio))
            .ok_or_else(|| Error::Validation(format!("dataset has no label subset for ratio {ratio}")))?;
        Ok(train
            .into_iter()
            .filter(|&i| subset.contains(&self.entries[i].qualified_id()))
            .collect())
    }

    /// Restricts the handle to the given manifest indices.
    pub fn select(&self, indices: &[usize]) -> DatasetHandle {
        DatasetHandle {
            infos: self.infos.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            roots: indices.iter().map(|&i| self.roots[i].clone()).collect(),
            split: self.split.clone(),
        }
    }
}

/// Concatenates datasets with disjoint ids; splits and label subsets are unioned.
pub fn merge_datasets(handles: &[DatasetHandle]) -> Result<DatasetHandle> {
    let mut infos = BTreeMap::new();
    let mut entries = Vec::new();
    let mut roots = Vec::new();
    let mut split: Option<SplitManifest> = None;
    let all_split = handles.iter().all(|h| h.split.is_some());
    for handle in handles {
        for (id, info) in &handle.infos {
            if infos.insert(id.clone(), info.clone()).is_some() {
                return Err(Error::Validation(format!("dataset id `{id}` appears in more than one handle")));
            }
        }
        entries.extend(handle.entries.iter().cloned());
        roots.extend(handle.roots.iter().cloned());
        if all_split {
            let s = handle.split.as_ref().expect("checked above");
            split = Some(match split {
                Some(acc) => acc.union(s),
                None => s.clone(),
            });
        }
    }
    Ok(DatasetHandle {
        infos,
        entries,
        roots,
        split,
    })
}

/// Writes a canonical dataset: manifest, a single signal blob, metadata and split.
pub struct DatasetWriter {
    root: PathBuf,
    info: DatasetInfo,
    blob: BufWriter<File>,
    offset: u64,
    entries: Vec<ManifestEntry>,
}

impl DatasetWriter {
    pub fn create(root: impl AsRef<Path>, info: DatasetInfo) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(Error::io(&root))?;
        let blob_path = root.join(BLOB_FILE);
        let blob = File::create(&blob_path).map_err(Error::io(&blob_path))?;
        Ok(Self {
            root,
            info,
            blob: BufWriter::new(blob),
            offset: 0,
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn add(&mut self, example: &LabeledExample) -> Result<()> {
        example.validate()?;
        let record = &example.record;
        if record.dataset_id != self.info.dataset_id {
            return Err(Error::Validation(format!(
                "record `{}` has dataset id `{}`, writer expects `{}`",
                record.record_id, record.dataset_id, self.info.dataset_id
            )));
        }
        let blob_path = self.root.join(BLOB_FILE);
        for s in &record.samples {
            self.blob
                .write_all(&s.to_le_bytes())
                .map_err(Error::io(&blob_path))?;
        }
        let annotations = example
            .mask
            .as_ref()
            .map(|m| mask_runs(m).into_iter().map(SpanEntry::from).collect());
        self.entries.push(ManifestEntry {
            record_id: record.record_id.clone(),
            subject_id: record.subject_id.clone(),
            dataset_id: record.dataset_id.clone(),
            lead_id: record.lead_id.clone(),
            fs_hz: record.fs_hz,
            n_samples: record.samples.len(),
            blob_path: BLOB_FILE.to_string(),
            blob_offset_bytes: self.offset,
            annotations,
            intervals: example.intervals,
        });
        self.offset += 4 * record.samples.len() as u64;
        Ok(())
    }

    /// Flushes everything to disk and returns the manifest path.
    pub fn finish(mut self, split: Option<&SplitManifest>) -> Result<PathBuf> {
        let blob_path = self.root.join(BLOB_FILE);
        self.blob.flush().map_err(Error::io(&blob_path))?;

        let manifest_path = self.root.join(MANIFEST_FILE);
        let mut out = BufWriter::new(File::create(&manifest_path).map_err(Error::io(&manifest_path))?);
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(|e| Error::parse("manifest", e))?;
            writeln!(out, "{line}").map_err(Error::io(&manifest_path))?;
        }
        out.flush().map_err(Error::io(&manifest_path))?;

        write_json(&self.root.join(INFO_FILE), &self.info)?;
        if let Some(split) = split {
            split.validate()?;
            write_json(&self.root.join(SPLIT_FILE), split)?;
        }
        Ok(manifest_path)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}
