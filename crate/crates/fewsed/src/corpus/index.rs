use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{Error, Result};

use super::{parse_annotation_csv, LabeledRegion, Polarity, PoolRole, PoolSource};

/// A labeled time span in a specific file.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRef {
    pub file: PathBuf,
    pub onset: f64,
    pub offset: f64,
}

impl RegionRef {
    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Positive and negative material for one class.
#[derive(Debug, Clone, Default)]
pub struct ClassRegions {
    pub positives: Vec<RegionRef>,
    pub negatives: Vec<RegionRef>,
    pub source: Option<PoolSource>,
}

/// Per-file metadata kept by the index.
#[derive(Debug, Clone)]
pub struct FileEntry {
    pub duration: f64,
    /// All annotations of the file's CSV, onset-sorted.
    pub annotations: Vec<LabeledRegion>,
    /// Subfolder the file came from (the pseudo-class for evaluation data).
    pub subfolder: String,
}

/// Classes and their labeled material for one split of the corpus.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub role: PoolRole,
    pub regions_by_class: BTreeMap<String, ClassRegions>,
    pub files: BTreeMap<PathBuf, FileEntry>,
}

impl DatasetIndex {
    pub fn classes(&self) -> Vec<String> {
        self.regions_by_class.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.regions_by_class.is_empty()
    }

    /// Pools every class's negative material; used when a class has no
    /// negatives of its own.
    pub fn global_negative_pool(&self) -> Vec<RegionRef> {
        let mut all = Vec::new();
        for regions in self.regions_by_class.values() {
            all.extend(regions.negatives.iter().cloned());
        }
        all
    }

    /// Tags every class with a pool source (for provenance instrumentation).
    pub fn tag_source(&mut self, source: PoolSource) {
        for regions in self.regions_by_class.values_mut() {
            regions.source = Some(source);
        }
    }

    /// Merges another index's classes into this one, tagging them with the
    /// given source. Colliding class names are disambiguated by suffixing.
    pub fn merge_classes(&mut self, other: &DatasetIndex, source: PoolSource) {
        for (class, regions) in &other.regions_by_class {
            let mut tagged = regions.clone();
            tagged.source = Some(source);
            let key = if self.regions_by_class.contains_key(class) {
                format!("{class}#merged")
            } else {
                class.clone()
            };
            self.regions_by_class.insert(key, tagged);
        }
        for (path, entry) in &other.files {
            self.files.entry(path.clone()).or_insert_with(|| entry.clone());
        }
    }
}

/// Indexes one split directory. Layout: `dir/<subfolder>/<name>.wav` with a
/// sibling `<name>.csv`.
///
/// For `Train`/`Validation` roles the class id is the CSV class column;
/// positives come from POS cells, negatives from NEG cells plus the
/// complement of the positive+unknown regions within each file. UNK regions
/// are excluded from both pools. For `Evaluation` the class id is the
/// subfolder name and only per-file annotations are recorded; segmentation
/// into labeled prefix and query region happens at evaluation time.
pub fn index_directory(dir: &Path, role: PoolRole) -> Result<DatasetIndex> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{}: not a directory", dir.display())));
    }
    let mut wavs: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().to_path_buf())
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::Data(format!("{}: no wav files found", dir.display())));
    }

    let mut index = DatasetIndex {
        role,
        regions_by_class: BTreeMap::new(),
        files: BTreeMap::new(),
    };

    for wav_path in wavs {
        let csv_path = wav_path.with_extension("csv");
        if !csv_path.is_file() {
            return Err(Error::Data(format!(
                "{}: missing annotation csv {}",
                wav_path.display(),
                csv_path.display()
            )));
        }
        let duration = wav_duration(&wav_path)?;
        let subfolder = wav_path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();

        let parsed = parse_annotation_csv(&csv_path)?;
        let mut annotations: Vec<LabeledRegion> = Vec::new();
        let wav_name = wav_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (file_col, regions) in parsed {
            // The Audiofilename column should reference the sibling wav.
            if file_col != wav_name {
                log::warn!(
                    "{}: row names {} but sits next to {}",
                    csv_path.display(),
                    file_col,
                    wav_name
                );
            }
            annotations.extend(regions);
        }
        annotations.sort_by(|a, b| a.onset.partial_cmp(&b.onset).expect("finite onsets"));
        for region in &annotations {
            if region.offset > duration + 1e-6 {
                log::warn!(
                    "{}: region [{:.3},{:.3}] exceeds file duration {:.3}, clamped",
                    wav_path.display(),
                    region.onset,
                    region.offset,
                    duration
                );
            }
        }

        match role {
            PoolRole::Evaluation => {
                let entry = index
                    .regions_by_class
                    .entry(subfolder.clone())
                    .or_default();
                for region in annotations.iter().filter(|r| r.polarity == Polarity::Positive) {
                    entry.positives.push(RegionRef {
                        file: wav_path.clone(),
                        onset: region.onset,
                        offset: region.offset.min(duration),
                    });
                }
            }
            PoolRole::Train | PoolRole::Validation => {
                index_training_file(&mut index, &wav_path, duration, &annotations);
            }
        }

        index.files.insert(
            wav_path.clone(),
            FileEntry {
                duration,
                annotations,
                subfolder,
            },
        );
    }
    Ok(index)
}

fn index_training_file(
    index: &mut DatasetIndex,
    wav_path: &Path,
    duration: f64,
    annotations: &[LabeledRegion],
) {
    let mut classes: Vec<String> = annotations.iter().map(|r| r.class_id.clone()).collect();
    classes.sort();
    classes.dedup();

    for class in classes {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut blocked: Vec<(f64, f64)> = Vec::new(); // positive + unknown spans
        let mut has_explicit_neg = false;
        for region in annotations.iter().filter(|r| r.class_id == class) {
            let clamped = (region.onset.max(0.0), region.offset.min(duration));
            match region.polarity {
                Polarity::Positive => {
                    positives.push(RegionRef {
                        file: wav_path.to_path_buf(),
                        onset: clamped.0,
                        offset: clamped.1,
                    });
                    blocked.push(clamped);
                }
                Polarity::Negative => {
                    has_explicit_neg = true;
                    negatives.push(RegionRef {
                        file: wav_path.to_path_buf(),
                        onset: clamped.0,
                        offset: clamped.1,
                    });
                }
                Polarity::Unknown => blocked.push(clamped),
            }
        }
        if !has_explicit_neg {
            // Complement of positive+unknown spans within the file.
            for (onset, offset) in complement_spans(&blocked, duration) {
                negatives.push(RegionRef {
                    file: wav_path.to_path_buf(),
                    onset,
                    offset,
                });
            }
        }
        let entry = index.regions_by_class.entry(class).or_default();
        entry.positives.extend(positives);
        entry.negatives.extend(negatives);
    }
}

/// Gaps left in `[0, duration]` after removing the given spans.
pub(crate) fn complement_spans(spans: &[(f64, f64)], duration: f64) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = spans.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite spans"));
    let mut gaps = Vec::new();
    let mut cursor = 0.0f64;
    for &(onset, offset) in &sorted {
        if onset > cursor {
            gaps.push((cursor, onset.min(duration)));
        }
        cursor = cursor.max(offset);
    }
    if cursor < duration {
        gaps.push((cursor, duration));
    }
    gaps.retain(|(a, b)| b - a > 1e-9);
    gaps
}

fn wav_duration(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}
