//! Reading and writing the dataset on disk: WAV audio, DCASE-style
//! annotation CSVs, detection CSVs, dataset indexing, and the synthetic
//! desk-scale corpus generator.

mod annotations;
mod index;
mod synth;
mod wav;

pub use annotations::{
    parse_annotation_csv, read_detections_csv, write_detections_csv, DetectionEvent,
};
pub use index::{index_directory, ClassRegions, DatasetIndex, FileEntry, RegionRef};
pub use synth::{generate_synthetic_corpus, SynthCorpus, SyntheticSpec, ToneParams};
pub use wav::{read_wav, resample, write_wav};

use serde::{Deserialize, Serialize};

/// Mono audio at a known sample rate, samples in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
    Unknown,
}

/// One annotated time region of one class within an audio file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRegion {
    pub onset: f64,
    pub offset: f64,
    pub class_id: String,
    pub polarity: Polarity,
}

/// Which split of the corpus an index describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolRole {
    Train,
    Validation,
    Evaluation,
}

/// Where a class's material came from; used by the trainer's provenance
/// instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolSource {
    Train,
    Transductive,
    Aux,
}
