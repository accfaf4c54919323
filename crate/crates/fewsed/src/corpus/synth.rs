use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{index_directory, write_wav, AudioClip, DatasetIndex, PoolRole};

/// Amplitude-modulated tone parameters for one synthetic class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToneParams {
    pub fundamental_hz: f64,
    pub am_rate_hz: f64,
}

/// Recipe for the synthetic desk-scale corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub events_per_file: usize,
    /// Event duration range in seconds (uniform draw).
    pub event_duration_range: (f64, f64),
    /// Per-class tone parameters; auto-derived when empty.
    pub tone_params: Vec<ToneParams>,
    /// Noise amplitude in dB relative to the tone amplitude.
    pub noise_floor_db: f64,
    pub file_duration: f64,
    pub files_per_class_train: usize,
    pub files_per_class_val: usize,
    pub files_per_class_eval: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 3,
            events_per_file: 10,
            event_duration_range: (0.3, 0.6),
            tone_params: Vec::new(),
            noise_floor_db: -30.0,
            file_duration: 60.0,
            files_per_class_train: 10,
            files_per_class_val: 3,
            files_per_class_eval: 2,
            sample_rate: 22050,
            seed: 7,
        }
    }
}

const MIN_GAP_SECS: f64 = 0.1;
const TONE_AMPLITUDE: f64 = 0.5;

impl SyntheticSpec {
    pub fn class_name(&self, class: usize) -> String {
        format!("class_{class:02}")
    }

    fn tone(&self, class: usize) -> ToneParams {
        if class < self.tone_params.len() {
            self.tone_params[class].clone()
        } else {
            // Fundamentals spaced far apart (well over one mel band).
            ToneParams {
                fundamental_hz: 450.0 * (class as f64 + 1.0) + 60.0 * class as f64,
                am_rate_hz: 2.0 + 1.5 * class as f64,
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.events_per_file == 0 {
            return Err(Error::Config(
                "n_classes and events_per_file must be positive".into(),
            ));
        }
        let (lo, hi) = self.event_duration_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "event_duration_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        let needed = self.events_per_file as f64 * hi
            + (self.events_per_file + 1) as f64 * MIN_GAP_SECS;
        if needed > self.file_duration {
            return Err(Error::Config(format!(
                "infeasible packing: {} events of up to {hi:.3}s plus {:.1}s gaps need {needed:.2}s \
                 but file_duration is {:.2}s",
                self.events_per_file, MIN_GAP_SECS, self.file_duration
            )));
        }
        Ok(())
    }
}

/// Locations of the generated corpus splits.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub root: PathBuf,
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl SynthCorpus {
    pub fn train_index(&self) -> Result<DatasetIndex> {
        index_directory(&self.train_dir, PoolRole::Train)
    }
    pub fn val_index(&self) -> Result<DatasetIndex> {
        index_directory(&self.val_dir, PoolRole::Validation)
    }
    pub fn eval_index(&self) -> Result<DatasetIndex> {
        index_directory(&self.eval_dir, PoolRole::Evaluation)
    }
}

/// Generates WAVs and annotation CSVs under `out_dir` in a DCASE-like
/// train/val/eval layout (eval has one subfolder per class). Deterministic
/// for a fixed seed.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthCorpus> {
    spec.validate()?;
    let corpus = SynthCorpus {
        root: out_dir.to_path_buf(),
        train_dir: out_dir.join("train"),
        val_dir: out_dir.join("val"),
        eval_dir: out_dir.join("eval"),
    };

    for (split, dir, files_per_class) in [
        ("train", &corpus.train_dir, spec.files_per_class_train),
        ("val", &corpus.val_dir, spec.files_per_class_val),
        ("eval", &corpus.eval_dir, spec.files_per_class_eval),
    ] {
        for class in 0..spec.n_classes {
            let class_name = spec.class_name(class);
            let sub = match split {
                // eval mirrors DCASE: one subfolder per (pseudo-)class
                "eval" => dir.join(&class_name),
                _ => dir.join(format!("{split}_set")),
            };
            std::fs::create_dir_all(&sub)?;
            for file_idx in 0..files_per_class {
                // A seed stream per (split, class, file) keeps files stable
                // even if generation order changes.
                let sub_seed = spec
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(split_tag(split) * 1_000_000)
                    .wrapping_add((class as u64) * 1000)
                    .wrapping_add(file_idx as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
                let stem = format!("{class_name}_{split}_{file_idx:02}");
                write_synth_file(spec, class, &sub, &stem, &class_name, split, &mut rng)?;
            }
        }
    }
    Ok(corpus)
}

fn split_tag(split: &str) -> u64 {
    match split {
        "train" => 1,
        "val" => 2,
        _ => 3,
    }
}

fn write_synth_file(
    spec: &SyntheticSpec,
    class: usize,
    dir: &Path,
    stem: &str,
    class_name: &str,
    split: &str,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let sr = spec.sample_rate as f64;
    let n_samples = (spec.file_duration * sr).round() as usize;
    let tone = spec.tone(class);
    let noise_amp = TONE_AMPLITUDE * 10f64.powf(spec.noise_floor_db / 20.0);

    // Event durations, then gaps from the remaining slack.
    let (lo, hi) = spec.event_duration_range;
    let durations: Vec<f64> = (0..spec.events_per_file)
        .map(|_| rng.gen_range(lo..=hi))
        .collect();
    let total_events: f64 = durations.iter().sum();
    let slack = spec.file_duration - total_events - (spec.events_per_file + 1) as f64 * MIN_GAP_SECS;
    let weights: Vec<f64> = (0..=spec.events_per_file).map(|_| rng.gen_range(0.2..1.0)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut events: Vec<(usize, usize)> = Vec::new(); // sample-aligned (onset, offset)
    let mut cursor = 0.0f64;
    for (i, dur) in durations.iter().enumerate() {
        cursor += MIN_GAP_SECS + slack * weights[i] / wsum;
        let onset = (cursor * sr).round() as usize;
        let offset = ((cursor + dur) * sr).round() as usize;
        events.push((onset, offset.min(n_samples)));
        cursor += dur;
    }

    let mut samples = vec![0.0f32; n_samples];
    for s in samples.iter_mut() {
        *s = (rng.gen_range(-1.0..1.0) * noise_amp) as f32;
    }
    for &(onset, offset) in &events {
        let len = offset - onset;
        let ramp = ((0.01 * sr) as usize).min(len / 4).max(1);
        for i in 0..len {
            let t = i as f64 / sr;
            let carrier = (TAU * tone.fundamental_hz * t).sin();
            // shallow modulation: a class cue without deep amplitude valleys
            let am = 0.8 + 0.2 * (TAU * tone.am_rate_hz * t).sin();
            let env = if i < ramp {
                0.5 - 0.5 * (PI_F * i as f64 / ramp as f64).cos()
            } else if i + ramp > len {
                0.5 - 0.5 * (PI_F * (len - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            samples[onset + i] += (TONE_AMPLITUDE * carrier * am * env) as f32;
        }
    }

    let clip = AudioClip {
        samples,
        sample_rate: spec.sample_rate,
    };
    write_wav(&dir.join(format!("{stem}.wav")), &clip)?;

    // Eval CSVs use the DCASE single "Q" column; train/val use the class name.
    let column = if split == "eval" { "Q" } else { class_name };
    let mut csv = format!("Audiofilename,Starttime,Endtime,{column}\n");
    for &(onset, offset) in &events {
        csv.push_str(&format!(
            "{stem}.wav,{:.6},{:.6},POS\n",
            onset as f64 / sr,
            offset as f64 / sr
        ));
    }
    std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
    Ok(())
}

const PI_F: f64 = std::f64::consts::PI;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::read_wav;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 3,
            events_per_file: 5,
            event_duration_range: (0.15, 0.3),
            file_duration: 6.0,
            files_per_class_train: 1,
            files_per_class_val: 1,
            files_per_class_eval: 1,
            seed: 42,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = tiny_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&spec, d1.path()).unwrap();
        generate_synthetic_corpus(&spec, d2.path()).unwrap();
        for entry in walkdir::WalkDir::new(d1.path())
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
        {
            let rel = entry.path().strip_prefix(d1.path()).unwrap();
            let a = std::fs::read(entry.path()).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "mismatch for {}", rel.display());
        }
    }

    #[test]
    fn csv_row_counts_match_events_per_file() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let mut checked = 0;
        for entry in walkdir::WalkDir::new(dir.path())
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().map(|x| x == "csv").unwrap_or(false))
        {
            let text = std::fs::read_to_string(entry.path()).unwrap();
            let pos_rows = text.lines().filter(|l| l.ends_with(",POS")).count();
            assert_eq!(pos_rows, 5, "{}", entry.path().display());
            checked += 1;
        }
        assert_eq!(checked, 9); // 3 classes x (1 train + 1 val + 1 eval)
    }

    #[test]
    fn event_rms_well_above_gap_rms() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let index = corpus.train_index().unwrap();
        let (path, entry) = index.files.iter().next().unwrap();
        let clip = read_wav(path).unwrap();
        let rms = |a: f64, b: f64| -> f64 {
            let lo = (a * 22050.0) as usize;
            let hi = ((b * 22050.0) as usize).min(clip.samples.len());
            let sq: f64 = clip.samples[lo..hi].iter().map(|&s| (s as f64) * (s as f64)).sum();
            (sq / (hi - lo) as f64).sqrt()
        };
        let first = &entry.annotations[0];
        let event_rms = rms(first.onset, first.offset);
        let gap_rms = rms(0.0, first.onset);
        assert!(
            event_rms >= 3.0 * gap_rms,
            "event {event_rms} vs gap {gap_rms}"
        );
    }

    #[test]
    fn infeasible_packing_is_config_error() {
        let spec = SyntheticSpec {
            events_per_file: 100,
            event_duration_range: (0.5, 1.0),
            file_duration: 10.0,
            ..tiny_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        match generate_synthetic_corpus(&spec, dir.path()) {
            Err(Error::Config(msg)) => assert!(msg.contains("infeasible")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
