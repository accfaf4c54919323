//! Feature extraction: PCEN + delta-MFCC stacks over mel spectrograms.
//!
//! Everything downstream consumes [`FeatureMap`]s: `(channels, time, 128)`
//! stacks at a frame rate of 22050/256 frames per second.

mod mel;
mod store;
mod mfcc;
mod pcen;
mod stft;

pub use mel::{hz_to_mel, mel_filterbank, mel_project, mel_to_hz};
pub use mfcc::{dct_matrix, delta, mfcc, mfcc_delta};
pub use pcen::{pcen, PcenParams};
pub use stft::{stft_power, Spectrogram, FRAME_HOP, FRAME_LEN};
pub use store::FeatureStore;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::corpus::AudioClip;
use crate::error::{Error, Result};

/// Internal processing rate; "22.5 kHz" rounded to the nearest standard rate.
pub const SAMPLE_RATE: u32 = 22050;

pub fn frame_rate() -> f64 {
    SAMPLE_RATE as f64 / FRAME_HOP as f64
}

/// Which feature stack to compute; the non-default modes exist for the
/// input-feature ablation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// PCEN stacked with delta-MFCC (2 channels, the paper's system).
    PcenDelta,
    Pcen,
    Delta,
    Logmel,
    LogmelDelta,
}

impl FeatureMode {
    pub fn channels(self) -> usize {
        match self {
            FeatureMode::PcenDelta | FeatureMode::LogmelDelta => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcen_delta" => Ok(FeatureMode::PcenDelta),
            "pcen" => Ok(FeatureMode::Pcen),
            "delta" => Ok(FeatureMode::Delta),
            "logmel" => Ok(FeatureMode::Logmel),
            "logmel_delta" => Ok(FeatureMode::LogmelDelta),
            other => Err(Error::Config(format!(
                "unknown feature mode {other:?} (expected pcen_delta, pcen, delta, logmel, logmel_delta)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub n_mels: usize,
    pub pcen: PcenParams,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            mode: FeatureMode::PcenDelta,
            n_mels: 128,
            pcen: PcenParams::default(),
        }
    }
}

/// Stacked feature representation of one audio file:
/// `(channels, time, freq)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f32>,
    pub frame_rate: f64,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn bins(&self) -> usize {
        self.values.shape()[2]
    }
    pub fn secs_to_frame(&self, secs: f64) -> usize {
        (secs * self.frame_rate).round() as usize
    }
}

/// Full pipeline: STFT -> mel -> {PCEN, delta-MFCC, log-mel} per the mode.
/// The clip must already be at 22050 Hz.
pub fn extract_features(clip: &AudioClip, config: &FeatureConfig) -> FeatureMap {
    assert_eq!(
        clip.sample_rate, SAMPLE_RATE,
        "extract_features expects {SAMPLE_RATE} Hz input; resample first"
    );
    let spec = stft_power(clip);
    let fb = mel_filterbank(SAMPLE_RATE, FRAME_LEN, config.n_mels);
    let mel = mel_project(&spec, &fb);
    let dct = dct_matrix(config.n_mels);

    let channels: Vec<Array2<f32>> = match config.mode {
        FeatureMode::PcenDelta => vec![pcen(&mel, &config.pcen), mfcc_delta(&mel, &dct)],
        FeatureMode::Pcen => vec![pcen(&mel, &config.pcen)],
        FeatureMode::Delta => vec![mfcc_delta(&mel, &dct)],
        FeatureMode::Logmel => vec![log_mel(&mel)],
        FeatureMode::LogmelDelta => vec![log_mel(&mel), mfcc_delta(&mel, &dct)],
    };

    let (frames, bins) = channels[0].dim();
    let mut values = Array3::<f32>::zeros((channels.len(), frames, bins));
    for (c, ch) in channels.into_iter().enumerate() {
        values.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
    FeatureMap {
        values,
        frame_rate: frame_rate(),
    }
}

fn log_mel(mel: &Array2<f32>) -> Array2<f32> {
    mel.mapv(|v| (v + 1e-10).ln())
}

/// Binary feature cache: three little-endian u32 (channels, time, freq)
/// followed by little-endian f32 values in row-major (channel, time, freq)
/// order.
pub fn write_feature_cache(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &dim in map.values.shape() {
        file.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in map.values.iter() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMap> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{}: truncated feature cache", path.display())))?;
    let dims: Vec<usize> = header
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let count = dims[0] * dims[1] * dims[2];
    let mut payload = vec![0u8; count * 4];
    file.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("{}: truncated feature cache", path.display())))?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FeatureMap {
        values: Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        frame_rate: frame_rate(),
    })
}
