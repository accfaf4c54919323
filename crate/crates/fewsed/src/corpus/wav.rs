use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

use super::AudioClip;

/// Reads a RIFF WAV file (PCM16 or IEEE float32). Multichannel audio is
/// averaged down to mono; integer samples are scaled to `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported encoding {:?}/{} bits (PCM16 and float32 are supported)",
                path.display(),
                fmt,
                bits
            )))
        }
    };

    let n_frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(n_frames);
    for frame in interleaved.chunks_exact(channels) {
        samples.push(frame.iter().sum::<f32>() / channels as f32);
    }
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono PCM16 audio.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)?;
    Ok(())
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(format!("wav: {other}")),
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel. The cutoff sits
/// at the lower of the two Nyquist frequencies.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    if target_rate == clip.sample_rate {
        return clip.clone();
    }
    let src = clip.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = dst / src;
    // cutoff relative to the source Nyquist
    let cutoff = ratio.min(1.0);
    let half_width = (32.0 / cutoff).ceil() as isize;
    let n = clip.samples.len();
    let out_len = ((n as u64 * target_rate as u64 + clip.sample_rate as u64 / 2)
        / clip.sample_rate as u64) as usize;

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let center = m as f64 / ratio;
        let lo = (center.floor() as isize - half_width).max(0);
        let hi = (center.floor() as isize + half_width).min(n as isize - 1);
        let mut acc = 0.0f64;
        for k in lo..=hi {
            let t = k as f64 - center;
            let x = PI * cutoff * t;
            let sinc = if x.abs() < 1e-12 { 1.0 } else { x.sin() / x };
            let win = 0.5 + 0.5 * (PI * t / half_width as f64).cos();
            acc += clip.samples[k as usize] as f64 * cutoff * sinc * win;
        }
        out.push(acc as f32);
    }
    AudioClip {
        samples: out,
        sample_rate: target_rate,
    }
}
