use ndarray::linalg::general_mat_mul;
use ndarray::Array2;

use super::stft::Spectrogram;

/// Slaney-style mel scale (linear below 1 kHz, logarithmic above).
pub fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Triangular mel filterbank from 0 Hz to Nyquist with slaney area
/// normalization, shape `(n_mels, n_bins)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f32> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let mel_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();

    let mut weights = Array2::<f32>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lower, center, upper) = (mel_points[m], mel_points[m + 1], mel_points[m + 2]);
        let enorm = 2.0 / (upper - lower);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lower) / (center - lower);
            let falling = (upper - f) / (upper - center);
            let w = rising.min(falling).max(0.0);
            weights[[m, k]] = (w * enorm) as f32;
        }
    }
    weights
}

/// Projects a power spectrogram onto `n_mels` bands: `(time, n_mels)`.
pub fn mel_project(spec: &Spectrogram, filterbank: &Array2<f32>) -> Array2<f32> {
    let n_mels = filterbank.shape()[0];
    assert!(
        n_mels <= spec.bins(),
        "n_mels {} exceeds spectrogram bins {}",
        n_mels,
        spec.bins()
    );
    assert_eq!(filterbank.shape()[1], spec.bins());
    let mut out = Array2::<f32>::zeros((spec.frames(), n_mels));
    general_mat_mul(1.0, &spec.values, &filterbank.t(), 0.0, &mut out);
    // clamp tiny negative rounding artifacts
    out.mapv_inplace(|v| v.max(0.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AudioClip;
    use crate::features::stft::stft_power;

    #[test]
    fn zero_spectrogram_projects_to_zero() {
        let clip = AudioClip {
            samples: vec![0.0; 4096],
            sample_rate: 22050,
        };
        let spec = stft_power(&clip);
        let fb = mel_filterbank(22050, 1024, 128);
        let mel = mel_project(&spec, &fb);
        assert_eq!(mel.shape(), &[spec.frames(), 128]);
        assert!(mel.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_row_sums_are_constant_under_area_normalization() {
        // Unit-area triangles: each row's discrete sum approximates
        // 1/bin_width = n_fft / sample_rate.
        let fb = mel_filterbank(22050, 1024, 128);
        let expected = 1024.0 / 22050.0;
        let sums: Vec<f32> = fb.rows().into_iter().map(|r| r.sum()).collect();
        for (i, &s) in sums.iter().enumerate() {
            assert!(s > 0.0, "filter {i} sums to {s}");
            assert!(
                (s - expected as f32).abs() / expected as f32 <= 0.5,
                "filter {i} sum {s} far from {expected}"
            );
        }
    }

    #[test]
    fn projection_is_linear() {
        let clip = AudioClip {
            samples: (0..8192)
                .map(|i| (std::f32::consts::TAU * 700.0 * i as f32 / 22050.0).sin() * 0.4)
                .collect(),
            sample_rate: 22050,
        };
        let mut spec = stft_power(&clip);
        let fb = mel_filterbank(22050, 1024, 128);
        let mel1 = mel_project(&spec, &fb);
        spec.values.mapv_inplace(|v| 2.0 * v);
        let mel2 = mel_project(&spec, &fb);
        for (a, b) in mel1.iter().zip(mel2.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-4 * b.abs().max(1e-12));
        }
    }
}
