use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::AudioClip;

pub const FRAME_LEN: usize = 1024;
pub const FRAME_HOP: usize = 256;

/// Power spectrogram: time x (frame_len/2 + 1).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub values: Array2<f32>,
    pub frame_hop: usize,
    pub frame_len: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_hop as f64
    }
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (std::f32::consts::TAU * n as f32 / len as f32).cos())
        .collect()
}

/// Reflect-padded sample lookup: index may range over
/// `[-pad, n + pad)` for signals of length `n`.
fn reflect(samples: &[f32], idx: isize) -> f32 {
    let n = samples.len() as isize;
    if n == 1 {
        return samples[0];
    }
    let mut i = idx;
    // fold until inside [0, n)
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    samples[i as usize]
}

/// Magnitude-squared STFT with window length 1024, hop 256, and
/// reflect-centered framing, so frame `t` is centered on sample `t*256` and
/// the frame count is `floor(n/256) + 1`.
pub fn stft_power(clip: &AudioClip) -> Spectrogram {
    assert!(!clip.samples.is_empty(), "stft needs at least one sample");
    let n = clip.samples.len();
    let n_frames = n / FRAME_HOP + 1;
    let n_bins = FRAME_LEN / 2 + 1;
    let window = hann(FRAME_LEN);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(FRAME_LEN);
    let mut values = Array2::<f32>::zeros((n_frames, n_bins));
    let mut buf: Vec<Complex<f32>> = vec![Complex::default(); FRAME_LEN];
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];

    for t in 0..n_frames {
        let center = (t * FRAME_HOP) as isize;
        for (k, b) in buf.iter_mut().enumerate() {
            let idx = center - (FRAME_LEN / 2) as isize + k as isize;
            *b = Complex::new(reflect(&clip.samples, idx) * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, value) in values.row_mut(t).iter_mut().enumerate() {
            *value = buf[bin].norm_sqr();
        }
    }

    Spectrogram {
        values,
        frame_hop: FRAME_HOP,
        frame_len: FRAME_LEN,
        sample_rate: clip.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_and_bins() {
        let clip = AudioClip {
            samples: vec![0.1; 22050],
            sample_rate: 22050,
        };
        let spec = stft_power(&clip);
        assert_eq!(spec.frames(), 22050 / 256 + 1); // 87
        assert_eq!(spec.frames(), 87);
        assert_eq!(spec.bins(), 513);
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let clip = AudioClip {
            samples: vec![0.0; 4096],
            sample_rate: 22050,
        };
        let spec = stft_power(&clip);
        assert!(spec.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        // 1 kHz at 22050 Hz: bin = round(1000 * 1024 / 22050) = 46
        let clip = AudioClip {
            samples: (0..22050)
                .map(|i| (std::f32::consts::TAU * 1000.0 * i as f32 / 22050.0).sin())
                .collect(),
            sample_rate: 22050,
        };
        let spec = stft_power(&clip);
        // interior frame, away from reflection edges
        let row = spec.values.row(40);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 46);

        // independent check: direct DFT of the same windowed frame at bin 46
        let window = hann(FRAME_LEN);
        let center = 40 * FRAME_HOP;
        let mut re = 0.0f64;
        let mut im = 0.0f64;
        for k in 0..FRAME_LEN {
            let idx = center as isize - 512 + k as isize;
            let x = (reflect(&clip.samples, idx) * window[k]) as f64;
            let phase = -std::f64::consts::TAU * 46.0 * k as f64 / FRAME_LEN as f64;
            re += x * phase.cos();
            im += x * phase.sin();
        }
        let direct = (re * re + im * im) as f32;
        let rel = (spec.values[[40, 46]] - direct).abs() / direct;
        assert!(rel < 1e-3, "fft vs direct dft rel err {rel}");
    }

    #[test]
    fn frame_time_mapping_is_invertible() {
        // frame t covers samples centered at t*hop; time = t*hop/sr
        let sr = 22050.0;
        for t in [0usize, 10, 86] {
            let secs = t as f64 * 256.0 / sr;
            let back = (secs * sr / 256.0).round() as usize;
            assert_eq!(back, t);
        }
    }
}
