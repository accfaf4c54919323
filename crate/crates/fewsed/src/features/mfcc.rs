use ndarray::linalg::general_mat_mul;
use ndarray::Array2;

const LOG_FLOOR: f32 = 1e-10;
/// Regression half-width for the delta window (window width 9).
const DELTA_HALF: usize = 4;

/// Orthonormal DCT-II matrix of size `n x n` (coefficients x samples).
pub fn dct_matrix(n: usize) -> Array2<f32> {
    let mut m = Array2::<f32>::zeros((n, n));
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for k in 0..n {
        for i in 0..n {
            let angle = std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n as f64);
            let scale = if k == 0 { norm0 } else { norm };
            m[[k, i]] = (scale * angle.cos()) as f32;
        }
    }
    m
}

/// Log-compresses mel energies and applies the DCT-II per frame, keeping all
/// coefficients so the result stacks against PCEN without padding.
pub fn mfcc(mel: &Array2<f32>, dct: &Array2<f32>) -> Array2<f32> {
    let (frames, bands) = mel.dim();
    assert_eq!(dct.shape(), &[bands, bands]);
    let log_mel = mel.mapv(|v| (v + LOG_FLOOR).ln());
    let mut out = Array2::<f32>::zeros((frames, bands));
    general_mat_mul(1.0, &log_mel, &dct.t(), 0.0, &mut out);
    out
}

/// Delta features by linear regression over a window of width 9:
/// `d_t = sum_{k=1..4} k (c_{t+k} - c_{t-k}) / (2 sum k^2)`, with edge frames
/// replicated.
pub fn delta(coeffs: &Array2<f32>) -> Array2<f32> {
    let (frames, bands) = coeffs.dim();
    let denom: f32 = 2.0 * (1..=DELTA_HALF).map(|k| (k * k) as f32).sum::<f32>();
    let clamp = |t: isize| -> usize { t.clamp(0, frames as isize - 1) as usize };
    let mut out = Array2::<f32>::zeros((frames, bands));
    for t in 0..frames {
        for b in 0..bands {
            let mut acc = 0.0f32;
            for k in 1..=DELTA_HALF {
                let up = coeffs[[clamp(t as isize + k as isize), b]];
                let down = coeffs[[clamp(t as isize - k as isize), b]];
                acc += k as f32 * (up - down);
            }
            out[[t, b]] = acc / denom;
        }
    }
    out
}

/// Channel 1 of the feature stack: delta of the full-resolution MFCCs.
pub fn mfcc_delta(mel: &Array2<f32>, dct: &Array2<f32>) -> Array2<f32> {
    delta(&mfcc(mel, dct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sequence_has_zero_delta() {
        let mel = Array2::from_elem((20, 8), 0.42f32);
        let dct = dct_matrix(8);
        let d = mfcc_delta(&mel, &dct);
        assert!(d.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn linear_ramp_has_constant_delta() {
        // c_t = a*t  ->  delta = a on interior frames
        let a = 0.3f32;
        let mut coeffs = Array2::<f32>::zeros((30, 3));
        for t in 0..30 {
            for b in 0..3 {
                coeffs[[t, b]] = a * t as f32 * (b as f32 + 1.0);
            }
        }
        let d = delta(&coeffs);
        for t in DELTA_HALF..30 - DELTA_HALF {
            for b in 0..3 {
                let expected = a * (b as f32 + 1.0);
                assert!(
                    (d[[t, b]] - expected).abs() < 1e-5,
                    "t={t} b={b}: {} vs {expected}",
                    d[[t, b]]
                );
            }
        }
    }

    #[test]
    fn delta_of_reversed_is_negated_reverse() {
        let mut coeffs = Array2::<f32>::zeros((25, 2));
        for (i, v) in coeffs.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 * 0.21 - 1.0;
        }
        let fwd = delta(&coeffs);
        let mut rev_in = Array2::<f32>::zeros((25, 2));
        for t in 0..25 {
            for b in 0..2 {
                rev_in[[t, b]] = coeffs[[24 - t, b]];
            }
        }
        let rev = delta(&rev_in);
        for t in DELTA_HALF..25 - DELTA_HALF {
            for b in 0..2 {
                assert!(
                    (rev[[t, b]] + fwd[[24 - t, b]]).abs() < 1e-5,
                    "antisymmetry broken at {t},{b}"
                );
            }
        }
    }

    #[test]
    fn dct_matrix_is_orthonormal() {
        let d = dct_matrix(16);
        let mut prod = Array2::<f32>::zeros((16, 16));
        general_mat_mul(1.0, &d, &d.t(), 0.0, &mut prod);
        for i in 0..16 {
            for j in 0..16 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expected).abs() < 1e-5);
            }
        }
    }
}
