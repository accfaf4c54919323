use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-channel energy normalization parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcenParams {
    /// IIR smoother coefficient.
    pub smoothing: f32,
    /// AGC strength (exponent on the smoothed energy).
    pub gain: f32,
    /// Bias before the root compression.
    pub bias: f32,
    /// Compression exponent.
    pub exponent: f32,
    /// Floor inside the AGC denominator.
    pub floor: f32,
}

impl Default for PcenParams {
    fn default() -> Self {
        PcenParams {
            smoothing: 0.025,
            gain: 0.98,
            bias: 2.0,
            exponent: 0.5,
            floor: 1e-6,
        }
    }
}

impl PcenParams {
    pub fn validate(&self) -> crate::error::Result<()> {
        let ok = self.smoothing > 0.0
            && self.smoothing <= 1.0
            && (0.0..=1.0).contains(&self.gain)
            && self.bias >= 0.0
            && self.exponent > 0.0
            && self.exponent <= 1.0
            && self.floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::error::Error::Config(format!(
                "invalid PCEN parameters: {self:?}"
            )))
        }
    }
}

/// PCEN over a `(time, mel)` energy matrix.
///
/// Per band: `M_t = (1-s) M_{t-1} + s E_t` with `M_0 = E_0`, then
/// `(E / (floor + M)^gain + bias)^exponent - bias^exponent`.
pub fn pcen(mel: &Array2<f32>, params: &PcenParams) -> Array2<f32> {
    let (frames, bands) = mel.dim();
    let s = params.smoothing;
    let mut smoothed = vec![0.0f32; bands];
    if frames > 0 {
        smoothed.copy_from_slice(mel.row(0).to_slice().expect("contiguous"));
    }
    let bias_pow = params.bias.powf(params.exponent);
    let mut out = Array2::<f32>::zeros((frames, bands));
    for t in 0..frames {
        if t > 0 {
            for (m, &e) in smoothed.iter_mut().zip(mel.row(t).iter()) {
                *m = (1.0 - s) * *m + s * e;
            }
        }
        for (b, o) in out.row_mut(t).iter_mut().enumerate() {
            let e = mel[[t, b]];
            let agc = e / (params.floor + smoothed[b]).powf(params.gain);
            *o = (agc + params.bias).powf(params.exponent) - bias_pow;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_output() {
        let mel = Array2::<f32>::zeros((10, 4));
        let out = pcen(&mel, &PcenParams::default());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_converges_to_closed_form() {
        let params = PcenParams::default();
        let c = 3.7f32;
        let frames = 2000; // enough for the IIR to converge
        let mel = Array2::from_elem((frames, 2), c);
        let out = pcen(&mel, &params);
        // with M -> c: ((c/(floor+c)^gain) + bias)^exp - bias^exp
        let expected = (c / (params.floor + c).powf(params.gain) + params.bias)
            .powf(params.exponent)
            - params.bias.powf(params.exponent);
        // independent oracle: iterate the smoother explicitly
        let mut m = c;
        for _ in 1..frames {
            m = (1.0 - params.smoothing) * m + params.smoothing * c;
        }
        let iterated = (c / (params.floor + m).powf(params.gain) + params.bias)
            .powf(params.exponent)
            - params.bias.powf(params.exponent);
        assert!((iterated - expected).abs() < 1e-6);
        let last = out[[frames - 1, 0]];
        assert!(
            (last - expected).abs() < 1e-4,
            "pcen {last} vs closed form {expected}"
        );
    }

    #[test]
    fn gain_one_normalizes_input_scale() {
        let mut params = PcenParams::default();
        params.gain = 1.0;
        let frames = 400;
        let mut mel = Array2::<f32>::zeros((frames, 1));
        for (t, v) in mel.column_mut(0).iter_mut().enumerate() {
            *v = 5.0 + (t as f32 * 0.1).sin(); // inputs ~ 5, far above the floor
        }
        let out1 = pcen(&mel, &params);
        mel.mapv_inplace(|v| v * 10.0);
        let out2 = pcen(&mel, &params);
        // compare steady-state region
        for t in frames / 2..frames {
            let a = out1[[t, 0]];
            let b = out2[[t, 0]];
            assert!(
                (a - b).abs() <= 0.01 * a.abs().max(1e-6),
                "t={t}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn output_is_finite_for_large_inputs() {
        let mel = Array2::from_elem((50, 8), 1e20f32);
        let out = pcen(&mel, &PcenParams::default());
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
