use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rayon::prelude::*;

use super::{HasParams, Param, ParamView, Scalar};

/// 2-d convolution (cross-correlation) over NCHW tensors.
///
/// Weight layout is `(out_channels, in_channels, kh, kw)`. Supports the two
/// shapes the encoder needs: 3x3 stride-1 block convs and 1x1 residual
/// shortcuts, but the implementation is general over kernel/stride/padding.
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T, ndarray::Ix4>,
    pub bias: Param<T, ndarray::Ix1>,
    pub stride: usize,
    pub padding: usize,
    cached_input: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::zeros(&format!("{name}.weight"), (out_c, in_c, kernel, kernel)),
            bias: Param::zeros(&format!("{name}.bias"), out_c),
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        let oh = (h + 2 * self.padding - kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - kw) / self.stride + 1;
        (oh, ow)
    }

    fn weight_mat(&self) -> ArrayView2<'_, T> {
        let s = self.weight.value.shape();
        let flat = self.weight.value.as_slice().expect("weight contiguous");
        ArrayView2::from_shape((s[0], s[1] * s[2] * s[3]), flat).expect("weight reshape")
    }

    fn run_forward(&self, input: &Array4<T>) -> Array4<T> {
        let (n, c_in, h, w) = input.dim();
        assert_eq!(
            c_in,
            self.in_channels(),
            "conv {}: input has {} channels, expected {}",
            self.weight.name,
            c_in,
            self.in_channels()
        );
        let (kh, kw) = self.kernel();
        let (oh, ow) = self.output_hw(h, w);
        let oc = self.out_channels();
        let w_mat = self.weight_mat();
        let bias = &self.bias.value;

        let mut out = Array4::<T>::zeros((n, oc, oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(input.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut o, x)| {
                let mut col = Array2::<T>::zeros((c_in * kh * kw, oh * ow));
                im2col(&x, kh, kw, self.stride, self.padding, &mut col);
                let o_slice = o.as_slice_mut().expect("out contiguous");
                let mut o_mat =
                    ArrayViewMut2::from_shape((oc, oh * ow), o_slice).expect("out reshape");
                general_mat_mul(T::one(), &w_mat, &col.view(), T::zero(), &mut o_mat);
                for (mut row, &b) in o_mat.rows_mut().into_iter().zip(bias.iter()) {
                    row.mapv_inplace(|v| v + b);
                }
            });
        out
    }

    pub fn forward(&mut self, input: &Array4<T>, train: bool) -> Array4<T> {
        if train {
            self.cached_input = Some(input.clone());
        }
        self.run_forward(input)
    }

    /// Eval-mode forward; takes `&self` so encoders can be shared across threads.
    pub fn forward_eval(&self, input: &Array4<T>) -> Array4<T> {
        self.run_forward(input)
    }

    /// Accumulates weight/bias gradients and returns the gradient w.r.t. input.
    pub fn backward(&mut self, grad_out: &Array4<T>) -> Array4<T> {
        let input = self
            .cached_input
            .as_ref()
            .expect("conv backward called without a training forward");
        let (n, c_in, h, w) = input.dim();
        let (kh, kw) = self.kernel();
        let (oh, ow) = self.output_hw(h, w);
        let oc = self.out_channels();
        let ckk = c_in * kh * kw;

        // Bias gradient: sum grad_out over batch and spatial dims.
        for (gi, &g) in grad_out.iter().enumerate() {
            let oc_idx = (gi / (oh * ow)) % oc;
            self.bias.grad[oc_idx] = self.bias.grad[oc_idx] + g;
        }

        // Weight gradient: per-sample GEMMs reduced in index order so the
        // result does not depend on thread scheduling.
        let partials: Vec<Array2<T>> = input
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
            .map(|(x, g)| {
                let mut col = Array2::<T>::zeros((ckk, oh * ow));
                im2col(&x, kh, kw, self.stride, self.padding, &mut col);
                let g_slice = g.as_slice().expect("grad contiguous");
                let g_mat = ArrayView2::from_shape((oc, oh * ow), g_slice).expect("grad reshape");
                let mut gw = Array2::<T>::zeros((oc, ckk));
                general_mat_mul(T::one(), &g_mat, &col.t(), T::zero(), &mut gw);
                gw
            })
            .collect();
        {
            let gw_slice = self.weight.grad.as_slice_mut().expect("weight grad contiguous");
            let mut gw_mat =
                ArrayViewMut2::from_shape((oc, ckk), gw_slice).expect("weight grad reshape");
            for p in &partials {
                gw_mat += p;
            }
        }

        // Input gradient: col2im of W^T * grad_out, per sample.
        let w_mat = self.weight_mat();
        let mut grad_in = Array4::<T>::zeros((n, c_in, h, w));
        grad_in
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut gi, g)| {
                let g_slice = g.as_slice().expect("grad contiguous");
                let g_mat = ArrayView2::from_shape((oc, oh * ow), g_slice).expect("grad reshape");
                let mut gcol = Array2::<T>::zeros((ckk, oh * ow));
                general_mat_mul(T::one(), &w_mat.t(), &g_mat, T::zero(), &mut gcol);
                col2im(&gcol, kh, kw, self.stride, self.padding, &mut gi);
            });
        grad_in
    }
}

impl<T: Scalar> HasParams<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(self.weight.as_view_mut());
        f(self.bias.as_view_mut());
    }
}

/// Unfolds one `(C,H,W)` sample into a `(C*kh*kw, oh*ow)` patch matrix.
fn im2col<T: Scalar>(
    x: &ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut Array2<T>,
) {
    let (c_in, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x_flat = x.as_slice().expect("input contiguous");
    let col_flat = col.as_slice_mut().expect("col contiguous");

    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col_flat[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &x_flat[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    if stride == 1 {
                        // Contiguous copy with left/right clipping.
                        let off = kj as isize - pad as isize;
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one `(C,H,W)` sample.
fn col2im<T: Scalar>(
    gcol: &Array2<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut ndarray::ArrayViewMut3<'_, T>,
) {
    let (c_in, h, w) = gx.dim();
    let cols = gcol.shape()[1];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols, oh * ow);
    let gcol_flat = gcol.as_slice().expect("gcol contiguous");
    let gx_flat = gx.as_slice_mut().expect("gx contiguous");

    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &gcol_flat[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx_flat[base + ix as usize] =
                            gx_flat[base + ix as usize] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn fill_seq(a: &mut Array4<f64>) {
        for (i, v) in a.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut conv = Conv2d::<f64>::new("c", 3, 3, 1, 1, 0);
        for i in 0..3 {
            conv.weight.value[[i, i, 0, 0]] = 1.0;
        }
        let mut x = Array4::zeros((2, 3, 4, 5));
        fill_seq(&mut x);
        let y = conv.forward_eval(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut conv = Conv2d::<f64>::new("c", 2, 4, 3, 1, 1);
        for i in 0..4 {
            conv.bias.value[i] = i as f64 + 0.5;
        }
        let x = Array4::zeros((1, 2, 6, 6));
        let y = conv.forward_eval(&x);
        for oc in 0..4 {
            for v in y.index_axis(Axis(0), 0).index_axis(Axis(0), oc).iter() {
                assert_eq!(*v, oc as f64 + 0.5);
            }
        }
    }

    #[test]
    fn output_shape_formula() {
        let conv = Conv2d::<f32>::new("c", 1, 1, 3, 2, 1);
        assert_eq!(conv.output_hw(7, 9), ((7 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1));
    }

    #[test]
    fn brute_force_forward_agreement() {
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 1, 1);
        fill_seq(&mut conv.weight.value);
        conv.bias.value[1] = 0.3;
        let mut x = Array4::zeros((2, 2, 5, 4));
        fill_seq(&mut x);
        let y = conv.forward_eval(&x);
        // direct quadruple loop
        for n in 0..2 {
            for oc in 0..3 {
                for oy in 0..5 {
                    for ox in 0..4 {
                        let mut acc = conv.bias.value[oc];
                        for ic in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = oy as isize + ki as isize - 1;
                                    let ix = ox as isize + kj as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                        acc += conv.weight.value[[oc, ic, ki, kj]]
                                            * x[[n, ic, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[n, oc, oy, ox]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
