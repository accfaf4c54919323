use ndarray::Array4;

use super::Scalar;

/// 2x2 max pooling with floor semantics: an odd trailing row/column is dropped.
pub struct MaxPool2x2<T: Scalar> {
    cache: Option<PoolCache>,
    _marker: std::marker::PhantomData<T>,
}

struct PoolCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat input index of the max element for each output cell.
    argmax: Vec<usize>,
}

impl<T: Scalar> Default for MaxPool2x2<T> {
    fn default() -> Self {
        MaxPool2x2 {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> MaxPool2x2<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_hw(h: usize, w: usize) -> (usize, usize) {
        (h / 2, w / 2)
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert!(h >= 2 && w >= 2, "max pool needs H,W >= 2, got {h}x{w}");
        let (oh, ow) = Self::output_hw(h, w);
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xf = x.as_slice().expect("input contiguous");
        let of = out.as_slice_mut().expect("out contiguous");

        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xf[best_idx];
                    // ties broken by first index in row-major scan order
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xf[idx] > best {
                            best = xf[idx];
                            best_idx = idx;
                        }
                    }
                    let o_idx = nc * oh * ow + oy * ow + ox;
                    of[o_idx] = best;
                    argmax[o_idx] = best_idx;
                }
            }
        }
        if train {
            self.cache = Some(PoolCache {
                input_dim: (n, c, h, w),
                argmax,
            });
        }
        out
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut tmp = MaxPool2x2::new();
        tmp.forward(x, false)
    }

    pub fn backward(&mut self, grad_out: &Array4<T>) -> Array4<T> {
        let cache = self
            .cache
            .as_ref()
            .expect("max pool backward called without a training forward");
        let mut grad_in = Array4::<T>::zeros(cache.input_dim);
        let gi = grad_in.as_slice_mut().expect("grad contiguous");
        for (go, &idx) in grad_out.iter().zip(cache.argmax.iter()) {
            gi[idx] = gi[idx] + *go;
        }
        grad_in
    }
}

/// Adaptive average pooling onto a fixed `(out_h, out_w)` grid.
///
/// When an input axis is at least as long as the output axis, bin `i` covers
/// `[floor(i*len/out), floor((i+1)*len/out))` and the bins partition the axis.
/// When the input axis is shorter the bins are `[floor(i*len/out),
/// ceil((i+1)*len/out))`, so source cells repeat across bins and the output
/// still has the requested size for arbitrarily short inputs.
pub struct AdaptiveAvgPool2d<T: Scalar> {
    pub out_h: usize,
    pub out_w: usize,
    cached_dim: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<T>,
}

pub(crate) fn bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * len / out;
            let end = if len >= out {
                (i + 1) * len / out
            } else {
                ((i + 1) * len).div_ceil(out).max(start + 1)
            };
            (start, end)
        })
        .collect()
}

impl<T: Scalar> AdaptiveAvgPool2d<T> {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        assert!(out_h > 0 && out_w > 0);
        AdaptiveAvgPool2d {
            out_h,
            out_w,
            cached_dim: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        if train {
            self.cached_dim = Some(x.dim());
        }
        self.forward_eval(x)
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let rows = bins(h, self.out_h);
        let cols = bins(w, self.out_w);
        let mut out = Array4::<T>::zeros((n, c, self.out_h, self.out_w));
        let xf = x.as_slice().expect("input contiguous");
        let of = out.as_slice_mut().expect("out contiguous");
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * self.out_h * self.out_w;
            for (oy, &(r0, r1)) in rows.iter().enumerate() {
                for (ox, &(c0, c1)) in cols.iter().enumerate() {
                    let mut sum = T::zero();
                    for iy in r0..r1 {
                        for ix in c0..c1 {
                            sum = sum + xf[base + iy * w + ix];
                        }
                    }
                    let count = T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                    of[obase + oy * self.out_w + ox] = sum / count;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = self
            .cached_dim
            .expect("adaptive pool backward called without a training forward");
        let rows = bins(h, self.out_h);
        let cols = bins(w, self.out_w);
        let mut grad_in = Array4::<T>::zeros((n, c, h, w));
        let gf = grad_in.as_slice_mut().expect("grad contiguous");
        let gof = grad_out.as_slice().expect("grad_out contiguous");
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * self.out_h * self.out_w;
            for (oy, &(r0, r1)) in rows.iter().enumerate() {
                for (ox, &(c0, c1)) in cols.iter().enumerate() {
                    let g = gof[obase + oy * self.out_w + ox]
                        / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                    for iy in r0..r1 {
                        for ix in c0..c1 {
                            gf[base + iy * w + ix] = gf[base + iy * w + ix] + g;
                        }
                    }
                }
            }
        }
        grad_in
    }
}
