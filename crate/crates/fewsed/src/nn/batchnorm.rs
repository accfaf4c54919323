use ndarray::{Array1, Array4, Axis};

use super::{HasParams, Param, ParamView, Scalar};

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Train mode normalizes with batch statistics and updates the running
/// estimates (momentum 0.1, unbiased variance for the running update).
/// Eval mode normalizes with the running estimates; before any training
/// step those are the initial mean 0 / var 1.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T, ndarray::Ix1>,
    pub beta: Param<T, ndarray::Ix1>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
    name: String,
    cache: Option<Cache<T>>,
}

struct Cache<T> {
    x_hat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Param::zeros(&format!("{name}.gamma"), channels);
        gamma.value.fill(T::one());
        BatchNorm2d {
            gamma,
            beta: Param::zeros(&format!("{name}.beta"), channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        if !train {
            return self.forward_eval(x);
        }
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm {}: channel mismatch", self.name);
        let m = T::from_f64((n * h * w) as f64);

        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut sum = T::zero();
            for ni in 0..n {
                for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    sum = sum + *v;
                }
            }
            let mu = sum / m;
            let mut sq = T::zero();
            for ni in 0..n {
                for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    let d = *v - mu;
                    sq = sq + d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }

        let inv_std = var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let mut x_hat = x.clone();
        for ((mut xn, &mu), &is) in x_hat
            .axis_iter_mut(Axis(1))
            .zip(mean.iter())
            .zip(inv_std.iter())
        {
            xn.mapv_inplace(|v| (v - mu) * is);
        }

        let mut y = x_hat.clone();
        for ((mut yn, &g), &b) in y
            .axis_iter_mut(Axis(1))
            .zip(self.gamma.value.iter())
            .zip(self.beta.value.iter())
        {
            yn.mapv_inplace(|v| v * g + b);
        }

        // Running stats: unbiased variance when the batch has more than one
        // element per channel.
        let count = (n * h * w) as f64;
        let unbias = if count > 1.0 {
            T::from_f64(count / (count - 1.0))
        } else {
            T::one()
        };
        let mom = self.momentum;
        for ci in 0..c {
            self.running_mean[ci] =
                (T::one() - mom) * self.running_mean[ci] + mom * mean[ci];
            self.running_var[ci] =
                (T::one() - mom) * self.running_var[ci] + mom * var[ci] * unbias;
        }

        self.cache = Some(Cache { x_hat, inv_std });
        y
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let c = self.channels();
        assert_eq!(x.dim().1, c, "batch norm {}: channel mismatch", self.name);
        let mut y = x.clone();
        for ci in 0..c {
            let mu = self.running_mean[ci];
            let is = T::one() / (self.running_var[ci] + self.eps).sqrt();
            let g = self.gamma.value[ci];
            let b = self.beta.value[ci];
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mu) * is * g + b);
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array4<T>) -> Array4<T> {
        let cache = self
            .cache
            .as_ref()
            .expect("batch norm backward called without a training forward");
        let (n, c, h, w) = grad_out.dim();
        let m = T::from_f64((n * h * w) as f64);

        let mut grad_in = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let g = self.gamma.value[ci];
            let is = cache.inv_std[ci];

            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let dy = grad_out.index_axis(Axis(0), ni);
                let dy = dy.index_axis(Axis(0), ci);
                let xh = cache.x_hat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                for (&d, &x) in dy.iter().zip(xh.iter()) {
                    sum_dy = sum_dy + d;
                    sum_dy_xhat = sum_dy_xhat + d * x;
                }
            }
            self.gamma.grad[ci] = self.gamma.grad[ci] + sum_dy_xhat;
            self.beta.grad[ci] = self.beta.grad[ci] + sum_dy;

            for ni in 0..n {
                let dy = grad_out.index_axis(Axis(0), ni);
                let dy = dy.index_axis(Axis(0), ci);
                let xh = cache.x_hat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                let mut gi = grad_in.index_axis_mut(Axis(0), ni);
                let mut gi = gi.index_axis_mut(Axis(0), ci);
                for ((o, &d), &x) in gi.iter_mut().zip(dy.iter()).zip(xh.iter()) {
                    *o = g * is * (d - sum_dy / m - x * sum_dy_xhat / m);
                }
            }
        }
        grad_in
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(self.gamma.as_view_mut());
        f(self.beta.as_view_mut());
    }
}
