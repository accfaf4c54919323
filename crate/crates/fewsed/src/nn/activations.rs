use ndarray::Array4;

use super::Scalar;

/// Leaky rectified linear unit: `x >= 0 -> x`, `x < 0 -> slope * x`.
pub struct LeakyRelu<T: Scalar> {
    pub slope: T,
    cached_input: Option<Array4<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: T) -> Self {
        assert!(
            slope > T::zero() && slope < T::one(),
            "leaky relu slope must be in (0,1)"
        );
        LeakyRelu {
            slope,
            cached_input: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        if train {
            self.cached_input = Some(x.clone());
        }
        self.forward_eval(x)
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let slope = self.slope;
        x.mapv(|v| if v >= T::zero() { v } else { slope * v })
    }

    pub fn backward(&mut self, grad_out: &Array4<T>) -> Array4<T> {
        let x = self
            .cached_input
            .as_ref()
            .expect("leaky relu backward called without a training forward");
        let slope = self.slope;
        let mut g = grad_out.clone();
        g.zip_mut_with(x, |gv, &xv| {
            if xv < T::zero() {
                *gv = *gv * slope;
            }
        });
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_and_gradient() {
        let mut act = LeakyRelu::<f64>::new(0.01);
        let mut x = Array4::zeros((1, 1, 1, 3));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 0, 0, 1]] = -2.0;
        x[[0, 0, 0, 2]] = -1.0;
        let y = act.forward(&x, true);
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert!((y[[0, 0, 0, 1]] + 0.02).abs() < 1e-15);

        let mut go = Array4::zeros((1, 1, 1, 3));
        go.fill(1.0);
        let gi = act.backward(&go);
        assert_eq!(gi[[0, 0, 0, 0]], 1.0); // gradient at +1 is 1
        assert_eq!(gi[[0, 0, 0, 2]], 0.01); // gradient at -1 is slope
    }
}
