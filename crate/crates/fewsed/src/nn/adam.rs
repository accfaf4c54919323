use crate::error::{Error, Result};

use super::{HasParams, Scalar};

/// Adam optimizer with bias correction.
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step_count: u32,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step_count: 0,
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u32 {
        self.step_count
    }

    /// Applies one update to every parameter of `model`. If any gradient is
    /// non-finite the step is aborted before touching any parameter.
    pub fn step(&mut self, model: &mut dyn HasParams<T>, lr: T) -> Result<()> {
        let mut bad: Option<String> = None;
        model.visit_params(&mut |p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(p.name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {name}; optimizer step aborted"
            )));
        }

        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = T::from_f64(1.0 - self.beta1.as_f64().powi(t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.as_f64().powi(t as i32));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let one = T::one();

        model.visit_params(&mut |p| {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamView};

    struct Single {
        p: Param<f64, ndarray::Ix1>,
    }

    impl HasParams<f64> for Single {
        fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
            f(self.p.as_view_mut());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut model = Single {
            p: Param::zeros("p", 4),
        };
        model.p.value.fill(1.25);
        let mut opt = Adam::new();
        opt.step(&mut model, 0.1).unwrap();
        assert!(model.p.value.iter().all(|&v| v == 1.25));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut model = Single {
            p: Param::zeros("p", 2),
        };
        model.p.value[0] = 1.0;
        model.p.value[1] = 1.0;
        model.p.grad[0] = 0.5;
        model.p.grad[1] = -3.0;
        let mut opt = Adam::new();
        opt.step(&mut model, 0.01).unwrap();
        assert!((model.p.value[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((model.p.value[1] - (1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = x^2 from x=1, 200 steps at lr 0.05
        let mut model = Single {
            p: Param::zeros("p", 1),
        };
        model.p.value[0] = 1.0;
        let mut opt = Adam::new();
        for _ in 0..200 {
            model.p.grad[0] = 2.0 * model.p.value[0];
            opt.step(&mut model, 0.05).unwrap();
        }
        assert!(
            model.p.value[0].abs() < 0.05,
            "got {}",
            model.p.value[0]
        );
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut model = Single {
            p: Param::zeros("p", 2),
        };
        model.p.value[0] = 1.0;
        model.p.grad[0] = f64::NAN;
        let mut opt = Adam::new();
        let err = opt.step(&mut model, 0.1).unwrap_err();
        assert!(err.to_string().contains("p"));
        assert_eq!(model.p.value[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
