use ndarray::ArrayD;

use super::Scalar;

/// Central-difference gradient check.
///
/// `f` evaluates the scalar objective at a point; `analytic` is the gradient
/// produced by the backward pass under test. Returns the max over coordinates
/// of `|analytic - numeric| / max(1e-8, |numeric|)`.
///
/// The oracle is deliberately independent of the layer implementations: it
/// only ever calls `f` as a black box.
pub fn finite_diff_check<T, F>(mut f: F, point: &ArrayD<T>, analytic: &ArrayD<T>, eps: f64) -> f64
where
    T: Scalar,
    F: FnMut(&ArrayD<T>) -> T,
{
    assert_eq!(point.shape(), analytic.shape());
    let mut x = point.clone();
    let analytic_flat: Vec<f64> = analytic.iter().map(|v| v.as_f64()).collect();
    let mut worst = 0.0f64;
    let h = T::from_f64(eps);
    for i in 0..point.len() {
        let flat = x.as_slice_mut().expect("point is contiguous");
        let orig = flat[i];
        flat[i] = orig + h;
        let up = f(&x).as_f64();
        x.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&x).as_f64();
        x.as_slice_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic_flat[i] - numeric).abs() / numeric.abs().max(1e-8);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn exact_for_sum_of_squares() {
        let point = ArrayD::from_shape_vec(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let analytic = point.mapv(|v: f64| 2.0 * v);
        let err = finite_diff_check(|x| x.iter().map(|v| v * v).sum(), &point, &analytic, 1e-4);
        assert!(err <= 1e-7, "err={err}");
    }

    #[test]
    fn detects_corrupted_gradient() {
        let point = ArrayD::from_shape_vec(vec![3], vec![0.5, 1.5, -0.75]).unwrap();
        // deliberately wrong: scaled by 1.5
        let analytic = point.mapv(|v: f64| 3.0 * v);
        let err = finite_diff_check(|x| x.iter().map(|v| v * v).sum(), &point, &analytic, 1e-4);
        assert!(err > 1e-2, "corrupted gradient slipped through: err={err}");
    }
}
