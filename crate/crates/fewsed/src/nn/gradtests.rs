//! Per-layer finite-difference smoke checks. The full multi-seed sweep lives
//! in the acceptance suite; these keep backward-pass regressions visible in
//! ordinary unit runs.

use ndarray::{Array1, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub(crate) fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut a = Array4::zeros(shape);
    for v in a.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    a
}

fn to_dyn(a: &Array4<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

fn from_dyn(a: &ArrayD<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let v: Vec<f64> = a.iter().copied().collect();
    Array4::from_shape_vec(shape, v).unwrap()
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (2, 2, 5, 4);
        let x = rand4(&mut rng, shape);
        let w_loss = rand4(&mut rng, (2, 3, 5, 4));
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 1, 1);
        for v in conv.weight.value.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in conv.bias.value.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }

        // w.r.t. input
        let _ = conv.forward(&x, true);
        let gin = conv.backward(&w_loss);
        let weight = conv.weight.value.clone();
        let bias = conv.bias.value.clone();
        let eval = |xx: &ArrayD<f64>, ww: &Array4<f64>, bb: &Array1<f64>| {
            let mut c = Conv2d::<f64>::new("c", 2, 3, 3, 1, 1);
            c.weight.value = ww.clone();
            c.bias.value = bb.clone();
            let y = c.forward_eval(&from_dyn(xx, shape));
            y.iter().zip(w_loss.iter()).map(|(a, b)| a * b).sum()
        };
        let err = finite_diff_check(
            |xx| eval(xx, &weight, &bias),
            &to_dyn(&x),
            &to_dyn(&gin),
            1e-5,
        );
        assert!(err <= 1e-4, "conv input grad seed {seed}: err {err}");

        // w.r.t. weight
        let gw = conv.weight.grad.clone().into_dyn();
        let x_dyn = to_dyn(&x);
        let err = finite_diff_check(
            |ww| {
                let w4 = from_dyn(ww, (3, 2, 3, 3));
                eval(&x_dyn, &w4, &bias)
            },
            &weight.clone().into_dyn(),
            &gw,
            1e-5,
        );
        assert!(err <= 1e-4, "conv weight grad seed {seed}: err {err}");

        // w.r.t. bias
        let gb = conv.bias.grad.clone().into_dyn();
        let err = finite_diff_check(
            |bb| {
                let b1: Array1<f64> = bb.clone().into_dimensionality().unwrap();
                eval(&x_dyn, &weight, &b1)
            },
            &bias.clone().into_dyn(),
            &gb,
            1e-5,
        );
        assert!(err <= 1e-4, "conv bias grad seed {seed}: err {err}");
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = (3, 2, 4, 3);
        let x = rand4(&mut rng, shape);
        let w_loss = rand4(&mut rng, shape);
        let gamma: Array1<f64> = Array1::from_iter((0..2).map(|_| rng.gen_range(0.5..1.5)));
        let beta: Array1<f64> = Array1::from_iter((0..2).map(|_| rng.gen_range(-0.5..0.5)));

        let make = |g: &Array1<f64>, b: &Array1<f64>| {
            let mut bn = BatchNorm2d::<f64>::new("bn", 2);
            bn.gamma.value = g.clone();
            bn.beta.value = b.clone();
            bn
        };
        let mut bn = make(&gamma, &beta);
        let _ = bn.forward(&x, true);
        let gin = bn.backward(&w_loss);

        let loss = |bn_out: Array4<f64>| -> f64 {
            bn_out.iter().zip(w_loss.iter()).map(|(a, b)| a * b).sum()
        };

        let err = finite_diff_check(
            |xx| loss(make(&gamma, &beta).forward(&from_dyn(xx, shape), true)),
            &to_dyn(&x),
            &to_dyn(&gin),
            1e-5,
        );
        assert!(err <= 1e-4, "bn input grad seed {seed}: err {err}");

        let err = finite_diff_check(
            |gg| {
                let g1: Array1<f64> = gg.clone().into_dimensionality().unwrap();
                loss(make(&g1, &beta).forward(&x, true))
            },
            &gamma.clone().into_dyn(),
            &bn.gamma.grad.clone().into_dyn(),
            1e-5,
        );
        assert!(err <= 1e-4, "bn gamma grad seed {seed}: err {err}");

        let err = finite_diff_check(
            |bb| {
                let b1: Array1<f64> = bb.clone().into_dimensionality().unwrap();
                loss(make(&gamma, &b1).forward(&x, true))
            },
            &beta.clone().into_dyn(),
            &bn.beta.grad.clone().into_dyn(),
            1e-5,
        );
        assert!(err <= 1e-4, "bn beta grad seed {seed}: err {err}");
    }
}

#[test]
fn pool_and_activation_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = (2, 2, 6, 4);
        // keep values away from relu kinks and pooling ties
        let mut x = rand4(&mut rng, shape);
        for (i, v) in x.iter_mut().enumerate() {
            let s = if *v >= 0.0 { 1.0 } else { -1.0 };
            *v = s * (v.abs() + 0.05) + (i as f64) * 1e-3;
        }
        let w_loss = rand4(&mut rng, shape);

        let mut act = LeakyRelu::<f64>::new(0.01);
        let _ = act.forward(&x, true);
        let gin = act.backward(&w_loss);
        let err = finite_diff_check(
            |xx| {
                let y = LeakyRelu::<f64>::new(0.01).forward_eval(&from_dyn(xx, shape));
                y.iter().zip(w_loss.iter()).map(|(a, b)| a * b).sum()
            },
            &to_dyn(&x),
            &to_dyn(&gin),
            1e-5,
        );
        assert!(err <= 1e-4, "leaky relu grad seed {seed}: err {err}");

        let mut pool = MaxPool2x2::<f64>::new();
        let y = pool.forward(&x, true);
        let w_pool = rand4(&mut rng, y.dim());
        let gin = pool.backward(&w_pool);
        let err = finite_diff_check(
            |xx| {
                let y = MaxPool2x2::<f64>::new().forward(&from_dyn(xx, shape), false);
                y.iter().zip(w_pool.iter()).map(|(a, b)| a * b).sum()
            },
            &to_dyn(&x),
            &to_dyn(&gin),
            1e-5,
        );
        assert!(err <= 1e-4, "max pool grad seed {seed}: err {err}");

        let mut apool = AdaptiveAvgPool2d::<f64>::new(4, 3);
        let y = apool.forward(&x, true);
        let w_pool = rand4(&mut rng, y.dim());
        let gin = apool.backward(&w_pool);
        let err = finite_diff_check(
            |xx| {
                let y = AdaptiveAvgPool2d::<f64>::new(4, 3).forward_eval(&from_dyn(xx, shape));
                y.iter().zip(w_pool.iter()).map(|(a, b)| a * b).sum()
            },
            &to_dyn(&x),
            &to_dyn(&gin),
            1e-5,
        );
        assert!(err <= 1e-4, "adaptive pool grad seed {seed}: err {err}");
    }
}
