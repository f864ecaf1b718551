//! Finite-difference checks for every layer's backward pass, shared by the
//! gradient tests and the acceptance run.
//!
//! Each check projects the layer output onto fixed random weights `r`, so
//! the scalar objective is `sum_k r_k * y_k` and the upstream gradient fed to
//! the backward pass is `r` itself.
#![allow(dead_code)]

use mitodet_nn::gradcheck::DEFAULT_STEP;
use mitodet_nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_params(rng: &mut ChaCha8Rng, kshape: &[usize]) -> LayerParams {
    let n = kshape.iter().product();
    let k = Tensor::new(kshape.to_vec(), random_vec(rng, n)).unwrap();
    let b = Tensor::from_vec(random_vec(rng, kshape[0]));
    LayerParams::new(k, b).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks input, kernel and bias gradients of a parameterised layer jointly.
fn check_param_layer<Fw, Bw>(
    input: Tensor,
    params: LayerParams,
    forward: Fw,
    backward: Bw,
) -> GradCheckReport
where
    Fw: Fn(&Tensor, &LayerParams) -> Tensor,
    Bw: Fn(&Tensor, &LayerParams, &Tensor) -> LayerGrads,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = forward(&input, &params).shape().to_vec();
    let r = Tensor::new(
        out_shape.clone(),
        random_vec(&mut rng, out_shape.iter().product()),
    )
    .unwrap();
    let n_in = input.len();
    let mut point = input.values().to_vec();
    point.extend(params.flat_values());
    let f = |x: &[f64]| {
        let inp = Tensor::new(input.shape().to_vec(), x[..n_in].to_vec()).unwrap();
        let mut p = params.clone();
        p.set_flat_values(&x[n_in..]);
        let y = forward(&inp, &p);
        let g = backward(&inp, &p, &r);
        let mut grad = g.input.values().to_vec();
        grad.extend(&g.params.kernels);
        grad.extend(&g.params.bias);
        (dot(y.values(), r.values()), grad)
    };
    finite_difference_check(f, &point, DEFAULT_STEP, TOL)
}

pub fn conv2d_cases() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![2, 8, 8], random_vec(&mut rng, 128)).unwrap();
    let p = random_params(&mut rng, &[3, 2, 3, 3]);
    let p2 = random_params(&mut rng, &[3, 2, 2, 2]);
    [(1, 1, &p), (1, 0, &p), (1, 2, &p), (2, 0, &p2), (2, 1, &p2)]
        .into_iter()
        .map(|(stride, pad, p)| {
            let r = check_param_layer(
                x.clone(),
                p.clone(),
                |x, p| conv2d(x, p, stride, pad).unwrap(),
                |x, p, g| conv2d_backward(x, p, stride, pad, g).unwrap(),
            );
            (format!("conv2d stride {stride} pad {pad}"), r)
        })
        .collect()
}

pub fn conv3d_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(vec![1, 3, 6, 6], random_vec(&mut rng, 108)).unwrap();
    let p = random_params(&mut rng, &[2, 1, 3, 3, 3]);
    check_param_layer(
        x,
        p,
        |x, p| conv3d(x, p, 1, [0, 1, 1]).unwrap(),
        |x, p, g| conv3d_backward(x, p, 1, [0, 1, 1], g).unwrap(),
    )
}

pub fn linear_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_vec(random_vec(&mut rng, 4));
    let p = random_params(&mut rng, &[3, 4]);
    check_param_layer(
        x,
        p,
        |x, p| linear(x, p).unwrap(),
        |x, p, g| linear_backward(x, p, g).unwrap(),
    )
}

pub fn max_pool_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![1, 6, 6], random_vec(&mut rng, 36)).unwrap();
    let r_out = Tensor::new(vec![1, 3, 3], random_vec(&mut rng, 9)).unwrap();
    let f = |v: &[f64]| {
        let t = Tensor::new(vec![1, 6, 6], v.to_vec()).unwrap();
        let y = max_pool2d(&t, 2, 2).unwrap();
        let g = max_pool2d_backward(&t, 2, 2, &r_out).unwrap();
        (dot(y.values(), r_out.values()), g.into_values())
    };
    finite_difference_check(f, x.values(), DEFAULT_STEP, TOL)
}

pub fn relu_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // keep inputs away from the kink at zero
    let x: Vec<f64> = random_vec(&mut rng, 20)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let r_out = random_vec(&mut rng, 20);
    let f = |v: &[f64]| {
        let t = Tensor::from_vec(v.to_vec());
        let y = relu(&t);
        let g = relu_backward(&t, &Tensor::from_vec(r_out.clone())).unwrap();
        (dot(y.values(), &r_out), g.into_values())
    };
    finite_difference_check(f, &x, DEFAULT_STEP, TOL)
}

pub fn softmax_cross_entropy_cases() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    (0..5)
        .map(|label| {
            let logits: Vec<f64> = random_vec(&mut rng, 5).iter().map(|v| v * 3.0).collect();
            let f = |v: &[f64]| {
                let out = softmax_cross_entropy(&Tensor::from_vec(v.to_vec()), label).unwrap();
                (out.loss, out.grad.into_values())
            };
            let r = finite_difference_check(f, &logits, DEFAULT_STEP, TOL);
            (format!("softmax cross-entropy label {label}"), r)
        })
        .collect()
}

pub fn smooth_l1_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = random_vec(&mut rng, 8);
    // differences spread over both branches, away from |d| = 1
    let pred: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, t)| t + [-2.5, -0.4, 0.3, 1.7, -1.3, 0.8, 2.2, -0.1][i])
        .collect();
    let f = |v: &[f64]| {
        let out = smooth_l1(
            &Tensor::from_vec(v.to_vec()),
            &Tensor::from_vec(target.clone()),
        )
        .unwrap();
        (out.loss, out.grad.into_values())
    };
    finite_difference_check(f, &pred, DEFAULT_STEP, TOL)
}

/// A linear layer whose backward pass doubles every gradient.
pub fn corrupted_linear_case() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_vec(random_vec(&mut rng, 4));
    let p = random_params(&mut rng, &[3, 4]);
    check_param_layer(
        x,
        p,
        |x, p| linear(x, p).unwrap(),
        |x, p, g| {
            let mut out = linear_backward(x, p, g).unwrap();
            out.params.scale(2.0);
            out.input = out.input.scale(2.0);
            out
        },
    )
}

/// Every layer check, labelled.
pub fn all_layer_cases() -> Vec<(String, GradCheckReport)> {
    let mut out = conv2d_cases();
    out.push(("conv3d".into(), conv3d_case()));
    out.push(("linear".into(), linear_case()));
    out.push(("max pool".into(), max_pool_case()));
    out.push(("relu".into(), relu_case()));
    out.extend(softmax_cross_entropy_cases());
    out.push(("smooth L1".into(), smooth_l1_case()));
    out
}
