//! Every differentiable op checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vkd_tensor::{grad_check, ops, Result, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so that every
/// output entry contributes a distinct gradient.
fn weighted(y: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..y.numel()).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    Ok(ops::sum_all(&ops::mul_const(y, std::sync::Arc::new(w))?))
}

fn check(name: &str, params: &[Tensor], f: impl Fn(&[Tensor]) -> Result<Tensor> + Sync + Send) {
    let r = grad_check(|p| weighted(&f(p)?), params, H).unwrap();
    assert!(r.max_rel_err < TOL, "{}: {:?}", name, r);
}

#[test]
fn unary_ops() {
    let x = rnd(&[2, 5], 1);
    let pos = Tensor::new(&[4], vec![0.3, 1.1, 2.5, 0.9]).unwrap();
    check("neg", std::slice::from_ref(&x), |p| Ok(ops::neg(&p[0])));
    check("exp", std::slice::from_ref(&x), |p| Ok(ops::exp(&p[0])));
    check("square", std::slice::from_ref(&x), |p| Ok(ops::square(&p[0])));
    check("scale", std::slice::from_ref(&x), |p| Ok(ops::scale(&p[0], -2.5)));
    check("add_scalar", std::slice::from_ref(&x), |p| Ok(ops::add_scalar(&p[0], 0.7)));
    check("gelu", std::slice::from_ref(&x), |p| Ok(ops::gelu(&p[0])));
    check("clamp", std::slice::from_ref(&x), |p| Ok(ops::clamp(&p[0], -1.9, 1.9)));
    check("ln", std::slice::from_ref(&pos), |p| Ok(ops::ln(&p[0])));
    check("sqrt", std::slice::from_ref(&pos), |p| Ok(ops::sqrt(&p[0])));
    check("abs", &[pos], |p| Ok(ops::abs(&p[0])));
}

#[test]
fn binary_ops() {
    let a = rnd(&[3, 4], 2);
    let b = rnd(&[3, 4], 3);
    let den = ops::add_scalar(&ops::square(&b), 0.5);
    check("add", &[a.clone(), b.clone()], |p| ops::add(&p[0], &p[1]));
    check("sub", &[a.clone(), b.clone()], |p| ops::sub(&p[0], &p[1]));
    check("mul", &[a.clone(), b.clone()], |p| ops::mul(&p[0], &p[1]));
    check("div", &[a.clone(), den.detach()], |p| ops::div(&p[0], &p[1]));
    let row = rnd(&[4], 4);
    check("add_trailing", &[a.clone(), row.clone()], |p| ops::add_trailing(&p[0], &p[1]));
    check("mul_trailing", &[a.clone(), row], |p| ops::mul_trailing(&p[0], &p[1]));
    check("mul_scalar_tensor", &[a, Tensor::scalar(0.8)], |p| ops::mul_scalar_tensor(&p[0], &p[1]));
}

#[test]
fn matmul_variants() {
    check("matmul_shared", &[rnd(&[2, 3, 4], 5), rnd(&[4, 5], 6)], |p| ops::matmul(&p[0], &p[1]));
    check("matmul_batched", &[rnd(&[2, 3, 4], 7), rnd(&[2, 4, 2], 8)], |p| {
        ops::matmul(&p[0], &p[1])
    });
}

#[test]
fn reductions_and_layout() {
    let x = rnd(&[2, 3, 4], 9);
    check("sum_all", std::slice::from_ref(&x), |p| Ok(ops::sum_all(&p[0])));
    check("mean_all", std::slice::from_ref(&x), |p| Ok(ops::mean_all(&p[0])));
    check("sum_axis", std::slice::from_ref(&x), |p| ops::sum_axis(&p[0], 1));
    check("mean_axis", std::slice::from_ref(&x), |p| ops::mean_axis(&p[0], 2));
    check("max_axis", std::slice::from_ref(&x), |p| ops::max_axis(&p[0], 1));
    check("reshape", std::slice::from_ref(&x), |p| ops::reshape(&p[0], &[6, 4]));
    check("permute", std::slice::from_ref(&x), |p| ops::permute(&p[0], &[2, 0, 1]));
    check("narrow", std::slice::from_ref(&x), |p| ops::narrow(&p[0], 1, 1, 2));
    check("concat", &[x.clone(), rnd(&[2, 1, 4], 10)], |p| ops::concat(&[p[0].clone(), p[1].clone()], 1));
    check("embedding", &[rnd(&[5, 3], 11)], |p| ops::embedding(&p[0], &[4, 0, 4, 2]));
    check("pick_last", &[x], |p| ops::pick_last(&p[0], &[0, 3, 1, 2, 2, 0]));
}

#[test]
fn normalisation_and_softmax() {
    let x = rnd(&[3, 5], 12);
    check("softmax", std::slice::from_ref(&x), |p| ops::softmax(&p[0]));
    check("log_softmax", std::slice::from_ref(&x), |p| ops::log_softmax(&p[0]));
    check("layer_norm", &[x.clone(), rnd(&[5], 13), rnd(&[5], 14)], |p| {
        ops::layer_norm(&p[0], Some(&p[1]), Some(&p[2]), 1e-12)
    });
    check("layer_norm_plain", &[x], |p| ops::layer_norm(&p[0], None, None, 1e-12));
}

#[test]
fn attention_with_and_without_mask() {
    let (q, k, v) = (rnd(&[2, 2, 3, 4], 15), rnd(&[2, 2, 5, 4], 16), rnd(&[2, 2, 5, 4], 17));
    check("attention", &[q.clone(), k.clone(), v.clone()], |p| {
        ops::scaled_dot_product_attention(&p[0], &p[1], &p[2], None)
    });
    let mask = ops::AttnMask::key_padding(
        &[vec![true, true, false, true, false], vec![true; 5]],
        3,
    )
    .unwrap();
    check("attention_masked", &[q, k, v], move |p| {
        ops::scaled_dot_product_attention(&p[0], &p[1], &p[2], Some(&mask))
    });
    let c = rnd(&[1, 2, 4, 3], 18);
    let causal = ops::AttnMask::causal(1, 4);
    check("attention_causal", &[c.clone(), c.clone(), c], move |p| {
        ops::scaled_dot_product_attention(&p[0], &p[1], &p[2], Some(&causal))
    });
}

#[test]
fn image_ops() {
    let img = rnd(&[2, 2, 4, 4], 19);
    check("patchify", std::slice::from_ref(&img), |p| ops::patchify(&p[0], 2));
    check("pixel_shuffle", &[rnd(&[1, 8, 2, 2], 20)], |p| ops::pixel_shuffle(&p[0], 2));
    check("conv2d", &[img, rnd(&[18, 3], 21), rnd(&[3], 22)], |p| {
        ops::conv2d(&p[0], &p[1], Some(&p[2]), 3)
    });
}

#[test]
fn frozen_inputs_pass_gradient_through() {
    // w is a plain tensor (no grad) yet x still receives its gradient.
    let w = rnd(&[3, 3], 23);
    let x = rnd(&[2, 3], 24).requires_grad();
    let y = ops::sum_all(&ops::matmul(&ops::matmul(&x, &w).unwrap(), &w).unwrap());
    y.backward().unwrap();
    assert!(x.grad().unwrap().iter().any(|g| *g != 0.0));
    assert!(w.grad().is_none());
    assert!(!ops::matmul(&x.detach(), &w).unwrap().tracks_grad());
}

#[test]
fn broadcast_helpers() {
    let x = rnd(&[3, 2, 2], 25);
    check("mul_leading", &[x.clone(), rnd(&[3], 26)], |p| ops::mul_leading(&p[0], &p[1]));
    let pos = Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap();
    check("recip", &[pos], |p| Ok(ops::recip(&p[0])));
}
