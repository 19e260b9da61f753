use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Var;
use crate::gradcheck::check;
use crate::tensor::Tensor;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(v: &Var, seed: u64) -> Var {
    // Random projection so every output element matters distinctly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, v.shape());
    v.mul_const(&w).sum()
}

fn assert_grad(inputs: &[Tensor], f: &dyn Fn(&[Var]) -> Var) {
    let r = check(inputs, f, EPS);
    assert!(r.max_relative_error() < TOL, "relative errors {:?}", r.relative_errors);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let pos = a.map(|x| x.abs() + 0.5);
    assert_grad(&[a.clone(), b.clone()], &|v| weighted_sum(&v[0].add(&v[1]).mul(&v[0]).sub(&v[1].scale(0.3)), 7));
    assert_grad(&[a.clone()], &|v| weighted_sum(&v[0].sigmoid().add(&v[0].tanh()).add(&v[0].exp()), 8));
    assert_grad(&[pos], &|v| weighted_sum(&v[0].ln().add(&v[0].square()), 9));
    assert_grad(&[a.clone()], &|v| weighted_sum(&v[0].leaky_relu(0.2).add(&v[0].softplus()).add(&v[0].abs()), 10));
    assert_grad(&[a], &|v| v[0].mean());
}

#[test]
fn linear_algebra_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[5, 2]);
    let bias = rand_tensor(&mut rng, &[2]);
    assert_grad(&[a.clone(), b, bias], &|v| weighted_sum(&v[0].matmul(&v[1]).add_row_bias(&v[2]), 3));
    assert_grad(&[a.clone()], &|v| weighted_sum(&v[0].transpose().reshape(&[15]), 4));
    assert_grad(&[a.clone()], &|v| weighted_sum(&v[0].index_select(&[2, 0, 2]), 5));
    assert_grad(&[a.clone()], &|v| weighted_sum(&v[0].index_add(&[1, 1, 0], 4), 6));
    assert_grad(&[a.clone()], &|v| weighted_sum(&v[0].scale_rows(&[0.5, 0.0, 2.0]), 7));
    assert_grad(&[a.clone(), a.clone()], &|v| weighted_sum(&Var::concat(&[v[0].clone(), v[1].narrow(1, 1, 3)], 1), 8));
    assert_grad(&[a.clone(), a], &|v| weighted_sum(&Var::concat(&[v[0].clone(), v[1].narrow(0, 1, 2)], 0), 9));
}

#[test]
fn loss_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = rand_tensor(&mut rng, &[4, 3]);
    let probs = Tensor::from_fn(&[4, 3], |_| rng.random_range(0.1..0.9));
    let target = Tensor::from_fn(&[4, 3], |_| rng.random_range(0.0..1.0));
    assert_grad(&[logits.clone()], &|v| v[0].cross_entropy(&[0, 2, 1, 1]));
    assert_grad(&[logits], &|v| v[0].bce_with_logits(&target));
    assert_grad(&[probs], &|v| v[0].bce(&target, 1e-7));
}

#[test]
fn convolution_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 6, 6]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_grad(&[x.clone(), w.clone(), b.clone()], &|v| weighted_sum(&v[0].conv2d(&v[1], Some(&v[2]), 1, 1), 1));
    let w4 = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    assert_grad(&[x.clone(), w4, b.clone()], &|v| weighted_sum(&v[0].conv2d(&v[1], Some(&v[2]), 2, 1), 2));
    let wt = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    assert_grad(&[x.clone(), wt, b], &|v| weighted_sum(&v[0].conv_transpose2d(&v[1], Some(&v[2]), 2, 1), 3));
    assert_grad(&[x.clone()], &|v| weighted_sum(&v[0].avg_pool2().upsample_nearest2(), 4));
    assert_grad(&[x.clone()], &|v| weighted_sum(&v[0].instance_norm(1e-5), 5));
    assert_grad(&[x.clone()], &|v| weighted_sum(&v[0].channel_unit_normalize(1e-10), 6));
    let bias = rand_tensor(&mut rng, &[2]);
    assert_grad(&[x, bias], &|v| weighted_sum(&v[0].add_channel_bias(&v[1]), 7));
}

#[test]
fn conv_transpose_output_size() {
    let x = Var::constant(Tensor::zeros(&[4, 4, 4]));
    let w = Var::constant(Tensor::zeros(&[4, 2, 4, 4]));
    assert_eq!(x.conv_transpose2d(&w, None, 2, 1).shape(), [2, 8, 8]);
}

#[test]
fn sampling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mask = Tensor::from_fn(&[5, 5], |_| rng.random_range(0.0..1.0));
    // Off-grid box corners keep finite differences away from the pixel
    // inclusion boundaries.
    let bbox = Tensor::new(vec![4], vec![0.113, 0.207, 0.781, 0.869]).unwrap();
    assert_grad(&[mask, bbox], &|v| weighted_sum(&v[0].warp_into_box(&v[1], 12), 11));
    let img = rand_tensor(&mut rng, &[3, 8, 8]);
    assert_grad(&[img], &|v| weighted_sum(&v[0].crop_resize([0.1, 0.2, 0.7, 0.9], 5), 12));
    let raw = rand_tensor(&mut rng, &[3, 4]).map(|x| x * 0.5 - 1.0);
    assert_grad(&[raw], &|v| weighted_sum(&v[0].box_from_params(), 13));
}

#[test]
fn gradients_accumulate_over_repeated_use() {
    let x = Var::param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let y = x.add(&x).mul(&x).sum();
    y.backward();
    assert_eq!(x.grad().unwrap().data(), &[4.0, -8.0]);
}

#[test]
fn constants_do_not_record_graph() {
    let a = Var::constant(Tensor::ones(&[2]));
    let b = a.exp().sum();
    assert!(!b.requires_grad());
    b.backward();
    assert!(a.grad().is_none());
}

#[test]
fn crop_of_full_image_at_native_size_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = rand_tensor(&mut rng, &[3, 8, 8]);
    let crop = Var::constant(img.clone()).crop_resize([0.0, 0.0, 1.0, 1.0], 8);
    assert!(crop.value().max_abs_diff(&img) < 1e-12);
}
