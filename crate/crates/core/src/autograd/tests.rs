use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{check_gradient, DEFAULT_EPS};
use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, seed).map(|v| v.abs() + 0.5)
}

fn assert_grad(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let r = check_gradient(inputs, build, DEFAULT_EPS, 200);
    assert!(r.rel_error < 1e-6, "relative error {}", r.rel_error);
}

#[test]
fn elementwise_binary_gradients() {
    let a = rand_tensor(&[3, 4], 1);
    let b = positive_tensor(&[3, 4], 2);
    assert_grad(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    assert_grad(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    assert_grad(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_grad(&[a, b], |g, v| g.div(v[0], v[1]));
}

#[test]
fn unary_gradients() {
    let a = rand_tensor(&[2, 5], 3);
    let p = positive_tensor(&[2, 5], 4);
    assert_grad(std::slice::from_ref(&a), |g, v| g.elu(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.gelu(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.tanh(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.exp(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.square(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.relu(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.abs(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.neg(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.3));
    assert_grad(&[a], |g, v| g.mul_scalar(v[0], -1.7));
    assert_grad(std::slice::from_ref(&p), |g, v| g.ln(v[0]));
    assert_grad(std::slice::from_ref(&p), |g, v| g.sqrt(v[0]));
    assert_grad(&[p], |g, v| g.recip(v[0]));
}

#[test]
fn broadcast_gradients() {
    let x = rand_tensor(&[3, 4], 5);
    let cols = rand_tensor(&[4], 6);
    let rows = rand_tensor(&[3], 7);
    let s = Tensor::scalar(0.7);
    assert_grad(&[x.clone(), cols.clone()], |g, v| g.add_col_bias(v[0], v[1]));
    assert_grad(&[x.clone(), cols], |g, v| g.mul_cols(v[0], v[1]));
    assert_grad(&[x.clone(), rows.clone()], |g, v| g.add_row_bias(v[0], v[1]));
    assert_grad(&[x.clone(), rows], |g, v| g.mul_rows(v[0], v[1]));
    assert_grad(&[x.clone(), s.clone()], |g, v| g.scale_by(v[0], v[1]));
    assert_grad(&[x, s], |g, v| g.div_by(v[0], v[1]));
}

#[test]
fn reduction_gradients() {
    let x = rand_tensor(&[3, 2, 4], 8);
    assert_grad(std::slice::from_ref(&x), |g, v| g.sum(v[0]));
    assert_grad(std::slice::from_ref(&x), |g, v| g.mean(v[0]));
    assert_grad(std::slice::from_ref(&x), |g, v| g.row_sum_squares(v[0]));
    assert_grad(std::slice::from_ref(&x), |g, v| g.mean_leading(v[0]));
    assert_grad(std::slice::from_ref(&x), |g, v| g.diff_x(v[0]));
    assert_grad(&[x], |g, v| g.diff_y(v[0]));
}

#[test]
fn min_routes_gradient_to_argmin() {
    let a = rand_tensor(&[10], 9);
    let b = rand_tensor(&[10], 10);
    let c = rand_tensor(&[10], 11);
    assert_grad(&[a.clone(), b.clone(), c.clone()], |g, v| {
        g.min_elementwise(&[v[0], v[1], v[2]])
    });
    let mut g = Graph::new();
    let va = g.variable(a.clone());
    let vb = g.variable(b.clone());
    let m = g.min_elementwise(&[va, vb]);
    let s = g.sum(m);
    let grads = g.backward(s);
    for i in 0..10 {
        let a_wins = a.data()[i] <= b.data()[i];
        assert_eq!(grads.get(va).unwrap()[i], if a_wins { 1.0 } else { 0.0 });
        assert_eq!(grads.get(vb).unwrap()[i], if a_wins { 0.0 } else { 1.0 });
    }
}

#[test]
fn matrix_and_shape_gradients() {
    let a = rand_tensor(&[3, 4], 12);
    let b = rand_tensor(&[4, 2], 13);
    assert_grad(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.transpose(v[0]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[2, 6]));
    assert_grad(std::slice::from_ref(&a), |g, v| g.slice_cols(v[0], 1, 3));
    assert_grad(std::slice::from_ref(&a), |g, v| g.slice_rows(v[0], 1, 3));
    let c = rand_tensor(&[3, 2], 14);
    assert_grad(&[a.clone(), c], |g, v| g.concat_cols(&[v[0], v[1]]));
    let d = rand_tensor(&[2, 4], 15);
    assert_grad(&[a, d], |g, v| g.concat_rows(&[v[0], v[1]]));
}

#[test]
fn matmul_matches_loops() {
    let a = rand_tensor(&[5, 7], 16);
    let b = rand_tensor(&[7, 3], 17);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb);
    for i in 0..5 {
        for j in 0..3 {
            let expect: f64 = (0..7).map(|k| a.data()[i * 7 + k] * b.data()[k * 3 + j]).sum();
            assert!((g.value(c).data()[i * 3 + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_and_layer_norm() {
    let x = rand_tensor(&[4, 5], 18);
    assert_grad(std::slice::from_ref(&x), |g, v| g.softmax_rows(v[0]));
    let gamma = rand_tensor(&[5], 19);
    let beta = rand_tensor(&[5], 20);
    assert_grad(&[x.clone(), gamma, beta], |g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-5));

    let mut g = Graph::new();
    let v = g.constant(x);
    let s = g.softmax_rows(v);
    for row in g.value(s).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(&[1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap());
    let s = g.softmax_rows(v);
    assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn conv2d_gradients() {
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2), (2, 2, 0)] {
        let x = rand_tensor(&[2, 7, 6], 21);
        let w = rand_tensor(&[3, 2, k, k], 22);
        let b = rand_tensor(&[3], 23);
        let spec = Conv2dSpec::new(stride, pad);
        assert_grad(&[x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec));
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let x = rand_tensor(&[2, 5, 6], 24);
    let w = rand_tensor(&[3, 2, 3, 3], 25);
    let spec = Conv2dSpec::new(2, 1);
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(vx, vw, None, spec);
    assert_eq!(g.shape(y), &[3, 3, 3]);
    for co in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                acc += x.data()[ci * 30 + iy as usize * 6 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                let got = g.value(y).data()[(co * 3 + oy) * 3 + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn padding_pooling_resize_patchify_gradients() {
    let x = rand_tensor(&[2, 4, 5], 26);
    assert_grad(std::slice::from_ref(&x), |g, v| g.pad_reflect(v[0], 1));
    assert_grad(std::slice::from_ref(&x), |g, v| g.avg_pool(v[0], 3));
    assert_grad(std::slice::from_ref(&x), |g, v| g.resize_bilinear(v[0], 8, 10));
    assert_grad(std::slice::from_ref(&x), |g, v| g.resize_bilinear(v[0], 3, 7));
    let y = rand_tensor(&[3, 4, 6], 27);
    assert_grad(&[y], |g, v| g.patchify(v[0], 2));
}

#[test]
fn reflect_padding_layout() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let p = g.pad_reflect(x, 1);
    assert_eq!(g.shape(p), &[1, 4, 5]);
    assert_eq!(&g.value(p).data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    assert_eq!(&g.value(p).data()[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
}

#[test]
fn resize_same_size_is_identity() {
    let x = rand_tensor(&[2, 3, 4], 28);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.resize_bilinear(v, 3, 4);
    assert_eq!(g.value(r), &x);
}

#[test]
fn patchify_raster_order() {
    let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(&[1, 4, 4], data).unwrap());
    let p = g.patchify(v, 2);
    assert_eq!(g.shape(p), &[4, 4]);
    assert_eq!(&g.value(p).data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&g.value(p).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(2.0));
    let b = g.variable(Tensor::scalar(3.0));
    let c = g.mul(a, b);
    let grads = g.backward(c);
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b), Some(&[2.0][..]));
}

#[test]
fn shared_inputs_accumulate() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x);
    let z = g.add(y, x);
    let grads = g.backward(z);
    assert_eq!(grads.get(x), Some(&[7.0][..]));
}
