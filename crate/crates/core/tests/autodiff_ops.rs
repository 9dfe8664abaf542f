mod common;

use common::{grad_check, matrix_conv_transpose2d, naive_conv2d, random_tensor, rng};
use mbseg::autodiff::{AutodiffError, Graph, Tensor};
use proptest::prelude::*;

const FD_TOL: f64 = 1e-4;

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(1);
    let x = random_tensor(&[2, 3, 5, 4], &mut r);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let wi = g.constant(w);
    let y = g.conv2d(xi, wi, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_stem_resolution() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 218, 218]));
    let w = g.constant(Tensor::zeros(&[2, 1, 7, 7]));
    let y = g.conv2d(x, w, None, 2, 3).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 109, 109]);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(2);
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1)] {
        let x = random_tensor(&[1, 2, 8, 7], &mut r);
        let w = random_tensor(&[3, 2, k, k], &mut r);
        let b = random_tensor(&[3], &mut r);
        let expected = naive_conv2d(&x, &w, b.data(), stride, pad);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
        let got = g.value(y);
        assert_eq!(got.shape(), expected.shape());
        for (a, e) in got.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad} k {k}: {a} vs {e}");
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(AutodiffError::Shape(_))));
}

#[test]
fn conv_transpose_doubles_resolution() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 7, 7]));
    let w = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
    let y = g.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 14, 14]);
}

#[test]
fn conv_transpose_stamps_kernel() {
    // Delta at (1, 2) of a 3x3 map stamps the 2x2 kernel at rows 2..4, cols 4..6.
    let mut x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    x.data_mut()[5] = 1.0;
    let w = Tensor::from_f64_slice(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let (xi, wi) = (g.constant(x), g.constant(w));
    let y = g.conv_transpose2d(xi, wi, None, 2).unwrap();
    let out = g.value(y).data();
    let mut expected = vec![0.0; 36];
    expected[2 * 6 + 4] = 1.0;
    expected[2 * 6 + 5] = 2.0;
    expected[3 * 6 + 4] = 3.0;
    expected[3 * 6 + 5] = 4.0;
    assert_eq!(out, &expected[..]);
}

#[test]
fn conv_transpose_matches_matrix_transpose() {
    let mut r = rng(3);
    let x = random_tensor(&[2, 3, 4, 3], &mut r);
    let w = random_tensor(&[3, 2, 2, 2], &mut r);
    let expected = matrix_conv_transpose2d(&x, &w, 2);
    let mut g = Graph::new();
    let (xi, wi) = (g.constant(x), g.constant(w));
    let y = g.conv_transpose2d(xi, wi, None, 2).unwrap();
    for (a, e) in g.value(y).data().iter().zip(expected.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_train_normalizes() {
    let mut r = rng(4);
    let x = random_tensor(&[3, 2, 4, 5], &mut r).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let xi = g.constant(x);
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm_train(xi, gamma, beta, 1e-5).unwrap();
    let yv = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| yv[(b * 2 + ch) * 20..(b * 2 + ch + 1) * 20].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert_eq!(stats.mean.len(), 2);
}

#[test]
fn batchnorm_constant_channel_gives_beta() {
    let mut g = Graph::new();
    let xi = g.constant(Tensor::<f64>::full(&[2, 1, 3, 3], 4.2));
    let gamma = g.constant(Tensor::full(&[1], 1.7));
    let beta = g.constant(Tensor::full(&[1], -0.3));
    let (y, _) = g.batch_norm_train(xi, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v + 0.3).abs() < 1e-12));
}

#[test]
fn maxpool_resolution_and_ties() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 109, 109]));
    let y = g.maxpool2d(x, 3, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 55, 55]);
    let y0 = g.maxpool2d(x, 3, 2, 0).unwrap();
    assert_eq!(g.value(y0).shape(), &[1, 1, 54, 54]);
    let ya = g.maxpool2d_padded(x, 3, 2, (0, 1)).unwrap();
    assert_eq!(g.value(ya).shape(), &[1, 1, 54, 54]);

    // All-equal window: gradient goes to the first element in scan order.
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.maxpool2d(x, 3, 1, 0).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let gx = g.grad(x).unwrap().data();
    assert_eq!(gx[0], 1.0);
    assert_eq!(gx.iter().sum::<f64>(), 1.0);
}

#[test]
fn softmax_concat_add_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2, 2, 2], 0.3));
    let s = g.softmax_channels(x).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

    let a = g.constant(Tensor::full(&[1, 2, 2, 2], 1.0));
    let b = g.constant(Tensor::full(&[1, 3, 2, 2], 2.0));
    let c = g.concat_channels(&[a, b]).unwrap();
    let cv = g.value(c);
    assert_eq!(cv.shape(), &[1, 5, 2, 2]);
    assert!(cv.data()[..8].iter().all(|&v| v == 1.0));
    assert!(cv.data()[8..].iter().all(|&v| v == 2.0));

    assert!(g.add(a, b).is_err());
    let bad = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(g.concat_channels(&[a, bad]).is_err());
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[2, 3], 0.7));
    let unused = g.variable(Tensor::full(&[4], 1.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.grad(unused).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(matches!(g.backward(s), Err(AutodiffError::AlreadyBackpropagated)));
    assert!(matches!(
        {
            let mut g2 = Graph::<f64>::new();
            let v = g2.variable(Tensor::zeros(&[2]));
            g2.backward(v)
        },
        Err(AutodiffError::NotScalar(_))
    ));
}

#[test]
fn gradients_of_every_layer() {
    let mut r = rng(10);
    let x = random_tensor(&[2, 3, 6, 5], &mut r);
    let w = random_tensor(&[4, 3, 3, 3], &mut r);
    let b = random_tensor(&[4], &mut r);
    let e = grad_check(&[x.clone(), w, b], |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap(), 1);
    assert!(e < FD_TOL, "conv2d {e}");

    let w1 = random_tensor(&[5, 3, 1, 1], &mut r);
    let e = grad_check(&[x.clone(), w1], |g, ids| g.conv2d(ids[0], ids[1], None, 1, 0).unwrap(), 2);
    assert!(e < FD_TOL, "conv2d 1x1 {e}");

    let wt = random_tensor(&[3, 2, 2, 2], &mut r);
    let bt = random_tensor(&[2], &mut r);
    let e = grad_check(&[x.clone(), wt, bt], |g, ids| {
        g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2).unwrap()
    }, 3);
    assert!(e < FD_TOL, "conv_transpose2d {e}");

    let gamma = random_tensor(&[3], &mut r);
    let beta = random_tensor(&[3], &mut r);
    let e = grad_check(&[x.clone(), gamma.clone(), beta.clone()], |g, ids| {
        g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).unwrap().0
    }, 4);
    assert!(e < 1e-6, "batchnorm train {e}");
    let e = grad_check(&[x.clone(), gamma, beta], |g, ids| {
        g.batch_norm_eval(ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
            .unwrap()
    }, 5);
    assert!(e < 1e-6, "batchnorm eval {e}");

    let e = grad_check(std::slice::from_ref(&x), |g, ids| g.relu(ids[0]), 6);
    assert!(e < FD_TOL, "relu {e}");
    let e = grad_check(std::slice::from_ref(&x), |g, ids| g.maxpool2d(ids[0], 3, 2, 1).unwrap(), 7);
    assert!(e < FD_TOL, "maxpool {e}");
    let e = grad_check(std::slice::from_ref(&x), |g, ids| g.softmax_channels(ids[0]).unwrap(), 8);
    assert!(e < FD_TOL, "softmax {e}");
    let y = random_tensor(&[2, 2, 6, 5], &mut r);
    let e = grad_check(&[x.clone(), y.clone()], |g, ids| g.concat_channels(&[ids[0], ids[1]]).unwrap(), 9);
    assert!(e < FD_TOL, "concat {e}");
    let z = random_tensor(&[2, 3, 6, 5], &mut r);
    let e = grad_check(&[x.clone(), z], |g, ids| g.add(ids[0], ids[1]).unwrap(), 10);
    assert!(e < FD_TOL, "add {e}");
    let e = grad_check(std::slice::from_ref(&x), |g, ids| g.fit_spatial(ids[0], 5, 7).unwrap(), 11);
    assert!(e < FD_TOL, "fit_spatial {e}");
    let e = grad_check(std::slice::from_ref(&x), |g, ids| g.select_channel(ids[0], 1).unwrap(), 12);
    assert!(e < FD_TOL, "select_channel {e}");
}

#[test]
fn dice_loss_gradient() {
    let mut r = rng(20);
    let p = random_tensor(&[2, 1, 4, 4], &mut r).map(|v| 0.5 + 0.45 * v);
    let target: Vec<f64> = (0..32).map(|i| f64::from(i % 3 == 0)).collect();
    let target = Tensor::new(vec![2, 1, 4, 4], target).unwrap();
    let e = grad_check(&[p], |g, ids| g.dice_loss(ids[0], target.clone()).unwrap(), 21);
    assert!(e < FD_TOL, "dice {e}");
}

#[test]
fn chain_of_all_layers_gradient() {
    let mut r = rng(30);
    let x = random_tensor(&[2, 1, 8, 8], &mut r);
    let w1 = random_tensor(&[3, 1, 3, 3], &mut r);
    let g1 = random_tensor(&[3], &mut r);
    let b1 = random_tensor(&[3], &mut r);
    let wt = random_tensor(&[3, 2, 2, 2], &mut r);
    let w2 = random_tensor(&[2, 5, 3, 3], &mut r);
    let e = grad_check(&[x, w1, g1, b1, wt, w2], |g, ids| {
        let c1 = g.conv2d(ids[0], ids[1], None, 2, 1).unwrap(); // 4x4
        let (bn, _) = g.batch_norm_train(c1, ids[2], ids[3], 1e-5).unwrap();
        let a = g.relu(bn);
        let p = g.maxpool2d(a, 3, 2, 1).unwrap(); // 2x2
        let u = g.conv_transpose2d(p, ids[4], None, 2).unwrap(); // 4x4, 2 ch
        let cat = g.concat_channels(&[u, a]).unwrap(); // 5 ch
        let s = g.add(cat, cat).unwrap();
        let c2 = g.conv2d(s, ids[5], None, 1, 1).unwrap();
        g.softmax_channels(c2).unwrap()
    }, 31);
    assert!(e < FD_TOL, "chain {e}");
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(40);
    let x = random_tensor(&[2, 3, 9, 9], &mut r).cast::<f32>();
    let w = random_tensor(&[4, 3, 3, 3], &mut r).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let (xi, wi) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xi, wi, None, 1, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_is_a_distribution(seed in 0u64..1000, c in 2usize..5, h in 1usize..5) {
        let mut r = rng(seed);
        let x = random_tensor(&[2, c, h, 3], &mut r).map(|v| 20.0 * v);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let y = g.softmax_channels(xi).unwrap();
        let v = g.value(y).data();
        for b in 0..2 {
            for p in 0..h * 3 {
                let s: f64 = (0..c).map(|ch| v[(b * c + ch) * h * 3 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!((0..c).all(|ch| v[(b * c + ch) * h * 3 + p] >= 0.0));
            }
        }
    }

    #[test]
    fn conv_matches_oracle_on_random_shapes(
        seed in 0u64..1000,
        c in 1usize..4, o in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3,
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&[1, c, h, w], &mut r);
        let wt = random_tensor(&[o, c, k, k], &mut r);
        let expected = naive_conv2d(&x, &wt, &vec![0.0; o], stride, k / 2);
        let mut g = Graph::new();
        let (xi, wi) = (g.constant(x), g.constant(wt));
        let y = g.conv2d(xi, wi, None, stride, k / 2).unwrap();
        for (a, e) in g.value(y).data().iter().zip(expected.data()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }
}
