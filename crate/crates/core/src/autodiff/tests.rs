use super::*;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Deterministic pseudo-random fill in (-1, 1).
fn wobble(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.7548776662 + seed as f64 * 0.5698402910).fract() * 2.0 - 1.0)
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn conv2d_output_extent_for_same_padding() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 28, 28]));
    let k = g.constant(Tensor::zeros(&[16, 1, 9, 9]));
    let b = g.constant(Tensor::zeros(&[16]));
    let y = g.conv2d(x, k, b, 4, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 28, 28]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::new();
    let xt = wobble(&[2, 1, 5, 4], 3);
    let x = g.constant(xt.clone());
    let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, k, b, 0, 1).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv2d_hand_computed_dot_product() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let k = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, k, b, 0, 1).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let k = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.conv2d(x, k, b, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_matches_direct_loops() {
    // Independent naive cross-correlation with padding and stride.
    let (b, c, h, w, o, k, pad, stride) = (2, 3, 6, 5, 4, 3, 1, 2);
    let xt = wobble(&[b, c, h, w], 1);
    let kt = wobble(&[o, c, k, k], 2);
    let bt = wobble(&[o], 5);
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let mut expect = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bt.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += xt.data()[((bi * c + ic) * h + iy as usize) * w + ix as usize]
                                    * kt.data()[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    expect[((bi * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(xt), g.constant(kt), g.constant(bt));
    let y = g.conv2d(xv, kv, bv, pad, stride).unwrap();
    assert_eq!(g.shape(y), &[b, o, oh, ow]);
    let got = g.value(y).data();
    for (a, e) in got.iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn maxpool_halves_and_routes_to_argmax() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 28, 28]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 14, 14]);

    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0., 0., 0., 1.]);
}

#[test]
fn maxpool_constant_input_and_first_tie() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 2, 4, 4], 0.3));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.3));
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    // First element of every window wins ties.
    assert_eq!(grad.data()[0], 1.0);
    assert_eq!(grad.data()[1], 0.0);
    assert_eq!(grad.data()[4], 0.0);
    assert_eq!(grad.sum(), 8.0);
}

#[test]
fn maxpool_rejects_oversized_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(g.maxpool2d(x, 4, 4).is_err());
}

#[test]
fn dense_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1., 2.]));
    let w = g.constant(t(&[2, 2], &[1., 1., 1., -1.]));
    let b = g.constant(t(&[2], &[0., 0.]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3., -1.]);

    let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = g.dense(x, eye, b).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2.]);

    let zero = g.constant(Tensor::zeros(&[1, 2]));
    let bias = g.constant(t(&[2], &[0.5, -7.0]));
    let y = g.dense(zero, w, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -7.0]);

    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.dense(x, bad, b).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[10]));
    let y = g.softmax(x, 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.1).abs() < 1e-15));

    let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

    let x = g.constant(t(&[2], &[100.0, 100.0 + 3f64.ln()]));
    let shifted = g.softmax(x, 0).unwrap();
    assert!(g.value(shifted).max_abs_diff(g.value(y)) < 1e-15);

    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1., -2., 5.]));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
}

#[test]
fn backward_contracts() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    let c = g.constant(t(&[2], &[3., 4.]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3., 4.]);
    assert!(g.grad(c).is_none());
}

#[test]
fn squash_gradient_matches_finite_differences() {
    let x = wobble(&[3, 4], 7);
    let err = finite_diff_check(
        |g, x| {
            let y = g.squash(x)?;
            Ok(g.sum_all(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn finite_diff_of_sum_is_exact() {
    let err = finite_diff_check(|g, x| Ok(g.sum_all(x)), &wobble(&[5], 1), 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn finite_diff_check_contracts() {
    let x = wobble(&[2], 0);
    assert!(matches!(
        finite_diff_check(|g, x| Ok(g.sum_all(x)), &x, 1e-2),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        finite_diff_check(|_, x| Ok(x), &x, 1e-5),
        Err(Error::Contract(_))
    ));
}

/// Weighted sum with fixed non-uniform weights, so every coordinate's
/// gradient is distinct.
fn weighted_loss(g: &mut Graph, y: Var) -> Result<Var> {
    let w = wobble(g.shape(y), 11);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum_all(p))
}

#[test]
fn gradients_of_every_op() {
    let eps = 1e-5;
    let tol = 1e-4;
    let cases: Vec<(&str, Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
        ("conv2d input", wobble(&[2, 2, 5, 5], 1), Box::new(|g, x| {
            let k = g.constant(wobble(&[3, 2, 3, 3], 2));
            let b = g.constant(wobble(&[3], 3));
            let y = g.conv2d(x, k, b, 1, 2)?;
            weighted_loss(g, y)
        })),
        ("conv2d kernel", wobble(&[3, 2, 3, 3], 2), Box::new(|g, k| {
            let x = g.constant(wobble(&[2, 2, 5, 5], 1));
            let b = g.param(wobble(&[3], 3));
            let y = g.conv2d(x, k, b, 1, 1)?;
            weighted_loss(g, y)
        })),
        ("conv2d bias", wobble(&[3], 3), Box::new(|g, b| {
            let x = g.constant(wobble(&[2, 2, 5, 5], 1));
            let k = g.constant(wobble(&[3, 2, 3, 3], 2));
            let y = g.conv2d(x, k, b, 0, 1)?;
            weighted_loss(g, y)
        })),
        ("maxpool", wobble(&[1, 2, 4, 6], 4), Box::new(|g, x| {
            let y = g.maxpool2d(x, 2, 2)?;
            weighted_loss(g, y)
        })),
        ("dense input", wobble(&[3, 4], 5), Box::new(|g, x| {
            let w = g.param(wobble(&[2, 4], 6));
            let b = g.param(wobble(&[2], 7));
            let y = g.dense(x, w, b)?;
            weighted_loss(g, y)
        })),
        ("dense weight", wobble(&[2, 4], 6), Box::new(|g, w| {
            let x = g.constant(wobble(&[3, 4], 5));
            let b = g.constant(wobble(&[2], 7));
            let y = g.dense(x, w, b)?;
            weighted_loss(g, y)
        })),
        ("softmax", wobble(&[2, 3, 4], 8), Box::new(|g, x| {
            let y = g.softmax(x, 1)?;
            weighted_loss(g, y)
        })),
        ("sigmoid relu square", wobble(&[6], 9), Box::new(|g, x| {
            let a = g.sigmoid(x);
            let b = g.relu(x);
            let c = g.add(a, b)?;
            let d = g.square(c);
            let e = g.add_scalar(d, 0.3);
            let f = g.scale(e, -2.0);
            let h = g.sub(f, x)?;
            weighted_loss(g, h)
        })),
        ("norm", wobble(&[3, 4], 10), Box::new(|g, x| {
            let y = g.norm(x)?;
            weighted_loss(g, y)
        })),
        ("predict u", wobble(&[2, 3, 2], 12), Box::new(|g, u| {
            let w = g.param(wobble(&[3, 2, 4, 2], 13));
            let y = g.predict(u, w)?;
            weighted_loss(g, y)
        })),
        ("predict w", wobble(&[3, 2, 4, 2], 13), Box::new(|g, w| {
            let u = g.param(wobble(&[2, 3, 2], 12));
            let y = g.predict(u, w)?;
            weighted_loss(g, y)
        })),
        ("weighted sum", wobble(&[2, 3, 2, 4], 14), Box::new(|g, u| {
            let c = g.param(wobble(&[2, 3, 2], 15));
            let y = g.weighted_sum(c, u)?;
            let z = g.squash(y)?;
            weighted_loss(g, z)
        })),
        ("weighted sum couplings", wobble(&[2, 3, 2], 15), Box::new(|g, c| {
            let u = g.constant(wobble(&[2, 3, 2, 4], 14));
            let y = g.weighted_sum(c, u)?;
            weighted_loss(g, y)
        })),
        ("agreement", wobble(&[2, 3, 2, 4], 16), Box::new(|g, u| {
            let v = g.param(wobble(&[2, 2, 4], 17));
            let a = g.agreement(u, v)?;
            weighted_loss(g, a)
        })),
        ("agreement outputs", wobble(&[2, 2, 4], 17), Box::new(|g, v| {
            let u = g.constant(wobble(&[2, 3, 2, 4], 16));
            let a = g.agreement(u, v)?;
            weighted_loss(g, a)
        })),
        ("interleave", wobble(&[2, 3, 2, 2], 18), Box::new(|g, m| {
            let other = g.param(wobble(&[2, 3, 2, 2], 19));
            let y = g.interleave_maps(&[other, m])?;
            let z = g.squash(y)?;
            weighted_loss(g, z)
        })),
        ("reshape mean", wobble(&[2, 6], 20), Box::new(|g, x| {
            let y = g.reshape(x, &[3, 4])?;
            let s = g.square(y);
            Ok(g.mean_all(s))
        })),
    ];
    for (name, x, f) in cases {
        let err = finite_diff_check(f, &x, eps).unwrap();
        assert!(err < tol, "{name}: relative error {err}");
    }
}

#[test]
fn interleave_orders_path_major_then_row_major() {
    let mut g = Graph::new();
    // two maps, batch 1, 2 channels, 1x2 spatial
    let a = g.constant(t(&[1, 2, 1, 2], &[1., 2., 10., 20.]));
    let b = g.constant(t(&[1, 2, 1, 2], &[3., 4., 30., 40.]));
    let y = g.interleave_maps(&[a, b]).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 2]);
    assert_eq!(g.value(y).data(), &[1., 10., 2., 20., 3., 30., 4., 40.]);
}

#[test]
fn injected_fault_is_detected() {
    let x = wobble(&[2, 3], 21);
    let f = |g: &mut Graph, x: Var| {
        g.inject_fault(FaultyRule::Squash);
        let y = g.squash(x)?;
        weighted_loss(g, y)
    };
    let err = finite_diff_check(f, &x, 1e-5).unwrap();
    assert!(err > 1e-4, "fault went unnoticed: {err}");
}

#[test]
#[should_panic(expected = "does not belong")]
fn vars_are_bound_to_their_graph() {
    let mut a = Graph::new();
    let b = Graph::new();
    let v = a.constant(Tensor::scalar(1.0));
    let _ = b.value(v);
}

proptest! {
    #[test]
    fn softmax_slices_normalized_and_shift_invariant(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in 0u64..1000,
        shift in -50.0f64..50.0,
    ) {
        let x = wobble(&[rows, cols], seed).map(|v| v * 20.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax(xv, 1).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let xs = g.constant(x.map(|v| v + shift));
        let ys = g.softmax(xs, 1).unwrap();
        prop_assert!(g.value(ys).max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn maxpool_conserves_gradient_mass(seed in 0u64..1000, planes in 1usize..4) {
        let x = wobble(&[1, planes, 4, 6], seed);
        let up = wobble(&[1, planes, 2, 3], seed + 1);
        let mut g = Graph::new();
        let xv = g.param(x);
        let y = g.maxpool2d(xv, 2, 2).unwrap();
        let w = g.constant(up.clone());
        let p = g.mul(y, w).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        prop_assert!((g.grad(xv).unwrap().sum() - up.sum()).abs() < 1e-12);
    }

    #[test]
    fn odd_kernel_same_padding_preserves_extent(k in prop::sample::select(vec![1usize, 3, 5, 7, 9]), h in 9usize..15, w in 9usize..15) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, h, w]));
        let kv = g.constant(Tensor::zeros(&[2, 1, k, k]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, kv, b, (k - 1) / 2, 1).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 2, h, w]);
    }
}
