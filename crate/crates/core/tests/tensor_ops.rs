use paramnet_core::tensor::{check_gradients, OpKind};
use paramnet_core::{Error, Prng, Tape, Tensor};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

/// Direct six-nested-loop grouped cross-correlation, written independently of
/// the library kernels.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let [b, cin, h, wd] = <[usize; 4]>::try_from(x.dims()).unwrap();
    let [cout, cin_g, k, _] = <[usize; 4]>::try_from(w.dims()).unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    let mut out = Tensor::zeros([b, cout, oh, ow]);
    for n in 0..b {
        for o in 0..cout {
            let g = o / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                    for c in 0..cin_g {
                        for p in 0..k {
                            for q in 0..k {
                                let r = (i * stride + p) as isize - pad as isize;
                                let s = (j * stride + q) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, g * cin_g + c, r as usize, s as usize])
                                    * w.at(&[o, c, p, q]);
                            }
                        }
                    }
                    let idx = ((n * cout + o) * oh + i) * ow + j;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Tensor {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    (*xv.conv2d(wv, bv, stride, pad, groups).unwrap().value()).clone()
}

#[test]
fn conv2d_sum_of_ones() {
    let y = conv_value(&Tensor::ones([1, 1, 3, 3]), &Tensor::ones([1, 1, 3, 3]), None, 1, 0, 1);
    assert_eq!(y.dims(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = Prng::new(1);
    let x = rng.normal_tensor([2, 1, 5, 4], 1.0);
    let y = conv_value(&x, &Tensor::ones([1, 1, 1, 1]), None, 1, 0, 1);
    assert_eq!(y, x);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = Prng::new(2);
    let x = rng.normal_tensor([2, 3, 8, 8], 1.0);
    let w = rng.normal_tensor([4, 3, 3, 3], 1.0);
    let y = conv_value(&x, &w, None, 1, 1, 1);
    assert!(y.max_abs_diff(&conv_oracle(&x, &w, None, 1, 1, 1)) <= 1e-12);
}

#[test]
fn conv2d_matches_oracle_over_geometries() {
    let mut rng = Prng::new(3);
    for (h, k, stride, pad, groups) in [
        (7, 3, 2, 1, 1),
        (6, 5, 1, 2, 2),
        (5, 1, 2, 0, 1),
        (9, 3, 3, 0, 3),
        (4, 3, 1, 1, 6),
    ] {
        let cin = 6;
        let cout = 6;
        let x = rng.normal_tensor([2, cin, h, h + 1], 1.0);
        let w = rng.normal_tensor([cout, cin / groups, k, k], 1.0);
        let b = rng.normal_tensor([cout], 1.0);
        let y = conv_value(&x, &w, Some(&b), stride, pad, groups);
        let oracle = conv_oracle(&x, &w, Some(&b), stride, pad, groups);
        assert!(y.max_abs_diff(&oracle) <= 1e-12, "geometry {h} {k} {stride} {pad} {groups}");
    }
}

#[test]
fn grouped_conv_degenerate_and_depthwise() {
    let mut rng = Prng::new(4);
    let x = rng.normal_tensor([1, 4, 6, 6], 1.0);
    let w = rng.normal_tensor([2, 4, 3, 3], 1.0);
    assert_eq!(conv_value(&x, &w, None, 1, 1, 1), conv_oracle(&x, &w, None, 1, 1, 1).map(|v| v));

    let y = conv_value(&Tensor::ones([1, 2, 3, 3]), &Tensor::ones([2, 1, 3, 3]), None, 1, 0, 2);
    assert_eq!(y.data(), &[9.0, 9.0]);

    let x = rng.normal_tensor([2, 5, 7, 7], 1.0);
    let w = rng.normal_tensor([5, 1, 3, 3], 1.0);
    let y = conv_value(&x, &w, None, 1, 1, 5);
    assert!(y.max_abs_diff(&conv_oracle(&x, &w, None, 1, 1, 5)) <= 1e-12);
}

#[test]
fn conv2d_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros([2, 2, 3, 3]));
    match x.conv2d(w, None, 1, 0, 1) {
        Err(Error::ShapeMismatch { axis: 1, expected: 3, got: 2, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let w = tape.constant(Tensor::zeros([2, 3, 5, 5]));
    assert!(matches!(x.conv2d(w, None, 1, 0, 1), Err(Error::InvalidGeometry { .. })));
    let w = tape.constant(Tensor::zeros([2, 1, 3, 3]));
    assert!(matches!(x.conv2d(w, None, 1, 1, 3), Err(Error::InvalidGeometry { .. })));
}

#[test]
fn softmax_uniform_and_normalised() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::zeros([4])).softmax(0).unwrap().value();
    assert_eq!(y.data(), &[0.25; 4]);

    let mut rng = Prng::new(5);
    let x = rng.normal_tensor([3, 5, 2], 4.0);
    for axis in 0..3 {
        let y = tape.constant(x.clone()).softmax(axis).unwrap().value();
        let s = tape.constant((*y).clone()).sum_axis(axis).unwrap().value();
        for v in s.data() {
            assert!((v - 1.0).abs() <= 1e-12);
        }
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    assert!(matches!(
        tape.constant(x).softmax(3),
        Err(Error::AxisOutOfRange { axis: 3, rank: 3, .. })
    ));
}

#[test]
fn global_avg_pool_of_ones() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::ones([1, 4, 7, 7])).global_avg_pool().unwrap().value();
    assert_eq!(y.dims(), &[1, 4]);
    for v in y.data() {
        assert!((v - 1.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_uniform_two_class() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::from_vec([1, 2], vec![1f64.ln(), 1f64.ln()]).unwrap());
    let loss = logits.cross_entropy_with_label_smoothing(&[0], 0.0).unwrap().value().item();
    assert!((loss - 2f64.ln()).abs() < 1e-15);
    assert!(logits.cross_entropy_with_label_smoothing(&[0], 1.0).is_err());
    assert!(logits.cross_entropy_with_label_smoothing(&[0], -0.1).is_err());
}

#[test]
fn label_smoothing_matches_explicit_mixture() {
    // (1-eps) * CE(onehot) + eps * mean_c(-log p_c)
    let mut rng = Prng::new(6);
    let x = rng.normal_tensor([3, 4], 1.0);
    let targets = [2, 0, 3];
    let eps = 0.1;
    let tape = Tape::new();
    let got = tape.constant(x.clone()).cross_entropy_with_label_smoothing(&targets, eps).unwrap().value().item();
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &x.data()[r * 4..(r + 1) * 4];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        let nll = lse - row[t];
        let uniform = row.iter().map(|v| lse - v).sum::<f64>() / 4.0;
        expected += (1.0 - eps) * nll + eps * uniform;
    }
    expected /= 3.0;
    assert!((got - expected).abs() < 1e-14);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones([3]));
    tape.backward(x.sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.mul(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones([3]));
    let y = x.scale(2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_twice() {
    let mut rng = Prng::new(7);
    let tape = Tape::new();
    let x = tape.leaf(rng.normal_tensor([2, 3, 5, 5], 1.0));
    let w = tape.leaf(rng.normal_tensor([4, 3, 3, 3], 1.0));
    let loss = x.conv2d(w, None, 1, 1, 1).unwrap().relu().sum();
    tape.backward(loss).unwrap();
    let once = tape.grad(w).unwrap();
    tape.backward(loss).unwrap();
    let twice = tape.grad(w).unwrap();
    assert_eq!(twice, once.scale(2.0));
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn gradcheck_identity_is_exact() {
    // At the origin the perturbed sums are exactly +-h, so the difference
    // quotient is exactly 1.
    let x = Tensor::zeros([3]);
    let report = check_gradients(|_, v| Ok(v.sum()), &x, FD_STEP).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    let x = Tensor::from_vec([3], vec![0.5, -1.0, 2.0]).unwrap();
    let report = check_gradients(|_, v| Ok(v.sum()), &x, FD_STEP).unwrap();
    assert!(report.max_rel_error < 1e-10);
}

#[test]
fn gradcheck_reports_non_finite() {
    let x = Tensor::from_vec([2], vec![1.0, 1e308]).unwrap();
    let err = check_gradients(|_, v| Ok(v.mul(v)?.sum()), &x, FD_STEP).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

/// Weighted sum with fixed random coefficients: a scalar whose gradient is
/// dense and O(1) in every coordinate.
fn probe<'t>(y: paramnet_core::Var<'t>, seed: u64) -> paramnet_core::Result<paramnet_core::Var<'t>> {
    let mut rng = Prng::new(seed).split("probe");
    let c = y.tape().constant(rng.normal_tensor(y.shape(), 1.0));
    Ok(y.mul(c)?.sum())
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = Prng::new(100 + seed);
        let a = rng.normal_tensor([3, 4], 1.0);
        let b = rng.normal_tensor([3, 4], 1.0);
        let m = rng.normal_tensor([4, 5], 1.0);
        let bias = rng.normal_tensor([4], 1.0);
        let rows = rng.normal_tensor([3], 1.0);
        let img = rng.normal_tensor([2, 4, 5, 5], 1.0);
        let wk = rng.normal_tensor([6, 2, 3, 3], 0.5);
        let cb = rng.normal_tensor([6], 0.5);
        let gain = rng.uniform_tensor([4], 0.5, 1.5);

        let check = |name: &str, x: &Tensor, f: &dyn for<'t> Fn(&'t Tape, paramnet_core::Var<'t>) -> paramnet_core::Result<paramnet_core::Var<'t>>| {
            let r = check_gradients(f, x, FD_STEP).unwrap();
            assert!(r.max_rel_error <= FD_TOL, "{name} seed {seed}: {r:?}");
        };

        check("add", &a, &|t, x| probe(x.add(t.constant(b.clone()))?, seed));
        check("sub", &a, &|t, x| probe(t.constant(b.clone()).sub(x)?, seed));
        check("mul", &a, &|t, x| probe(x.mul(t.constant(b.clone()))?, seed));
        check("mul_self", &a, &|_, x| probe(x.mul(x)?, seed));
        check("scale", &a, &|_, x| probe(x.scale(-1.7).add_scalar(0.3), seed));
        check("relu", &a, &|_, x| probe(x.relu(), seed));
        check("sigmoid", &a, &|_, x| probe(x.sigmoid(), seed));
        check("silu", &a, &|_, x| probe(x.silu(), seed));
        check("matmul_lhs", &a, &|t, x| probe(x.matmul(t.constant(m.clone()))?, seed));
        check("matmul_rhs", &m, &|t, x| probe(t.constant(a.clone()).matmul(x)?, seed));
        check("transpose", &a, &|_, x| probe(x.transpose()?, seed));
        check("reshape", &a, &|_, x| probe(x.reshape([2, 6])?, seed));
        check("add_bias", &bias, &|t, x| probe(t.constant(a.clone()).add_bias(x)?, seed));
        check("mul_rows_x", &a, &|t, x| probe(x.mul_rows(t.constant(rows.clone()))?, seed));
        check("mul_rows_s", &rows, &|t, x| probe(t.constant(a.clone()).mul_rows(x)?, seed));
        check("softmax0", &a, &|_, x| probe(x.softmax(0)?, seed));
        check("softmax1", &a, &|_, x| probe(x.softmax(1)?, seed));
        check("sum_axis", &a, &|_, x| probe(x.sum_axis(1)?, seed));
        check("mean", &a, &|_, x| Ok(x.mul(x)?.mean()));
        check("gap", &img, &|_, x| probe(x.global_avg_pool()?, seed));
        check("conv_x", &img, &|t, x| {
            probe(x.conv2d(t.constant(wk.clone()), Some(t.constant(cb.clone())), 1, 1, 2)?, seed)
        });
        check("conv_w", &wk, &|t, x| probe(t.constant(img.clone()).conv2d(x, None, 2, 1, 2)?, seed));
        check("conv_b", &cb, &|t, x| {
            probe(t.constant(img.clone()).conv2d(t.constant(wk.clone()), Some(x), 1, 0, 2)?, seed)
        });
        check("narrow", &a, &|_, x| probe(x.narrow(1, 1, 2)?, seed));
        check("concat", &a, &|t, x| probe(t.concat(&[x, t.constant(b.clone()), x], 1)?, seed));
        check("gather", &a, &|_, x| probe(x.gather_rows(&[2, 0, 2])?, seed));
        check("scatter", &a, &|_, x| probe(x.scatter_rows(&[4, 1, 4], 5)?, seed));
        check("pick", &a, &|_, x| probe(x.pick(&[(0, 1), (2, 3), (0, 1)])?, seed));
        check("rms_x", &a, &|t, x| probe(x.rms_norm(t.constant(gain.clone()), 1e-6)?, seed));
        check("rms_w", &gain, &|t, x| probe(t.constant(a.clone()).rms_norm(x, 1e-6)?, seed));
        check("cross_entropy", &a, &|_, x| x.cross_entropy_with_label_smoothing(&[1, 3, 0], 0.1));
    }
}

#[test]
fn fault_injection_breaks_gradcheck() {
    let mut rng = Prng::new(9);
    let w = rng.normal_tensor([2, 1, 3, 3], 1.0);
    let x = rng.normal_tensor([1, 1, 4, 4], 1.0);
    let r = check_gradients(
        |t, v| {
            t.inject_fault(OpKind::Conv2d);
            Ok(t.constant(x.clone()).conv2d(v, None, 1, 1, 1)?.sum())
        },
        &w,
        FD_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error > 0.1);
}
