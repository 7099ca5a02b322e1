use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtfm_core::tensor::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use rtfm_core::{Error, Result};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, n) = a.dims2().unwrap();
    let (_, p) = b.dims2().unwrap();
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for l in 0..n {
                out[i * p + j] += a.data()[i * n + l] * b.data()[l * p + j];
            }
        }
    }
    out
}

/// Index-by-index dilated convolution with explicit zero padding.
fn direct_conv(signal: &Tensor, kernel: &Tensor, dilation: usize) -> Vec<f64> {
    let (t, cin) = signal.dims2().unwrap();
    let (cout, w) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = (w - 1) / 2 * dilation;
    let mut padded = vec![0.0; (t + 2 * pad) * cin];
    for i in 0..t {
        for c in 0..cin {
            padded[(i + pad) * cin + c] = signal.data()[i * cin + c];
        }
    }
    let mut out = vec![0.0; t * cout];
    for i in 0..t {
        for o in 0..cout {
            let mut acc = 0.0;
            for c in 0..cin {
                for j in 0..w {
                    acc += kernel.data()[(o * cin + c) * w + j] * padded[(i + j * dilation) * cin + c];
                }
            }
            out[i * cout + o] = acc;
        }
    }
    out
}

fn forward(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).clone())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

fn check(params: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = grad_check(&named(params), build, &GradCheckConfig::default());
    assert!(report.passed, "{report:#?}");
}

#[test]
fn matmul_identity_and_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&[3, 2], &mut rng);
    let out = forward(|g| {
        let i = g.constant(Tensor::eye(3))?;
        let bv = g.constant(b.clone())?;
        g.matmul(i, bv)
    })
    .unwrap();
    assert_eq!(out, b);

    let out = forward(|g| {
        let a = g.constant(Tensor::matrix(1, 1, vec![2.0])?)?;
        let b = g.constant(Tensor::matrix(1, 1, vec![3.0])?)?;
        g.matmul(a, b)
    })
    .unwrap();
    assert_eq!(out.data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let out = forward(|g| {
        let av = g.constant(a.clone())?;
        let bv = g.constant(b.clone())?;
        g.matmul(av, bv)
    })
    .unwrap();
    assert_eq!(out.shape(), &[4, 3]);
    assert_close(out.data(), &naive_matmul(&a, &b), 1e-12);
}

#[test]
fn matmul_shape_mismatch() {
    let err = forward(|g| {
        let a = g.constant(Tensor::zeros(&[2, 3]))?;
        let b = g.constant(Tensor::zeros(&[2, 3]))?;
        g.matmul(a, b)
    })
    .unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn conv_identity_kernel_and_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[6, 4], &mut rng);
    let mut ident = Tensor::zeros(&[4, 4, 1]);
    for c in 0..4 {
        ident.data_mut()[c * 4 + c] = 1.0;
    }
    for dilation in [1, 2, 4] {
        let out = forward(|g| {
            let s = g.constant(x.clone())?;
            let k = g.constant(ident.clone())?;
            g.conv1d_dilated(s, k, dilation)
        })
        .unwrap();
        assert_eq!(out, x);
    }
    let out = forward(|g| {
        let s = g.constant(x.clone())?;
        let k = g.constant(Tensor::zeros(&[3, 4, 3]))?;
        g.conv1d_dilated(s, k, 2)
    })
    .unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.shape(), &[6, 3]);
}

#[test]
fn conv_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[8, 2], &mut rng);
    let k = random(&[3, 2, 3], &mut rng);
    for dilation in [1, 2, 4, 9] {
        let out = forward(|g| {
            let s = g.constant(x.clone())?;
            let kv = g.constant(k.clone())?;
            g.conv1d_dilated(s, kv, dilation)
        })
        .unwrap();
        assert_close(out.data(), &direct_conv(&x, &k, dilation), 1e-12);
    }
}

#[test]
fn conv_rejects_even_width_and_zero_dilation() {
    let err = forward(|g| {
        let s = g.constant(Tensor::zeros(&[4, 2]))?;
        let k = g.constant(Tensor::zeros(&[1, 2, 2]))?;
        g.conv1d_dilated(s, k, 1)
    })
    .unwrap_err();
    assert!(matches!(err, Error::UnsupportedKernel(2)));
    let err = forward(|g| {
        let s = g.constant(Tensor::zeros(&[4, 2]))?;
        let k = g.constant(Tensor::zeros(&[1, 2, 3]))?;
        g.conv1d_dilated(s, k, 0)
    })
    .unwrap_err();
    assert!(matches!(err, Error::Parameter(_)));
}

#[test]
fn pointwise_conv_ignores_dilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[7, 3], &mut rng);
    let k = random(&[5, 3, 1], &mut rng);
    let outs: Vec<Tensor> = [1, 2, 4]
        .iter()
        .map(|&d| {
            forward(|g| {
                let s = g.constant(x.clone())?;
                let kv = g.constant(k.clone())?;
                g.conv1d_dilated(s, kv, d)
            })
            .unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[1], outs[2]);
}

#[test]
fn backward_of_sum_and_norm() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -2.0, 5.0]).unwrap()).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
    let n = g.row_norms(x).unwrap();
    let loss = g.sum(n).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 5.0);
    let grads = g.backward(loss).unwrap();
    assert_close(grads.wrt(x).data(), &[0.6, 0.8], 1e-15);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y).unwrap_err(), Error::Contract(_)));
}

#[test]
fn ignored_leaf_gets_exact_zero_gradient() {
    let mut g = Graph::new();
    let used = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let unused = g.param(Tensor::vector(vec![3.0, 4.0, 5.0]).unwrap()).unwrap();
    let sq = g.square(used).unwrap();
    let _ = g.scale(unused, 7.0).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_finite_values_rejected_at_boundaries() {
    let mut g = Graph::new();
    assert!(matches!(
        g.constant(Tensor::vector(vec![1.0, f64::NAN]).unwrap()),
        Err(Error::NonFinite(_))
    ));
    let big = g.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(g.scale(big, 1e300), Err(Error::NonFinite(_))));
}

#[test]
fn concat_then_split_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let parts = [random(&[5, 2], &mut rng), random(&[5, 3], &mut rng), random(&[5, 1], &mut rng)];
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
    let cat = g.concat_cols(&vars).unwrap();
    let mut start = 0;
    for p in &parts {
        let w = p.shape()[1];
        let s = g.slice_cols(cat, start, w).unwrap();
        assert_eq!(g.value(s), p);
        start += w;
    }
}

#[test]
fn grad_check_scalar_square() {
    let report = grad_check(
        &named(vec![Tensor::scalar(2.0)]),
        |g, p| g.square(p[0]),
        &GradCheckConfig {
            tol: 1e-8,
            ..GradCheckConfig::default()
        },
    );
    assert!(report.passed, "{report:?}");
    assert!(report.params[0].worst.1 == 4.0);
    assert!((report.params[0].worst.2 - 4.0).abs() < 1e-8);
}

#[test]
fn grad_check_hinge_flat_region() {
    // max(0, m − d) with d = 150 > m = 100
    let report = grad_check(
        &named(vec![Tensor::scalar(150.0)]),
        |g, p| {
            let neg = g.scale(p[0], -1.0)?;
            let shifted = g.add_scalar(neg, 100.0)?;
            g.relu(shifted)
        },
        &GradCheckConfig::default(),
    );
    assert!(report.passed);
    assert_eq!(report.params[0].worst.1, 0.0);
    assert_eq!(report.params[0].worst.2, 0.0);
}

#[test]
fn grad_check_skips_probes_that_straddle_a_kink() {
    // relu at 5e-5 with step 1e-4: the minus probe crosses zero
    let params = named(vec![Tensor::vector(vec![5e-5, 1.0]).unwrap()]);
    let build = |g: &mut Graph, p: &[Var]| {
        let r = g.relu(p[0])?;
        g.sum(r)
    };
    let strict = grad_check(&params, build, &GradCheckConfig { skip_kinks: false, ..GradCheckConfig::default() });
    assert!(!strict.passed);
    assert!((strict.params[0].worst.2 - 0.75).abs() < 1e-9);
    let report = grad_check(&params, build, &GradCheckConfig::default());
    assert!(report.passed, "{report:?}");
    assert_eq!((report.params[0].checked, report.params[0].skipped), (1, 1));
}

#[test]
fn branch_signature_tracks_pieces_not_values() {
    let sig = |x: f64| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![x, -1.0]).unwrap()).unwrap();
        let r = g.relu(v).unwrap();
        let idx = if x > 2.0 { vec![0] } else { vec![1] };
        g.gather_rows(r, &idx).unwrap();
        g.branch_signature()
    };
    assert_eq!(sig(0.5), sig(1.5));
    assert_ne!(sig(0.5), sig(-0.5));
    assert_ne!(sig(1.5), sig(2.5));
}

#[test]
fn grad_check_reports_non_finite_instead_of_panicking() {
    // ln(1 − s) at s = 1 − 1e-5 with the guard disabled: the probe at s + step leaves the domain
    let report = grad_check(
        &named(vec![Tensor::scalar(1.0 - 1e-5)]),
        |g, p| {
            let b = g.bce(p[0], 0.0, f64::MIN, f64::MAX)?;
            g.sum(b)
        },
        &GradCheckConfig::default(),
    );
    assert!(!report.passed);
    assert!(report.failure.is_some());
}

#[test]
fn every_operation_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(&[4, 3], &mut rng);

    // matmul / transpose
    check(vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], |g, p| {
        let c = g.matmul(p[0], p[1])?;
        let t = g.transpose(c)?;
        let sq = g.square(t)?;
        g.sum(sq)
    });

    // dilated convolution, both operands
    for dilation in [1, 2, 4] {
        check(vec![random(&[8, 3], &mut rng), random(&[2, 3, 3], &mut rng)], move |g, p| {
            let y = g.conv1d_dilated(p[0], p[1], dilation)?;
            let sq = g.square(y)?;
            g.sum(sq)
        });
    }

    // bias, relu, sigmoid, add, sub, scale, add_scalar, abs
    let wc = w.clone();
    check(vec![random(&[5, 4], &mut rng), random(&[3], &mut rng)], move |g, p| {
        let wv = g.constant(wc.clone())?;
        let h = g.matmul(p[0], wv)?;
        let h = g.add_bias(h, p[1])?;
        let r = g.relu(h)?;
        let s = g.sigmoid(h)?;
        let a = g.add(r, s)?;
        let d = g.sub(a, h)?;
        let d = g.scale(d, 1.7)?;
        let d = g.add_scalar(d, -0.3)?;
        let d = g.abs(d)?;
        g.mean(d)
    });

    // softmax, concat, slice, gather, row norms
    check(vec![random(&[4, 3], &mut rng), random(&[4, 2], &mut rng)], |g, p| {
        let sm = g.softmax_rows(p[0])?;
        let cat = g.concat_cols(&[sm, p[1], p[0]])?;
        let part = g.slice_cols(cat, 2, 4)?;
        let picked = g.gather_rows(part, &[3, 0, 3])?;
        let norms = g.row_norms(picked)?;
        let sq = g.square(norms)?;
        g.sum(sq)
    });

    // dropout mask and clamped BCE
    let mask: Vec<f64> = (0..6).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 / 0.3 }).collect();
    check(vec![random(&[6], &mut rng)], move |g, p| {
        let m = g.mask(p[0], mask.clone())?;
        let s = g.sigmoid(m)?;
        let pos = g.bce(s, 1.0, 1e-7, 1.0 - 1e-7)?;
        let neg = g.bce(s, 0.0, 1e-7, 1.0 - 1e-7)?;
        let both = g.add(pos, neg)?;
        g.sum(both)
    });
}
