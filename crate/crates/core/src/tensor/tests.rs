use proptest::prelude::*;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Deterministic pseudo-random values in (-1, 1).
fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Compares tape gradients against central differences with step 1e-5.
fn check_grads(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::eval();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::eval();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let h = 1e-5;
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-4 || (a - numeric).abs() < 1e-9,
                "input {ti}[{j}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::new(shape.clone(), noise(shape.iter().product(), seed)).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_hand_values() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(g.shape(c), &[2, 1]);
}

#[test]
fn matmul_identity_and_zeros() {
    let m = noise(9, 3);
    let mut g = Graph::<f64>::eval();
    let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let x = g.constant(Tensor::new(vec![3, 3], m.clone()).unwrap());
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y).data(), m.as_slice());
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let y = g.matmul(z, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000.0, 1000.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_over_middle_axis_sums_to_one() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(Tensor::new(vec![2, 3, 4], noise(24, 8)).unwrap());
    let y = g.softmax(x, 1).unwrap();
    let d = g.value(y).data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| d[(o * 3 + j) * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_softmax_uniform_over_unmasked_and_errors_when_empty() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(t(&[2, 3], &[0.0, 5.0, 0.0, 1.0, 2.0, 3.0]));
    let y = g
        .masked_softmax(x, &[true, false, true, false, false, true], 1)
        .unwrap();
    let d = g.value(y).data();
    assert_eq!(&d[..3], &[0.5, 0.0, 0.5]);
    assert_eq!(&d[3..], &[0.0, 0.0, 1.0]);
    assert!(g
        .masked_softmax(x, &[true, true, true, false, false, false], 1)
        .is_err());
}

#[test]
fn gelu_values() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(t(&[4], &[0.0, 1.0, 30.0, -30.0]));
    let y = g.gelu(x);
    let d = g.value(y).data();
    assert_eq!(d[0], 0.0);
    // Φ(1) from the erf series.
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((d[1] - phi1).abs() < 1e-12);
    assert!((d[1] - 0.841_344_7).abs() < 1e-7);
    assert!((d[2] - 30.0).abs() < 1e-12);
    assert!(d[3].abs() < 1e-12);
}

/// Maclaurin series of erf, independent of the library routine.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::eval();
    let ones = g.constant(Tensor::full(&[4], 1.0));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(t(&[1, 4], &[2.0, 2.0, 2.0, 2.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let bias = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let x = g.constant(Tensor::new(vec![1, 4], noise(4, 1)).unwrap());
    let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = g.constant(Tensor::new(vec![1, 64], noise(64, 2)).unwrap());
    let (gain, bias) = (g_ones(&mut g, 64), g_zeros(&mut g, 64));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 64.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-9);
}

fn g_ones(g: &mut Graph<f64>, n: usize) -> Var {
    g.constant(Tensor::full(&[n], 1.0))
}

fn g_zeros(g: &mut Graph<f64>, n: usize) -> Var {
    g.constant(Tensor::zeros(&[n]))
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::<f64>::eval();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::eval();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let l = g.scale(s, 0.5);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, -2.0, 0.5]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::eval();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_twice_doubles_grads() {
    let mut g = Graph::<f64>::eval();
    let x = g.leaf(Tensor::new(vec![2, 3], noise(6, 4)).unwrap(), true);
    let w = g.leaf(Tensor::new(vec![3, 2], noise(6, 5)).unwrap(), true);
    let y = g.matmul(x, w).unwrap();
    let y = g.gelu(y);
    let l = g.sum(y);
    g.backward(l).unwrap();
    let once: Vec<f64> = g.grad(w).unwrap().to_vec();
    g.backward(l).unwrap();
    let twice = g.grad(w).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn grad_matmul_shared_and_batched() {
    check_grads(
        vec![
            Tensor::new(vec![2, 3, 4], noise(24, 1)).unwrap(),
            Tensor::new(vec![4, 5], noise(20, 2)).unwrap(),
        ],
        |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted(g, y, 9)
        },
    );
    check_grads(
        vec![
            Tensor::new(vec![2, 3, 4], noise(24, 3)).unwrap(),
            Tensor::new(vec![2, 4, 2], noise(16, 4)).unwrap(),
        ],
        |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted(g, y, 10)
        },
    );
}

#[test]
fn grad_elementwise_ops() {
    check_grads(
        vec![
            Tensor::new(vec![2, 3], noise(6, 11)).unwrap(),
            Tensor::new(vec![2, 3], noise(6, 12)).unwrap(),
            Tensor::new(vec![3], noise(3, 13)).unwrap(),
        ],
        |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.mul(a, v[0]).unwrap();
            let c = g.add_bias(b, v[2]).unwrap();
            let d = g.scale(c, 1.7);
            let e = g.exp(d);
            let f = g.gelu(e);
            let h = g.log(f);
            weighted(g, h, 14)
        },
    );
}

#[test]
fn grad_shape_ops() {
    check_grads(
        vec![
            Tensor::new(vec![2, 3, 4], noise(24, 21)).unwrap(),
            Tensor::new(vec![2, 1, 4], noise(8, 22)).unwrap(),
        ],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let p = g.permute(c, &[2, 0, 1]).unwrap();
            let r = g.reshape(p, &[8, 4]).unwrap();
            let t = g.transpose(r).unwrap();
            weighted(g, t, 23)
        },
    );
}

#[test]
fn grad_gather_scatter_adds_repeated_rows() {
    check_grads(
        vec![Tensor::new(vec![4, 3], noise(12, 31)).unwrap()],
        |g, v| {
            let y = g.gather(v[0], &[2, 0, 2, 3]).unwrap();
            weighted(g, y, 32)
        },
    );
    let mut g = Graph::<f64>::eval();
    let table = g.leaf(Tensor::zeros(&[3, 2]), true);
    let y = g.gather(table, &[1, 1, 2]).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn grad_softmax_family_and_mask() {
    check_grads(
        vec![Tensor::new(vec![2, 3, 4], noise(24, 41)).unwrap()],
        |g, v| {
            let y = g.softmax(v[0], 2).unwrap();
            weighted(g, y, 42)
        },
    );
    check_grads(
        vec![Tensor::new(vec![2, 3, 4], noise(24, 43)).unwrap()],
        |g, v| {
            let y = g.softmax(v[0], 1).unwrap();
            weighted(g, y, 44)
        },
    );
    check_grads(
        vec![Tensor::new(vec![3, 5], noise(15, 45)).unwrap()],
        |g, v| {
            let y = g.log_softmax(v[0], 1).unwrap();
            weighted(g, y, 46)
        },
    );
    let keep: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
    check_grads(
        vec![Tensor::new(vec![3, 5], noise(15, 47)).unwrap()],
        move |g, v| {
            let y = g.masked_softmax(v[0], &keep, 1).unwrap();
            weighted(g, y, 48)
        },
    );
}

#[test]
fn grad_layer_norm() {
    check_grads(
        vec![
            Tensor::new(vec![3, 6], noise(18, 51)).unwrap(),
            Tensor::new(vec![6], noise(6, 52)).unwrap(),
            Tensor::new(vec![6], noise(6, 53)).unwrap(),
        ],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted(g, y, 54)
        },
    );
}

#[test]
fn dropout_train_and_eval() {
    let x = Tensor::full(&[1000], 1.0);
    let mut g = Graph::<f64>::new(false, 7);
    let v = g.leaf(x.clone(), true);
    assert_eq!(g.dropout(v, 0.3).unwrap(), v);

    let mut g = Graph::<f64>::new(true, 7);
    let v = g.leaf(x.clone(), true);
    let y = g.dropout(v, 0.3).unwrap();
    let d = g.value(y).data().to_vec();
    let kept = d.iter().filter(|&&v| v != 0.0).count();
    assert!((600..800).contains(&kept), "{kept}");
    assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), d.as_slice());

    // same seed, same masks
    let mut g2 = Graph::<f64>::new(true, 7);
    let v2 = g2.leaf(x, true);
    let y2 = g2.dropout(v2, 0.3).unwrap();
    assert_eq!(g2.value(y2).data(), d.as_slice());
}

#[test]
fn masked_fill_blocks_gradient() {
    let mut g = Graph::<f64>::eval();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let y = g.masked_fill(x, &[false, true, false], -1e9).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -1e9, 3.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0]);
}

#[test]
fn f32_matches_f64_forward() {
    let a = Tensor::<f64>::new(vec![3, 4], noise(12, 61)).unwrap();
    let b = Tensor::<f64>::new(vec![4, 2], noise(8, 62)).unwrap();
    let mut g64 = Graph::<f64>::eval();
    let (x, y) = (g64.constant(a.clone()), g64.constant(b.clone()));
    let z64 = g64.matmul(x, y).unwrap();
    let mut g32 = Graph::<f32>::eval();
    let (x, y) = (g32.constant(a.cast()), g32.constant(b.cast()));
    let z32 = g32.matmul(x, y).unwrap();
    for (p, q) in g64.value(z64).data().iter().zip(g32.value(z32).data()) {
        assert!((p - *q as f64).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::new(vec![3, 4], v).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip(v in proptest::collection::vec(-1.0f64..1.0, 24)) {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::new(vec![2, 3, 4], v.clone()).unwrap());
        let p = g.permute(x, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(back).data(), v.as_slice());
    }
}
