use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::new();
    let eye = g.constant(t2(&[&[1., 0.], &[0., 1.]]));
    let col = g.constant(t2(&[&[3.], &[4.]]));
    let out = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(out).data(), &[3., 4.]);

    let row = g.constant(t2(&[&[1., 2.]]));
    let out = g.matmul(row, col).unwrap();
    assert_eq!(g.value(out).data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[5, 7], 1);
    let b = random(&[7, 3], 2);
    let mut expect = vec![0.0; 15];
    for i in 0..5 {
        for j in 0..3 {
            for p in 0..7 {
                expect[i * 3 + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let out = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(out).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_rejects_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1., 0., 2.]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0., 0., 2.]);
    let z = g.constant(Tensor::vector(vec![0.]).unwrap());
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);

    let bad = g.constant(Tensor::vector(vec![1., 0.]).unwrap());
    assert!(matches!(g.log(bad), Err(Error::Domain { .. })));
    let short = g.constant(Tensor::vector(vec![1.]).unwrap());
    assert!(matches!(g.add(x, short), Err(Error::Shape { .. })));
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.]).unwrap());
    let s = g.sigmoid(x).unwrap();
    let l = g.sum(s);
    g.backward(l).unwrap();
    let analytic = g.grad(x).unwrap().data()[0];
    assert!((analytic - 0.25).abs() < 1e-15);
    let h = 1e-5;
    let fd = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
    assert!((analytic - fd).abs() < 1e-8);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0., 0., 0.]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    let x = g.constant(Tensor::vector(vec![1000., 0.]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!(g.value(s).all_finite());
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
    assert!(g.value(s).data()[1] < 1e-300);
}

#[test]
fn softmax_over_inner_axis() {
    let mut g = Graph::new();
    let x = g.constant(t2(&[&[0., 0.], &[2f64.ln(), 0.]]));
    let s = g.softmax(x, 1).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn mean_std_examples() {
    let mut g = Graph::new();
    let x = g.constant(t2(&[&[2., 2.], &[2., 2.]]));
    let (m, s) = g.mean_std_axis(x, 0, 1e-10).unwrap();
    assert_eq!(g.value(m).data(), &[2., 2.]);
    for v in g.value(s).data() {
        assert!(*v <= 1e-5 + 1e-12);
    }
    let x = g.constant(t2(&[&[1.], &[3.]]));
    let (m, s) = g.mean_std_axis(x, 0, 1e-10).unwrap();
    assert_eq!(g.value(m).data(), &[2.]);
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-9);
}

#[test]
fn mean_std_matches_two_pass_oracle() {
    let x = random(&[20, 16], 3);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (m, s) = g.mean_std_axis(v, 0, 1e-10).unwrap();
    for c in 0..16 {
        let col: Vec<f64> = (0..20).map(|r| x.get(&[r, c])).collect();
        let mean = col.iter().sum::<f64>() / 20.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!((g.value(m).data()[c] - mean).abs() < 1e-10);
        assert!((g.value(s).data()[c] - (var + 1e-10).sqrt()).abs() < 1e-10);
    }
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1., 2.]).unwrap());
    let b = g.constant(Tensor::vector(vec![3.]).unwrap());
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3.]);

    let mu = g.constant(Tensor::new(vec![1, 2], vec![1., 1.]).unwrap());
    let sigma = g.constant(Tensor::new(vec![1, 2], vec![0., 0.]).unwrap());
    let v = g.concat(&[mu, sigma], 1).unwrap();
    assert_eq!(g.value(v).data(), &[1., 1., 0., 0.]);

    let fwd = g.constant(Tensor::zeros(vec![20, 256]));
    let bwd = g.constant(Tensor::zeros(vec![20, 256]));
    let both = g.concat(&[fwd, bwd], 1).unwrap();
    assert_eq!(g.shape(both), &[20, 512]);

    let bad = g.constant(Tensor::zeros(vec![19, 256]));
    assert!(g.concat(&[fwd, bad], 1).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1., -2.]).unwrap());
    let c = g.constant(Tensor::vector(vec![5., 5.]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let with_c = g.mul(sq, c).unwrap();
    let l = g.sum(sq);
    let _unused = g.sum(with_c);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., -4.]);
    assert!(g.grad(c).is_none());
    assert!(matches!(g.backward(l), Err(Error::Graph(_))));
}

#[test]
fn relu_propagates_nan() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![f64::NAN, -1.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    let v = g.value(y).data();
    assert!(v[0].is_nan());
    assert_eq!(&v[1..], &[0.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1., 2.]).unwrap());
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Graph(_))));
}

#[test]
fn relu_affine_chain_matches_finite_differences() {
    let w = random(&[4, 3], 10);
    let x = random(&[3, 1], 11);
    let errs = grad_check_many(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let r = g.relu(y)?;
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        },
        &[w, x],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn grad_check_of_sum_is_exact() {
    let err = grad_check(|g, x| Ok(g.sum(x)), &random(&[3, 4], 4), 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn grad_check_relu_away_from_kink() {
    let x = random(&[10], 5).map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
    let err = grad_check(
        |g, x| {
            let r = g.relu(x)?;
            Ok(g.sum(r))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, Error> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var, Error>>);
    let cases: Vec<Case> = vec![
        ("sigmoid", vec![3, 4], Box::new(|g, x| g.sigmoid(x))),
        ("tanh", vec![3, 4], Box::new(|g, x| g.tanh(x))),
        ("exp", vec![3, 4], Box::new(|g, x| g.exp(x))),
        (
            "log",
            vec![3, 4],
            Box::new(|g, x| {
                let e = g.exp(x)?;
                g.log(e)
            }),
        ),
        ("softmax0", vec![3, 4], Box::new(|g, x| g.softmax(x, 0))),
        ("softmax1", vec![3, 4], Box::new(|g, x| g.softmax(x, 1))),
        ("mean", vec![3, 4, 2], Box::new(|g, x| g.mean_axis(x, 1))),
        ("std", vec![3, 4, 2], Box::new(|g, x| g.std_axis(x, 1, 1e-10))),
        (
            "concat",
            vec![3, 4],
            Box::new(|g, x| {
                let y = g.mul_scalar(x, 2.0);
                g.concat(&[x, y, x], 1)
            }),
        ),
        (
            "stack",
            vec![3, 4],
            Box::new(|g, x| {
                let y = g.tanh(x)?;
                g.stack(&[x, y], 1)
            }),
        ),
        ("index", vec![3, 4, 2], Box::new(|g, x| g.index_axis(x, 1, 2))),
        ("slice", vec![5, 2], Box::new(|g, x| g.slice_rows(x, 1, 3))),
        ("flip", vec![3, 4, 2], Box::new(|g, x| g.flip(x, 1))),
        ("reshape", vec![3, 4], Box::new(|g, x| g.reshape(x, &[2, 6]))),
        (
            "scale_rows",
            vec![4, 3],
            Box::new(|g, x| {
                let col = g.reshape(x, &[12, 1])?;
                let col = g.slice_rows(col, 0, 4)?;
                g.scale_rows(x, col)
            }),
        ),
        (
            "add_bias",
            vec![4, 3],
            Box::new(|g, x| {
                let b = g.index_axis(x, 0, 1)?;
                g.add_bias(x, b)
            }),
        ),
        (
            "batch_norm",
            vec![6, 3],
            Box::new(|g, x| {
                let gamma = g.constant(Tensor::vector(vec![1.5, 0.5, -1.0]).unwrap());
                let beta = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap());
                Ok(g.batch_norm(x, gamma, beta, NormStats::Batch { eps: 1e-5 })?.0)
            }),
        ),
        (
            "binary",
            vec![3, 4],
            Box::new(|g, x| {
                let y = g.sigmoid(x)?;
                let a = g.mul(x, y)?;
                let b = g.sub(a, y)?;
                let c = g.add(b, x)?;
                Ok(g.add_scalar(c, 3.0))
            }),
        ),
    ];
    for (i, (name, shape, op)) in cases.iter().enumerate() {
        let x = random(shape, 100 + i as u64);
        let err = grad_check(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, 7)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: relative error {err}");
    }
}

#[test]
fn batch_norm_parameter_gradients() {
    let x = random(&[5, 3], 20);
    let gamma = random(&[3], 21);
    let beta = random(&[3], 22);
    let errs = grad_check_many(
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?;
            weighted_sum(g, y, 23)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");

    let mean = [0.1, -0.2, 0.3];
    let var = [1.0, 2.0, 0.5];
    let errs = grad_check_many(
        |g, v| {
            let stats = NormStats::Fixed { mean: &mean, var: &var, eps: 1e-5 };
            let (y, _) = g.batch_norm(v[0], v[1], v[2], stats)?;
            weighted_sum(g, y, 24)
        },
        &[x, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn custom_op_uses_supplied_backward() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1., 2.]).unwrap());
    let value = g.value(x).map(|v| 3.0 * v);
    let y = g.custom(
        &[x],
        value,
        Box::new(|_, _, grad| vec![grad.map(|v| 3.0 * v)]),
    );
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3., 3.]);
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let x0 = random(&[4, 3], 30);
    let w0 = random(&[3, 2], 31);
    let loss_a = |g: &mut Graph, x: Var, w: Var| -> Result<Var, Error> {
        let y = g.matmul(x, w)?;
        let t = g.tanh(y)?;
        Ok(g.sum(t))
    };
    let loss_b = |g: &mut Graph, x: Var, w: Var| -> Result<Var, Error> {
        let y = g.matmul(x, w)?;
        let s = g.mul(y, y)?;
        Ok(g.sum(s))
    };
    let run = |f: &dyn Fn(&mut Graph, Var, Var) -> Result<Var, Error>| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.param(w0.clone());
        let l = f(&mut g, x, w).unwrap();
        g.backward(l).unwrap();
        (g.grad(x).unwrap(), g.grad(w).unwrap())
    };
    let (ax, aw) = run(&loss_a);
    let (bx, bw) = run(&loss_b);
    let (sx, sw) = run(&|g, x, w| {
        let a = loss_a(g, x, w)?;
        let b = loss_b(g, x, w)?;
        g.add(a, b)
    });
    for ((s, a), b) in sx.data().iter().zip(ax.data()).zip(bx.data()) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
    for ((s, a), b) in sw.data().iter().zip(aw.data()).zip(bw.data()) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(
        logits in proptest::collection::vec(-50.0f64..50.0, 1..40),
        shift in -100.0f64..100.0,
    ) {
        let n = logits.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(logits.clone()).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let shifted = g.add_scalar(x, shift);
        let s2 = g.softmax(shifted, 0).unwrap();
        let p = g.value(s).data();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..n {
            prop_assert!((p[i] - g.value(s2).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn std_of_constant_sequence_is_tiny(value in -1e3f64..1e3, len in 1usize..50) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![len, 3], value));
        let s = g.std_axis(x, 0, 1e-10).unwrap();
        for v in g.value(s).data() {
            prop_assert!(*v <= 1e-10f64.sqrt() + 1e-12);
        }
    }
}
