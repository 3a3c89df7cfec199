use super::gradcheck::{grad_check, grad_check_multi_h, standard_suite, GRAD_TOLERANCE};
use super::{Graph, Tensor};
use crate::error::Error;
use crate::rng::RngStream;
use proptest::prelude::*;

fn assert_close(actual: &[f32], expected: &[f32], tol: f32) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: {a} vs {e} (tol {tol})"
        );
    }
}

#[test]
fn from_vec_rejects_bad_shapes() {
    assert!(matches!(
        Tensor::from_vec(vec![1.0, 2.0], &[3]),
        Err(Error::Dim(_))
    ));
    assert!(matches!(
        Tensor::from_vec(vec![], &[0, 2]),
        Err(Error::Dim(_))
    ));
}

#[test]
fn matmul_identity_passes_through() {
    let mut g = Graph::new();
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let x = Tensor::from_vec(vec![3.0, -1.0, 2.5, 7.0, 0.0, 4.0], &[2, 3]).unwrap();
    let y = g.matmul(&eye, &x).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::from_vec(vec![5.0, 6.0], &[2, 1]).unwrap();
    let c = g.matmul(&a, &b).unwrap();
    assert_eq!(c.to_vec(), vec![17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_is_dim_error() {
    let mut g = Graph::new();
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(matches!(g.matmul(&a, &b), Err(Error::Dim(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut s = RngStream::for_purpose(7, "test-matmul");
    let b = Tensor::randn(&[3, 2], 0.5, &mut s);
    let x = Tensor::randn(&[2, 3], 0.5, &mut s);
    let err = grad_check(
        |g, a| {
            let c = g.matmul(a, &b)?;
            let total = g.sum(&c);
            Ok(g.scale(&total, 0.1))
        },
        &x,
        0.02,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn softmax_symmetry_and_closed_form() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
    let y = g.softmax(&x, 1).unwrap();
    assert_close(&y.to_vec(), &[0.5, 0.5], 1e-7);

    let x = Tensor::from_vec(vec![(2.0f32).ln(), 0.0], &[1, 2]).unwrap();
    let y = g.softmax(&x, 1).unwrap();
    assert_close(&y.to_vec(), &[2.0 / 3.0, 1.0 / 3.0], 1e-6);
}

#[test]
fn softmax_shift_invariance() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7], &[1, 4]).unwrap();
    let shifted = Tensor::from_vec(vec![0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0, 0.7 + 5.0], &[1, 4])
        .unwrap();
    let a = g.softmax(&x, 1).unwrap();
    let b = g.softmax(&shifted, 1).unwrap();
    assert_close(&a.to_vec(), &b.to_vec(), 1e-6);
}

#[test]
fn softmax_axis_zero_normalizes_columns() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![1.0, -2.0, 1.0, 3.0, 1.0, 0.5], &[3, 2]).unwrap();
    let y = g.softmax(&x, 0).unwrap();
    let yd = y.to_vec();
    for col in 0..2 {
        let total: f32 = (0..3).map(|r| yd[r * 2 + col]).sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn layer_norm_hand_examples() {
    let mut g = Graph::new();
    let gamma = Tensor::from_vec(vec![1.0, 1.0], &[2]).unwrap();
    let beta = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();

    let constant = Tensor::from_vec(vec![4.0, 4.0], &[1, 2]).unwrap();
    let y = g.layer_norm(&constant, &gamma, &beta, 1e-5).unwrap();
    assert_close(&y.to_vec(), &[0.0, 0.0], 1e-4);

    let x = Tensor::from_vec(vec![1.0, 3.0], &[1, 2]).unwrap();
    let y = g.layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
    assert_close(&y.to_vec(), &[-1.0, 1.0], 1e-4);
}

#[test]
fn gelu_known_values() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![0.0, 10.0, 1.0], &[3]).unwrap();
    let y = g.gelu(&x).to_vec();
    assert!(y[0].abs() <= 1e-9);
    assert!((y[1] - 10.0).abs() <= 1e-6);
    assert!((y[2] - 0.841345).abs() <= 1e-6);
}

#[test]
fn dropout_identity_and_all_zero_modes() {
    let mut g = Graph::new();
    let mut s = RngStream::for_purpose(3, "test-dropout");
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();

    let same = g.dropout(&x, 0.0, &mut s, true).unwrap();
    assert_eq!(same.to_vec(), x.to_vec());
    let eval = g.dropout(&x, 0.9, &mut s, false).unwrap();
    assert_eq!(eval.to_vec(), x.to_vec());
    let zeroed = g.dropout(&x, 1.0, &mut s, true).unwrap();
    assert_eq!(zeroed.to_vec(), vec![0.0, 0.0, 0.0]);
}

#[test]
fn dropout_preserves_mean_over_many_draws() {
    let n = 100_000;
    let x = Tensor::full(&[n], 1.0);
    let mut s = RngStream::for_purpose(11, "test-dropout-mean");
    let mut g = Graph::no_grad();
    let y = g.dropout(&x, 0.3, &mut s, true).unwrap();
    let mean: f64 = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap().with_requires_grad(true);
    let sq = g.mul(&x, &x).unwrap();
    let loss = g.sum(&sq);
    g.backward(&loss).unwrap();
    assert_close(&x.grad().unwrap(), &[2.0, -4.0, 1.0], 1e-6);
}

#[test]
fn backward_on_constant_leaves_grads_empty() {
    let g = Graph::new();
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_requires_grad(true);
    let c = Tensor::scalar(5.0);
    g.backward(&c).unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn backward_twice_doubles_grads() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![1.5, -0.5], &[2]).unwrap().with_requires_grad(true);
    let sq = g.mul(&x, &x).unwrap();
    let loss = g.sum(&sq);
    g.backward(&loss).unwrap();
    let first = x.grad().unwrap();
    g.backward(&loss).unwrap();
    let second = x.grad().unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert!((2.0 * a - b).abs() <= 1e-6);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_requires_grad(true);
    let y = g.mul(&x, &x).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::Contract(_))));
}

#[test]
fn no_grad_graph_records_nothing() {
    let mut g = Graph::no_grad();
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_requires_grad(true);
    let y = g.mul(&x, &x).unwrap();
    assert!(!y.requires_grad());
    assert!(g.is_empty());
}

#[test]
fn fanout_gradients_sum_both_paths() {
    let x = Tensor::from_vec(vec![0.4, -0.9, 1.3], &[3]).unwrap();
    let err = grad_check(
        |g, t| {
            let a = g.gelu(t);
            let b = g.add(t, &a)?;
            let sq = g.mul(&b, &b)?;
            let total = g.sum(&sq);
            Ok(g.scale(&total, 0.1))
        },
        &x,
        0.01,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn grad_check_linear_is_machine_exact() {
    let x = Tensor::from_vec(vec![0.5, -0.25, 0.75, 0.125], &[4]).unwrap();
    let w = Tensor::from_vec(vec![1.0, -1.0, 1.0, 1.0], &[4]).unwrap();
    let err = grad_check(
        |g, t| {
            let wy = g.mul(t, &w)?;
            let total = g.sum(&wy);
            Ok(g.scale(&total, 0.25))
        },
        &x,
        0.25,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn grad_check_rejects_active_dropout() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
    let result = grad_check(
        |g, t| {
            let mut s = RngStream::for_purpose(1, "test-stochastic");
            let d = g.dropout(t, 0.5, &mut s, true)?;
            Ok(g.sum(&d))
        },
        &x,
        0.01,
    );
    assert!(matches!(result, Err(Error::Contract(_))));
}

#[test]
fn grad_check_two_layer_mlp() {
    let mut s = RngStream::for_purpose(21, "test-mlp");
    let w1 = Tensor::randn(&[5, 4], 0.4, &mut s);
    let b1 = Tensor::randn(&[5], 0.4, &mut s);
    let w2 = Tensor::randn(&[2, 5], 0.4, &mut s);
    let b2 = Tensor::randn(&[2], 0.4, &mut s);
    let x = Tensor::randn(&[3, 4], 0.5, &mut s);
    let err = grad_check(
        |g, t| {
            let h = g.linear(t, &w1, Some(&b1))?;
            let a = g.gelu(&h);
            let out = g.linear(&a, &w2, Some(&b2))?;
            let total = g.sum(&out);
            Ok(g.scale(&total, 0.1))
        },
        &x,
        0.015,
    )
    .unwrap();
    assert!(err <= 1e-3, "rel err {err}");
}

#[test]
fn standard_suite_passes_tolerance() {
    for seed in [1u64, 2] {
        for outcome in standard_suite(seed).unwrap() {
            assert!(
                outcome.max_rel_err <= GRAD_TOLERANCE,
                "case {} at seed {seed}: rel err {}",
                outcome.name,
                outcome.max_rel_err
            );
        }
    }
}

#[test]
fn block_slice_and_concat_roundtrip() {
    let mut g = Graph::new();
    let x = Tensor::from_vec((0..12).map(|v| v as f32).collect(), &[3, 4]).unwrap();
    let top = g.block_slice(&x, 0, 1, 0, 4).unwrap();
    let rest = g.block_slice(&x, 1, 2, 0, 4).unwrap();
    let back = g.concat_rows(&[&top, &rest]).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());

    let left = g.block_slice(&x, 0, 3, 0, 1).unwrap();
    let right = g.block_slice(&x, 0, 3, 1, 3).unwrap();
    let back = g.concat_cols(&[&left, &right]).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());
}

#[test]
fn add_tiled_repeats_rows() {
    let mut g = Graph::new();
    let x = Tensor::zeros(&[4, 2]);
    let tile = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let y = g.add_tiled(&x, &tile).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..6,
        cols in 2usize..8,
        seed in 0u64..1000,
    ) {
        let mut s = RngStream::for_purpose(seed, "prop-softmax");
        let x = Tensor::randn(&[rows, cols], 2.0, &mut s);
        let mut g = Graph::no_grad();
        let y = g.softmax(&x, 1).unwrap();
        let yd = y.to_vec();
        for row in yd.chunks(cols) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn random_small_ops_pass_grad_check(
        m in 1usize..8,
        k in 1usize..8,
        n in 1usize..8,
        seed in 0u64..1000,
    ) {
        let mut s = RngStream::for_purpose(seed, "prop-gradcheck");
        let a = Tensor::randn(&[m, k], 0.5, &mut s);
        let b = Tensor::randn(&[k, n], 0.5, &mut s);
        let body = |g: &mut Graph, t: &Tensor| {
            let c = g.matmul(t, &b)?;
            let act = g.gelu(&c);
            Ok(g.sum(&act))
        };
        let l0 = body(&mut Graph::no_grad(), &a).unwrap().item().unwrap();
        let scale = (0.15 / l0.abs().max(1.5e-4)).min(1000.0);
        let err = grad_check_multi_h(
            |g, t| {
                let total = body(g, t)?;
                Ok(g.scale(&total, scale))
            },
            &a,
            &[0.005, 0.01, 0.02],
        ).unwrap();
        prop_assert!(err <= 1e-3, "rel err {}", err);
    }
}
