use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn new_rejects_length_mismatch() {
    assert!(matches!(
        Tensor::new(&[2, 3], vec![0.0; 5]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn relu_sign_cases() {
    let tape = Tape::new();
    let x = tape.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let tape = Tape::new();
    let x = tape.leaf_grad(&t(&[3], &[-1.0, 0.0, 2.0]));
    let g = tape.backward(&x.relu().sum()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn sigmoid_of_zero_is_half() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1]));
    assert_eq!(x.sigmoid().data(), &[0.5]);
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    let tape = Tape::new();
    let x = tape.constant(&t(&[2], &[-800.0, 800.0]));
    let y = x.sigmoid();
    assert_eq!(y.data(), &[0.0, 1.0]);
}

#[test]
fn mul_matches_scalar_loop() {
    let mut r = rng(3);
    let a = Tensor::randn(&[2, 3], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3], 1.0, &mut r);
    let tape = Tape::new();
    let y = tape.constant(&a).mul(&tape.constant(&b)).unwrap();
    for i in 0..6 {
        assert_eq!(y.data()[i], a.data()[i] * b.data()[i]);
    }
}

#[test]
fn broadcast_channel_gate() {
    let tape = Tape::new();
    let psi = tape.constant(&t(&[1, 1, 1, 2], &[0.5, 2.0]));
    let f = tape.constant(&t(&[1, 2, 1, 2], &[1.0, 1.0, 3.0, 3.0]));
    assert_eq!(psi.mul(&f).unwrap().data(), &[0.5, 2.0, 1.5, 6.0]);
}

#[test]
fn unbroadcastable_shapes_error() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4]));
    assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    assert!(matches!(
        a.elementwise(Elementwise::Mul, None),
        Err(Error::Usage(_))
    ));
}

#[test]
fn identity_matmul() {
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng(1));
    let tape = Tape::new();
    let y = tape
        .constant(&Tensor::eye(3))
        .matmul(&tape.constant(&a))
        .unwrap();
    assert_eq!(y.value(), a);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 2], 1.0, &mut r);
    let tape = Tape::new();
    let y = tape.constant(&a).matmul(&tape.constant(&b)).unwrap();
    assert_eq!(y.shape(), &[4, 2]);
    for i in 0..4 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..5 {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            assert!((y.value().at(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_matmul_annihilates() {
    let b = Tensor::randn(&[2, 3], 1.0, &mut rng(2));
    let tape = Tape::new();
    let y = tape
        .constant(&Tensor::zeros(&[2, 2]))
        .matmul(&tape.constant(&b))
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_inner_mismatch_errors() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
}

#[test]
fn batched_matmul_broadcasts_rank2_operand() {
    let mut r = rng(11);
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let w = Tensor::randn(&[5, 2], 1.0, &mut r);
    let tape = Tape::new();
    let y = tape.constant(&x).matmul(&tape.constant(&w)).unwrap();
    assert_eq!(y.shape(), &[3, 4, 2]);
    let v = y.value();
    for b in 0..3 {
        for i in 0..4 {
            for j in 0..2 {
                let s: f64 = (0..5).map(|p| x.at(&[b, i, p]) * w.at(&[p, j])).sum();
                assert!((v.at(&[b, i, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_uniform_input() {
    let tape = Tape::new();
    let y = tape.constant(&Tensor::zeros(&[3])).softmax(0).unwrap();
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_large_inputs_do_not_overflow() {
    let tape = Tape::new();
    let y = tape
        .constant(&t(&[2], &[1000.0, 1000.0]))
        .softmax(0)
        .unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_extended_precision_reference() {
    // Reference evaluated at 50 significant digits, rounded to f64.
    let want = [
        0.005257357307409269,
        0.0007115059402743089,
        0.0369523220133079,
        0.003894746085962962,
        0.9530129454527866,
        0.0001711232002589805,
    ];
    let tape = Tape::new();
    let x = t(&[6], &[0.3, -1.7, 2.25, 0.0, 5.5, -3.125]);
    let y = tape.constant(&x).softmax(0).unwrap();
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let tape = Tape::new();
    let x = tape.constant(&t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(x.softmax(0), Err(Error::Numeric(_))));
    assert!(matches!(x.softmax(1), Err(Error::Dimension(_))));
}

#[test]
fn reshape_preserves_row_major_order() {
    let x = Tensor::from_fn(&[2, 6], |i| i as f64);
    let tape = Tape::new();
    let y = tape.constant(&x).reshape(&[3, 4]).unwrap();
    assert_eq!(y.data(), x.data());
    assert_eq!(y.value().at(&[1, 0]), 4.0);
    assert!(matches!(
        tape.constant(&x).reshape(&[5, 2]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn concat_channel_counts_add() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 2, 3, 3]));
    let b = tape.constant(&Tensor::ones(&[2, 3, 3, 3]));
    let c = Var::concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), &[2, 5, 3, 3]);
    let bad = tape.constant(&Tensor::ones(&[2, 3, 4, 3]));
    assert!(Var::concat(&[&a, &bad], 1).is_err());
}

#[test]
fn mean_of_ones_is_one() {
    let tape = Tape::new();
    let y = tape.constant(&Tensor::ones(&[2, 3, 4])).mean();
    assert_eq!(y.item(), 1.0);
}

#[test]
fn partial_reductions() {
    let x = Tensor::from_fn(&[2, 3], |i| i as f64);
    let tape = Tape::new();
    let v = tape.constant(&x);
    assert_eq!(v.sum_axes(&[0], false).unwrap().data(), &[3.0, 5.0, 7.0]);
    let m = v.mean_axes(&[1], true).unwrap();
    assert_eq!(m.shape(), &[2, 1]);
    assert_eq!(m.data(), &[1.0, 4.0]);
}

#[test]
fn permute_moves_axes() {
    let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let tape = Tape::new();
    let y = tape.constant(&x).permute(&[2, 0, 1]).unwrap();
    assert_eq!(y.shape(), &[4, 2, 3]);
    let v = y.value();
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                assert_eq!(v.at(&[c, a, b]), x.at(&[a, b, c]));
            }
        }
    }
    assert!(tape.constant(&x).permute(&[0, 0, 1]).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf_grad(&Tensor::randn(&[3, 2], 1.0, &mut rng(5)));
    tape.backward(&x.sum()).unwrap();
    assert_eq!(x.grad().unwrap(), Tensor::ones(&[3, 2]));
}

#[test]
fn backward_of_square_sum_is_twice_input() {
    let xv = Tensor::randn(&[4], 1.0, &mut rng(6));
    let tape = Tape::new();
    let x = tape.leaf_grad(&xv);
    let g = tape.backward(&x.mul(&x).unwrap().sum()).unwrap();
    let gx = g.get(&x).unwrap();
    for (a, b) in gx.data().iter().zip(xv.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn backward_on_non_scalar_is_usage_error() {
    let tape = Tape::new();
    let x = tape.leaf_grad(&Tensor::ones(&[2]));
    assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
}

#[test]
fn fan_out_doubles_gradient_exactly() {
    let xv = Tensor::randn(&[5], 1.0, &mut rng(9));
    let once = {
        let tape = Tape::new();
        let x = tape.leaf_grad(&xv);
        let y = x.sigmoid().sum();
        tape.backward(&y).unwrap().get(&x).unwrap()
    };
    let twice = {
        let tape = Tape::new();
        let x = tape.leaf_grad(&xv);
        let y = x.sigmoid().sum().add(&x.sigmoid().sum()).unwrap();
        tape.backward(&y).unwrap().get(&x).unwrap()
    };
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf_grad(&Tensor::ones(&[2]));
    let c = tape.constant(&Tensor::ones(&[2]));
    let g = tape.backward(&x.mul(&c).unwrap().sum()).unwrap();
    assert!(g.get(&c).is_none());
    assert!(g.get(&x).is_some());
}

#[test]
fn no_grad_tape_records_values_only() {
    let tape = Tape::no_grad();
    let x = tape.leaf_grad(&Tensor::ones(&[2]));
    assert!(!x.requires_grad());
    let y = x.exp().sum();
    assert!((y.item() - 2.0 * 1f64.exp()).abs() < 1e-15);
}

#[test]
fn fd_check_sigmoid_sum() {
    let x = Tensor::randn(&[6], 1.0, &mut rng(1));
    let err = finite_diff_check(|_, x| Ok(x.sigmoid().sum()), &x, FD_STEP).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fd_check_linear_is_exact() {
    let x = Tensor::randn(&[5], 1.0, &mut rng(2));
    let err = finite_diff_check(|_, x| Ok(x.scale(3.0).sum()), &x, FD_STEP).unwrap();
    assert!(err < 1e-10, "{err}");
}

/// Every primitive, composed into a scalar, over ten seeds.
#[test]
fn fd_check_every_primitive() {
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 1], 1.0, &mut r);
        let w = Tensor::randn(&[4, 2], 1.0, &mut r);
        let pos = Tensor::uniform(&[2, 3, 4], 0.5, 2.0, &mut r);
        let checks: Vec<(&str, f64)> = vec![
            (
                "add/sub/mul/div",
                finite_diff_check_many(
                    |_, v| {
                        let s = v[0].add(&v[1])?.mul(&v[0])?.sub(&v[1])?;
                        Ok(s.div(&v[2])?.sum())
                    },
                    &[a.clone(), b.clone(), pos.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
            (
                "relu/sigmoid/exp/log",
                finite_diff_check_many(
                    |_, v| {
                        Ok(v[0]
                            .relu()
                            .add(&v[0].sigmoid())?
                            .add(&v[0].exp())?
                            .add(&v[1].log())?
                            .sum())
                    },
                    &[a.clone(), pos.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
            (
                "matmul",
                finite_diff_check_many(
                    |_, v| Ok(v[0].matmul(&v[1])?.sigmoid().sum()),
                    &[a.clone(), w.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
            (
                "softmax",
                finite_diff_check_many(
                    |tape, v| {
                        let weights =
                            tape.constant(&Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
                        Ok(v[0].softmax(1)?.mul(&weights)?.sum())
                    },
                    &[a.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
            (
                "reshape/permute/slice/concat",
                finite_diff_check_many(
                    |_, v| {
                        let p = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
                        let s = p.slice(1, 1, 4)?;
                        let c = Var::concat(&[&s, &p], 1)?;
                        Ok(c.mul(&c)?.sum())
                    },
                    &[a.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
            (
                "sum/mean axes",
                finite_diff_check_many(
                    |_, v| {
                        let m = v[0].mean_axes(&[0, 2], true)?;
                        let s = v[0].sum_axes(&[1], false)?;
                        Ok(m.mul(&m)?.sum().add(&s.sigmoid().mean())?)
                    },
                    &[a.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
            (
                "scale/add_scalar/clamp/neg",
                finite_diff_check_many(
                    |_, v| {
                        Ok(v[0]
                            .scale(0.7)
                            .add_scalar(0.1)
                            .clamp(-5.0, 5.0)
                            .neg()
                            .exp()
                            .sum())
                    },
                    &[a.clone()],
                    FD_STEP,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "seed {seed}: {name} rel err {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(
        vals in prop::collection::vec(-50.0f64..50.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::new(&[3, 4], vals).unwrap();
        let tape = Tape::no_grad();
        let y = tape.constant(&x).softmax(1).unwrap().value();
        let ys = tape.constant(&x.map(|v| v + shift)).softmax(1).unwrap().value();
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| y.at(&[r, c])).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for c in 0..4 {
                prop_assert!(y.at(&[r, c]) > 0.0 || x.at(&[r, c]) < -30.0);
                prop_assert!((y.at(&[r, c]) - ys.at(&[r, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reshape_round_trip_and_concat_slice_recovery(
        vals in prop::collection::vec(-1e3f64..1e3, 24),
        split in 1usize..4,
    ) {
        let x = Tensor::new(&[2, 4, 3], vals).unwrap();
        let tape = Tape::no_grad();
        let v = tape.constant(&x);
        let back = v.reshape(&[6, 4]).unwrap().reshape(&[2, 4, 3]).unwrap();
        prop_assert_eq!(back.value(), x.clone());
        let a = v.slice(1, 0, split).unwrap();
        let b = v.slice(1, split, 4).unwrap();
        let joined = Var::concat(&[&a, &b], 1).unwrap();
        prop_assert_eq!(joined.value(), x.clone());
        let c = Var::concat(&[&a, &b, &a], 1).unwrap();
        prop_assert_eq!(c.slice(1, 0, split).unwrap().value(), a.value());
        prop_assert_eq!(c.slice(1, split, 4).unwrap().value(), b.value());
    }
}

#[test]
fn parameter_used_twice_accumulates_both_gradients() {
    let tape = Tape::new();
    let w = t(&[2], &[1.5, -0.5]);
    let a = tape.param_leaf(7, &w, true);
    let b = tape.param_leaf(7, &w, true);
    let x = tape.constant(&t(&[2], &[2.0, 3.0]));
    let loss = a.mul(&x).unwrap().add(&b.scale(4.0)).unwrap().sum();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.param_grad(7).unwrap(), vec![6.0, 7.0]);
    assert_eq!(tape.param_grad(8), None);
}
