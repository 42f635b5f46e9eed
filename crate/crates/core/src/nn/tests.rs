use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{finite_diff_check_many, Tape, Tensor, FD_STEP};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six-loop direct convolution.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [bn, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[bn, co, ho, wo]);
    for n in 0..bn {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    s += x.at(&[n, c, ii as usize, jj as usize])
                                        * w.at(&[o, c, ki, kj]);
                                }
                            }
                        }
                    }
                    out.set(&[n, o, i, j], s);
                }
            }
        }
    }
    out
}

fn run_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let tape = Tape::no_grad();
    conv2d(
        &tape.constant(x),
        &tape.constant(w),
        Some(&tape.constant(b)),
        stride,
        pad,
    )
    .unwrap()
    .value()
}

#[test]
fn pointwise_unit_conv_is_identity() {
    let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng(1));
    let y = run_conv(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 1, 0);
    assert_eq!(y, x);
}

#[test]
fn conv3x3_matches_sliding_window() {
    let mut r = rng(2);
    let x = Tensor::randn(&[1, 1, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[1], 1.0, &mut r);
    let got = run_conv(&x, &w, &b, 1, 0);
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, &b, 1, 0)) < 1e-12);
}

#[test]
fn stride_two_output_size() {
    let x = Tensor::zeros(&[1, 1, 8, 8]);
    let y = run_conv(
        &x,
        &Tensor::zeros(&[1, 1, 3, 3]),
        &Tensor::zeros(&[1]),
        2,
        1,
    );
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert_eq!(conv_out_len(8, 3, 2, 1), Some(4));
}

#[test]
fn conv_matches_oracle_on_random_shapes() {
    let mut r = rng(3);
    for _ in 0..20 {
        let b = r.random_range(1..3);
        let ci = r.random_range(1..4);
        let co = r.random_range(1..4);
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let h = r.random_range(k.max(3)..10);
        let w = r.random_range(k.max(3)..10);
        let x = Tensor::randn(&[b, ci, h, w], 1.0, &mut r);
        let wt = Tensor::randn(&[co, ci, k, k], 1.0, &mut r);
        let bias = Tensor::randn(&[co], 1.0, &mut r);
        let got = run_conv(&x, &wt, &bias, stride, pad);
        let want = conv_oracle(&x, &wt, &bias, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let tape = Tape::no_grad();
    let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        conv2d(&x, &w, None, 1, 1),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn conv_param_count_formula() {
    let c = Conv2d::new("c", 3, 5, 3, 1, 1, 0);
    assert_eq!(c.num_params(), Conv2d::param_count(3, 5, 3));
    assert_eq!(c.num_params(), 5 * (3 * 9 + 1));
    let d = Dense::new("d", 7, 4, true, 0);
    assert_eq!(d.num_params(), 7 * 4 + 4);
    let d = Dense::new("d", 7, 4, false, 0);
    assert_eq!(d.num_params(), Dense::param_count(7, 4, false));
}

#[test]
fn batchnorm_train_output_is_normalized() {
    let x = Tensor::randn(&[2, 3, 4, 4], 3.0, &mut rng(4)).map(|v| v + 5.0);
    let bn = BatchNorm2d::new("bn", 3);
    let mut ctx = Ctx::new(&Tape::no_grad(), Mode::Train);
    let xv = ctx.tape.constant(&x);
    let y = bn.forward(&mut ctx, &xv).unwrap().value();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|b| (0..16).map(move |i| (b, i)))
            .map(|(b, i)| y.at(&[b, c, i / 4, i % 4]))
            .collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-8);
        // eps shifts the variance slightly below 1
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_identity() {
    let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng(5));
    let mut bn = BatchNorm2d::new("bn", 2);
    bn.eps = 0.0;
    let mut ctx = Ctx::new(&Tape::no_grad(), Mode::Eval);
    let xv = ctx.tape.constant(&x);
    let y = bn.forward(&mut ctx, &xv).unwrap().value();
    assert!(y.max_abs_diff(&x) < 1e-15);
}

#[test]
fn running_stats_follow_momentum_blend() {
    let x = Tensor::from_fn(&[2, 1, 1, 2], |i| [1.0, 3.0, 5.0, 7.0][i]);
    let mut bn = BatchNorm2d::new("bn", 1);
    let mut ctx = Ctx::new(&Tape::no_grad(), Mode::Train);
    let xv = ctx.tape.constant(&x);
    bn.forward(&mut ctx, &xv).unwrap();
    ctx.apply_stat_updates(&mut bn);
    // batch mean 4, unbiased variance ((9+1+1+9)/3)
    let mean = 0.9 * 0.0 + 0.1 * 4.0;
    let var = 0.9 * 1.0 + 0.1 * (20.0 / 3.0);
    assert!((bn.running_mean.value.data()[0] - mean).abs() < 1e-15);
    assert!((bn.running_var.value.data()[0] - var).abs() < 1e-15);
}

#[test]
fn batchnorm_single_element_is_degenerate() {
    let bn = BatchNorm2d::new("bn", 2);
    let mut ctx = Ctx::new(&Tape::no_grad(), Mode::Train);
    let xv = ctx.tape.constant(&Tensor::ones(&[1, 2, 1, 1]));
    assert!(matches!(
        bn.forward(&mut ctx, &xv),
        Err(Error::DegenerateStatistics(_))
    ));
}

fn pool(x: &Tensor, k: usize, s: usize, p: usize) -> Tensor {
    let tape = Tape::no_grad();
    max_pool2d(&tape.constant(x), k, s, p).unwrap().value()
}

#[test]
fn maxpool_constant_input() {
    let y = pool(&Tensor::full(&[1, 2, 6, 6], 3.5), 3, 2, 1);
    assert_eq!(y.shape(), &[1, 2, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 3.5));
}

#[test]
fn maxpool_ramp_picks_window_corners() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let y = pool(&x, 2, 2, 0);
    assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
}

#[test]
fn maxpool_matches_window_scan() {
    let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng(6));
    let y = pool(&x, 3, 2, 1);
    let (ho, wo) = (4, 3);
    assert_eq!(y.shape(), &[2, 3, ho, wo]);
    for b in 0..2 {
        for c in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = ((2 * i + di) as isize - 1, (2 * j + dj) as isize - 1);
                            if (0..7).contains(&ii) && (0..6).contains(&jj) {
                                m = m.max(x.at(&[b, c, ii as usize, jj as usize]));
                            }
                        }
                    }
                    assert_eq!(y.at(&[b, c, i, j]), m);
                }
            }
        }
    }
}

#[test]
fn maxpool_tie_routes_gradient_to_first() {
    let tape = Tape::new();
    let x = tape.leaf_grad(&Tensor::ones(&[1, 1, 2, 2]));
    let y = max_pool2d(&x, 2, 2, 0).unwrap();
    let g = tape.backward(&y.sum()).unwrap().get(&x).unwrap();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
}

fn up(x: &Tensor, mode: UpsampleMode) -> Tensor {
    let tape = Tape::no_grad();
    upsample2x(&tape.constant(x), mode).unwrap().value()
}

#[test]
fn nearest_upsample_duplicates_blocks() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = up(&x, UpsampleMode::Nearest);
    assert_eq!(
        y.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn bilinear_keeps_constants() {
    let y = up(&Tensor::full(&[1, 2, 3, 3], 0.7), UpsampleMode::Bilinear);
    assert_eq!(y.shape(), &[1, 2, 6, 6]);
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn bilinear_matches_direct_interpolation() {
    let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng(7));
    let y = up(&x, UpsampleMode::Bilinear);
    // Half-pixel centres: source coordinate (o + 0.5)/2 − 0.5, clamped.
    let sample = |r: f64, c: f64| -> f64 {
        let r = r.clamp(0.0, 2.0);
        let c = c.clamp(0.0, 2.0);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(2), (c0 + 1).min(2));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let v = |i: usize, j: usize| x.at(&[0, 0, i, j]);
        (1.0 - fr) * ((1.0 - fc) * v(r0, c0) + fc * v(r0, c1))
            + fr * ((1.0 - fc) * v(r1, c0) + fc * v(r1, c1))
    };
    for i in 0..6 {
        for j in 0..6 {
            let want = sample((i as f64 + 0.5) / 2.0 - 0.5, (j as f64 + 0.5) / 2.0 - 0.5);
            assert!((y.at(&[0, 0, i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_gradients_pass_finite_differences() {
    for seed in 0..10u64 {
        let mut r = rng(200 + seed);
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[4], 0.5, &mut r);
        let weights = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
        let conv_err = finite_diff_check_many(
            |tape, v| {
                let y = conv2d(&v[0], &v[1], Some(&v[2]), 2, 1)?;
                Ok(y.mul(&tape.constant(&weights))?.sum())
            },
            &[x.clone(), w.clone(), b.clone()],
            FD_STEP,
        )
        .unwrap();
        assert!(conv_err < 1e-4, "conv seed {seed}: {conv_err}");

        let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
        let beta = Tensor::randn(&[3], 0.5, &mut r);
        let mix = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let bn_err = finite_diff_check_many(
            |tape, v| {
                let out = batch_norm_train(&v[0], &v[1], &v[2], BN_EPS)?;
                Ok(out.y.mul(&tape.constant(&mix))?.sum())
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            FD_STEP,
        )
        .unwrap();
        assert!(bn_err < 1e-4, "bn train seed {seed}: {bn_err}");

        let rm = [0.1, -0.2, 0.3];
        let rv = [0.5, 1.5, 2.0];
        let bn_eval_err = finite_diff_check_many(
            |tape, v| {
                let y = batch_norm_eval(&v[0], &v[1], &v[2], &rm, &rv, BN_EPS)?;
                Ok(y.mul(&tape.constant(&mix))?.sum())
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            FD_STEP,
        )
        .unwrap();
        assert!(bn_eval_err < 1e-4, "bn eval seed {seed}: {bn_eval_err}");

        let pool_err = finite_diff_check_many(
            |_, v| Ok(max_pool2d(&v[0], 3, 2, 1)?.sigmoid().sum()),
            &[x.clone()],
            FD_STEP,
        )
        .unwrap();
        assert!(pool_err < 1e-4, "pool seed {seed}: {pool_err}");

        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let up_err = finite_diff_check_many(
                |_, v| Ok(upsample2x(&v[0], mode)?.sigmoid().sum()),
                &[x.clone()],
                FD_STEP,
            )
            .unwrap();
            assert!(up_err < 1e-4, "upsample {mode:?} seed {seed}: {up_err}");
        }

        let dw = Tensor::randn(&[3, 5], 0.5, &mut r);
        let db = Tensor::randn(&[5], 0.5, &mut r);
        let seq = Tensor::randn(&[2, 4, 3], 1.0, &mut r);
        let dense_err = finite_diff_check_many(
            |_, v| Ok(v[0].matmul(&v[1])?.add(&v[2])?.sigmoid().sum()),
            &[seq.clone(), dw.clone(), db.clone()],
            FD_STEP,
        )
        .unwrap();
        assert!(dense_err < 1e-4, "dense seed {seed}: {dense_err}");
    }
}

#[test]
fn layer_structs_route_gradients_to_params() {
    let mut conv = Conv2d::new("c", 2, 3, 3, 1, 1, 9);
    let mut bn = BatchNorm2d::new("bn", 3);
    let mut ctx = Ctx::train();
    let x = ctx
        .tape
        .constant(&Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng(8)));
    let y = conv.forward(&ctx, &x).unwrap();
    let y = bn.forward(&mut ctx, &y).unwrap();
    let loss = y.mul(&y).unwrap().mean();
    ctx.tape.backward(&loss).unwrap();
    conv.collect_grads(&ctx.tape);
    bn.collect_grads(&ctx.tape);
    assert!(conv.weight.value.grad().is_some());
    assert!(conv.bias.value.grad().is_some());
    assert!(bn.gamma.value.grad().is_some());
    assert!(bn.running_mean.value.grad().is_none());
    assert_eq!(ctx.stat_updates().len(), 1);
}

#[test]
fn same_name_and_seed_give_same_weights() {
    let a = Conv2d::new("enc.conv", 3, 4, 3, 1, 1, 42);
    let b = Conv2d::new("enc.conv", 3, 4, 3, 1, 1, 42);
    let c = Conv2d::new("enc.other", 3, 4, 3, 1, 1, 42);
    assert_eq!(a.weight.value, b.weight.value);
    assert_ne!(a.weight.value, c.weight.value);
    assert_ne!(a.weight.key(), b.weight.key());
}

#[test]
fn var_tape_mismatch_is_caught() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(&Tensor::ones(&[1]));
    let b = t2.constant(&Tensor::ones(&[1]));
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| a.add(&b)));
    assert!(r.is_err());
}
