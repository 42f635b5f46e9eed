use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Mode;
use crate::tensor::Tape;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, 3, h, w], 0.0, 1.0, &mut rng(seed))
}

fn run(model: &Model, x: &Tensor, mode: Mode) -> (Tensor, Trace) {
    let mut ctx = Ctx::new(&Tape::no_grad(), mode);
    let xv = ctx.tape.constant(x);
    let y = model.forward(&mut ctx, &xv).unwrap().value();
    (y, ctx.trace)
}

#[test]
fn pyramid_halves_and_uses_configured_widths() {
    let cfg = ModelConfig::desk(64, 64, 1);
    let model = Model::new(cfg.clone()).unwrap();
    assert_eq!(cfg.widths(), [8, 32, 64, 128]);
    let mut ctx = Ctx::eval();
    let x = ctx.tape.constant(&image(2, 64, 64, 1));
    let f = model.encode(&mut ctx, &x).unwrap();
    assert_eq!(f.f0.shape(), &[2, 8, 32, 32]);
    assert_eq!(f.f1.shape(), &[2, 32, 16, 16]);
    assert_eq!(f.f2.shape(), &[2, 64, 8, 8]);
    assert_eq!(f.f3.shape(), &[2, 128, 4, 4]);
}

#[test]
fn zeroed_residual_block_reduces_to_its_shortcut() {
    let mut block = ResBlock::new("r", BlockKind::Basic, 4, 4, 1, 3);
    for layer in &mut block.main {
        layer.conv.weight.value = Tensor::zeros(layer.conv.weight.value.shape());
    }
    // relu output, as every block input inside the encoder is
    let x = Tensor::uniform(&[2, 4, 5, 5], 0.0, 1.0, &mut rng(2));
    for mode in [Mode::Train, Mode::Eval] {
        let mut ctx = Ctx::new(&Tape::no_grad(), mode);
        let xv = ctx.tape.constant(&x);
        let y = block.forward(&mut ctx, &xv).unwrap();
        assert_eq!(y.data(), x.data());
    }

    let mut down = ResBlock::new("d", BlockKind::Bottleneck, 4, 8, 2, 3);
    for layer in &mut down.main {
        layer.conv.weight.value = Tensor::zeros(layer.conv.weight.value.shape());
    }
    let mut ctx = Ctx::eval();
    let xv = ctx.tape.constant(&x);
    let y = down.forward(&mut ctx, &xv).unwrap();
    let shortcut = down
        .shortcut
        .as_ref()
        .unwrap()
        .forward(&mut ctx, &xv)
        .unwrap()
        .relu();
    assert_eq!(y.data(), shortcut.data());
}

#[test]
fn output_shape_for_small_inputs_and_all_flags() {
    for (h, w) in [(32, 32), (32, 48), (16, 64)] {
        for k in [1, 2, 3] {
            for (r, c) in [(false, false), (true, false), (false, true), (true, true)] {
                let model = Model::new(ModelConfig::desk(h, w, k).with_flags(r, c)).unwrap();
                let (y, trace) = run(&model, &image(2, h, w, 3), Mode::Eval);
                assert_eq!(y.shape(), &[2, k, h, w]);
                assert_eq!(trace.psi.len(), if r { 3 } else { 0 });
                assert_eq!(trace.attention.len(), usize::from(c));
            }
        }
    }
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    assert!(Model::new(ModelConfig::desk(40, 32, 1)).is_err());
    assert!(Model::new(ModelConfig::desk(32, 32, 0)).is_err());
    let mut cfg = ModelConfig::desk(32, 32, 1);
    cfg.width_multiplier = 0.0;
    assert!(Model::new(cfg).is_err());
    let model = Model::new(ModelConfig::desk(32, 32, 1)).unwrap();
    let mut ctx = Ctx::eval();
    let x = ctx.tape.constant(&image(1, 64, 64, 0));
    assert!(matches!(
        model.forward(&mut ctx, &x),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn open_gates_reproduce_the_plain_decoder_bitwise() {
    let base = Model::new(ModelConfig::desk(32, 32, 2).with_flags(false, true)).unwrap();
    let mut gated = Model::new(ModelConfig::desk(32, 32, 2).with_flags(true, true)).unwrap();
    gated.open_gates();
    let x = image(2, 32, 32, 4);
    for mode in [Mode::Train, Mode::Eval] {
        let (a, _) = run(&base, &x, mode);
        let (b, trace) = run(&gated, &x, mode);
        assert!(trace.psi.iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn disabled_bottleneck_passes_features_through() {
    let model = Model::new(ModelConfig::desk(32, 32, 1).with_flags(true, false)).unwrap();
    let (_, trace) = run(&model, &image(1, 32, 32, 5), Mode::Eval);
    assert_eq!(trace.bottleneck_in, trace.bottleneck_out);
    let with = Model::new(ModelConfig::desk(32, 32, 1)).unwrap();
    let (_, trace) = run(&with, &image(1, 32, 32, 5), Mode::Eval);
    assert_ne!(trace.bottleneck_in, trace.bottleneck_out);
}

#[test]
fn variants_share_common_weights() {
    let a = Model::new(ModelConfig::desk(32, 32, 1).with_flags(false, false)).unwrap();
    let b = Model::new(ModelConfig::desk(32, 32, 1).with_flags(true, true)).unwrap();
    let by_name: std::collections::HashMap<_, _> = b
        .params()
        .into_iter()
        .map(|p| (p.name().to_string(), p))
        .collect();
    for p in a.params() {
        assert_eq!(by_name[p.name()].value, p.value, "{}", p.name());
    }
}

#[test]
fn repeated_forwards_are_bit_identical() {
    let model = Model::new(ModelConfig::desk(32, 32, 1)).unwrap();
    let x = image(2, 32, 32, 6);
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(run(&model, &x, mode).0, run(&model, &x, mode).0);
    }
}

#[test]
fn input_gradient_spot_checks() {
    let model = Model::new(ModelConfig::desk(16, 16, 1)).unwrap();
    // batch 2 keeps the 1×1 bottleneck statistics non-degenerate
    let x = image(2, 16, 16, 7);
    let mix = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng(8));
    let loss = |tape: &Tape, x: &Var| -> f64 {
        let mut ctx = Ctx::new(tape, Mode::Train);
        let y = model.forward(&mut ctx, x).unwrap();
        y.mul(&tape.constant(&mix)).unwrap().sum().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf_grad(&x);
    let mut ctx = Ctx::new(&tape, Mode::Train);
    let y = model.forward(&mut ctx, &xv).unwrap();
    let l = y.mul(&tape.constant(&mix)).unwrap().sum();
    let grads = tape.backward(&l).unwrap();
    let g = grads.get(&xv).unwrap();
    let h = 1e-5;
    for idx in [0, 100, 511, 900, 1535] {
        let mut plus = x.clone();
        plus.data_mut()[idx] += h;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= h;
        let t = Tape::no_grad();
        let fd = (loss(&t, &t.constant(&plus)) - loss(&t, &t.constant(&minus))) / (2.0 * h);
        let a = g.data()[idx];
        assert!(
            (a - fd).abs() / a.abs().max(1.0) < 1e-3,
            "{idx}: {a} vs {fd}"
        );
    }
}

#[test]
fn parameter_gradient_spot_checks() {
    let mut model = Model::new(ModelConfig::desk(16, 16, 1)).unwrap();
    let x = image(2, 16, 16, 11);
    let mix = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng(12));
    let loss = |m: &Model, tape: &Tape| -> Var {
        let mut ctx = Ctx::new(tape, Mode::Train);
        let y = m.forward(&mut ctx, &tape.constant(&x)).unwrap();
        y.mul(&tape.constant(&mix)).unwrap().sum()
    };
    let tape = Tape::new();
    tape.backward(&loss(&model, &tape)).unwrap();
    model.collect_grads(&tape);
    let picks = [
        "encoder.stem.conv.weight",
        "bottleneck.key_proj",
        "bottleneck.output.weight",
        "decoder.2.psi.weight",
        "decoder.0.block.bn2.gamma",
        "head.bias",
    ];
    let h = 1e-5;
    for name in picks {
        let (analytic, n) = {
            let p = model
                .params()
                .into_iter()
                .find(|p| p.name() == name)
                .unwrap_or_else(|| panic!("{name}"));
            (p.value.grad().unwrap().to_vec(), p.numel())
        };
        for idx in [0, n / 2, n - 1] {
            let mut eval_at = |delta: f64| {
                model.visit_mut(&mut |p| {
                    if p.name() == name {
                        p.value.data_mut()[idx] += delta;
                    }
                });
                loss(&model, &Tape::no_grad()).item()
            };
            let fp = eval_at(h);
            let fm = eval_at(-2.0 * h);
            eval_at(h);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (a - fd).abs() / a.abs().max(1.0) < 1e-3,
                "{name}[{idx}]: {a} vs {fd}"
            );
        }
    }
}

#[test]
fn binary_threshold_is_strict() {
    let logits = Tensor::new(&[1, 1, 1, 3], vec![0.0, 1e-12, -1e-12]).unwrap();
    assert_eq!(predict_mask(&logits).unwrap()[0].labels, vec![0, 1, 0]);
}

#[test]
fn argmax_picks_largest_and_lowest_on_ties() {
    let logits = Tensor::new(&[1, 3, 1, 2], vec![2.0, 1.0, 5.0, 1.0, 1.0, 0.5]).unwrap();
    assert_eq!(predict_mask(&logits).unwrap()[0].labels, vec![1, 0]);
}

#[test]
fn predict_mask_matches_loop_oracle() {
    for (k, seed) in [(1, 9), (2, 10), (4, 11)] {
        let logits = Tensor::randn(&[3, k, 5, 7], 1.0, &mut rng(seed));
        let masks = predict_mask(&logits).unwrap();
        for (b, m) in masks.iter().enumerate() {
            for i in 0..5 {
                for j in 0..7 {
                    let want = if k == 1 {
                        u8::from(1.0 / (1.0 + (-logits.at(&[b, 0, i, j])).exp()) > 0.5)
                    } else {
                        let mut best = 0;
                        for c in 0..k {
                            if logits.at(&[b, c, i, j]) > logits.at(&[b, best, i, j]) {
                                best = c;
                            }
                        }
                        best as u8
                    };
                    assert_eq!(m.at(i, j), want);
                }
            }
        }
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = ModelConfig::full_width(448, 448, 3).with_flags(false, true);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"heigth": 64}"#).is_err());
    let partial: ModelConfig =
        serde_json::from_str(r#"{"classes": 2, "use_cagm": false}"#).unwrap();
    assert_eq!(partial.classes, 2);
    assert_eq!(partial.height, 64);
}
