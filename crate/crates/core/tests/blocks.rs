mod common;

use common::{composite_fd_error, random, zero_params, Registry};
use proptest::prelude::*;
use qmix_core::blocks::{dsc_stage_params, mix_stage_params, BlockKind, Cbam, ConvBlock, DscStage, MixStage};
use qmix_core::{Error, Graph, Mode};
use qmix_tensor::{Shape, Tensor};

/// Biases feeding batch norm have an exactly zero gradient, so their
/// difference quotient is pure roundoff; a wider step keeps that below the
/// relative-error floor while truncation error stays near 1e-8.
const H_COMPOSITE: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn dsc_stage_count_matches_hand_enumeration() {
    assert_eq!(dsc_stage_params(4, 8, 1), 96);
    let mut reg = Registry::new(0);
    DscStage::new(&mut reg.builder(), "s", 4, 8, 1).unwrap();
    assert_eq!(reg.params.numel(), 96);
}

#[test]
fn mix_stage_count_matches_hand_enumeration() {
    // depthwise 3×3 on 2 channels, depthwise 5×5 on 2, pointwise 4→4, BN on 4
    let enumerated = (2 * 9 + 2) + (2 * 25 + 2) + (4 * 4 + 4) + 2 * 4;
    assert_eq!(enumerated, 100);
    assert_eq!(mix_stage_params(4, 4), enumerated);
    let mut reg = Registry::new(0);
    MixStage::new(&mut reg.builder(), "s", 4, 4).unwrap();
    assert_eq!(reg.params.numel(), enumerated);
}

#[test]
fn block_counts_equal_sum_of_stage_formulas() {
    for (cin, mid, cout) in [(12, 16, 16), (32, 64, 32), (64, 128, 128)] {
        let mut reg = Registry::new(1);
        ConvBlock::new(&mut reg.builder(), "b", BlockKind::Dsc, cin, mid, cout, 2).unwrap();
        assert_eq!(reg.params.numel(), dsc_stage_params(cin, mid, 2) + dsc_stage_params(mid, cout, 2));
        let mut reg = Registry::new(1);
        ConvBlock::new(&mut reg.builder(), "b", BlockKind::Mix, cin, mid, cout, 2).unwrap();
        assert_eq!(reg.params.numel(), mix_stage_params(cin, mid) + mix_stage_params(mid, cout));
    }
}

#[test]
fn mix_block_is_smaller_than_dsc_block_from_32_channels() {
    for c in [32, 48, 64, 128, 256, 512] {
        let mut dsc = Registry::new(0);
        ConvBlock::new(&mut dsc.builder(), "b", BlockKind::Dsc, c, c, c, 2).unwrap();
        let mut mix = Registry::new(0);
        ConvBlock::new(&mut mix.builder(), "b", BlockKind::Mix, c, c, c, 2).unwrap();
        assert!(mix.params.numel() < dsc.params.numel(), "C={c}");
    }
}

#[test]
fn dsc_block_maps_64_to_128_channels_at_same_resolution() {
    let mut reg = Registry::new(2);
    let block = ConvBlock::new(&mut reg.builder(), "b", BlockKind::Dsc, 64, 128, 128, 2).unwrap();
    let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Eval);
    let x = g.tape.variable(random(Shape::new(1, 64, 32, 32), 3));
    let y = block.forward(&mut g, x).unwrap();
    assert_eq!(g.tape.shape(y), Shape::new(1, 128, 32, 32));
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    for kind in [BlockKind::Dsc, BlockKind::Mix] {
        let mut reg = Registry::new(0);
        let block = ConvBlock::new(&mut reg.builder(), "b", kind, 4, 4, 4, 2).unwrap();
        let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Train);
        let x = g.tape.variable(random(Shape::new(1, 6, 5, 5), 0));
        assert!(matches!(block.forward(&mut g, x), Err(Error::Shape(_))), "{kind:?}");
    }
}

#[test]
fn odd_mix_channels_are_a_config_error() {
    let mut reg = Registry::new(0);
    let err = ConvBlock::new(&mut reg.builder(), "b", BlockKind::Mix, 5, 4, 4, 2).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let mut reg = Registry::new(0);
    let err = ConvBlock::new(&mut reg.builder(), "b", BlockKind::Mix, 4, 7, 4, 2).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn zero_parameters_give_zero_output() {
    for kind in [BlockKind::Dsc, BlockKind::Mix] {
        for mode in [Mode::Train, Mode::Eval] {
            let mut reg = Registry::new(4);
            let block = ConvBlock::new(&mut reg.builder(), "b", kind, 4, 6, 8, 2).unwrap();
            zero_params(&mut reg.params);
            let mut g = Graph::new(&reg.params, &reg.buffers, mode);
            let x = g.tape.variable(random(Shape::new(2, 4, 7, 5), 5));
            let y = block.forward(&mut g, x).unwrap();
            assert_eq!(g.tape.shape(y), Shape::new(2, 8, 7, 5));
            assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0), "{kind:?} {mode:?}");
        }
    }
}

/// Plain same-padded depthwise 3×3 with bias, written independently of the
/// engine.
fn depthwise3(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, channels: usize) -> Tensor<f64> {
    let [b, _, h, wd] = x.shape().0;
    Tensor::from_fn(Shape::new(b, channels, h, wd), |[ib, c, i, j]| {
        let mut acc = bias.data()[c];
        for di in 0..3 {
            for dj in 0..3 {
                let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                    acc += w.at([c, 0, di, dj]) * x.at([ib, c, si as usize, sj as usize]);
                }
            }
        }
        acc
    })
}

#[test]
fn mix_group_one_matches_plain_depthwise_on_lower_half() {
    let c = 6;
    let half = c / 2;
    let mut reg = Registry::new(7);
    let stage = MixStage::new(&mut reg.builder(), "m", c, c).unwrap();
    for id in [stage.dw5.weight, stage.dw5.bias.unwrap(), stage.pointwise.bias.unwrap()] {
        reg.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let pw = &mut reg.params.get_mut(stage.pointwise.weight).value;
    for o in 0..c {
        for i in 0..c {
            pw.data_mut()[o * c + i] = if o == i { 1.0 } else { 0.0 };
        }
    }

    let x = random(Shape::new(2, c, 6, 5), 8);
    let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Eval);
    let xv = g.tape.variable(x.clone());
    let y = stage.forward(&mut g, xv).unwrap();
    let y = g.tape.value(y);

    let expect = depthwise3(&x, reg.params.value(stage.dw3.weight), reg.params.value(stage.dw3.bias.unwrap()), half);
    // eval-mode BN with fresh running stats divides by sqrt(1 + eps)
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for ib in 0..2 {
        for ch in 0..c {
            for i in 0..6 {
                for j in 0..5 {
                    let got = y.at([ib, ch, i, j]);
                    let want = if ch < half { (expect.at([ib, ch, i, j]) * scale).max(0.0) } else { 0.0 };
                    assert!((got - want).abs() < 1e-12, "({ib},{ch},{i},{j}): {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn cbam_with_zero_attention_parameters_quarters_the_input() {
    let mut reg = Registry::new(9);
    let cbam = Cbam::new(&mut reg.builder(), "c", 8, 4).unwrap();
    zero_params(&mut reg.params);
    let x = random(Shape::new(2, 8, 5, 6), 10);
    let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Eval);
    let xv = g.tape.variable(x.clone());
    let t = cbam.trace(&mut g, xv).unwrap();
    assert!(g.tape.value(t.channel_gate).data().iter().all(|&v| v == 0.5));
    assert!(g.tape.value(t.spatial_gate).data().iter().all(|&v| v == 0.5));
    for (o, v) in g.tape.value(t.output).data().iter().zip(x.data()) {
        assert_eq!(*o, v / 4.0);
    }
}

#[test]
fn cbam_indivisible_channels_are_a_config_error() {
    let mut reg = Registry::new(0);
    assert!(matches!(Cbam::new(&mut reg.builder(), "c", 12, 8), Err(Error::Config(_))));
    assert!(matches!(Cbam::new(&mut reg.builder(), "c", 12, 0), Err(Error::Config(_))));
}

#[test]
fn cbam_gates_match_independent_pooling_oracle() {
    let (b, c, h, w, r) = (2, 8, 6, 5, 2);
    let mut reg = Registry::new(11);
    let cbam = Cbam::new(&mut reg.builder(), "c", c, r).unwrap();
    // non-zero biases so they are exercised
    for id in [cbam.fc1.bias.unwrap(), cbam.fc2.bias.unwrap(), cbam.spatial.bias.unwrap()] {
        let n = reg.params.value(id).numel();
        reg.params.get_mut(id).value = random(reg.params.value(id).shape(), 12 + n as u64);
    }
    let x = random(Shape::new(b, c, h, w), 13);
    let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Eval);
    let xv = g.tape.variable(x.clone());
    let t = cbam.trace(&mut g, xv).unwrap();

    let p = |id| reg.params.value(id).data().to_vec();
    let (w1, b1, w2, b2) = (p(cbam.fc1.weight), p(cbam.fc1.bias.unwrap()), p(cbam.fc2.weight), p(cbam.fc2.bias.unwrap()));
    let hidden = c / r;
    let mlp = |d: &[f64]| -> Vec<f64> {
        let hid: Vec<f64> =
            (0..hidden).map(|k| (b1[k] + (0..c).map(|i| w1[k * c + i] * d[i]).sum::<f64>()).max(0.0)).collect();
        (0..c).map(|o| b2[o] + (0..hidden).map(|k| w2[o * hidden + k] * hid[k]).sum::<f64>()).collect()
    };
    let (ws, bs) = (p(cbam.spatial.weight), p(cbam.spatial.bias.unwrap())[0]);

    for ib in 0..b {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x.at([ib, ch, i, j]);
                    avg[ch] += v / (h * w) as f64;
                    max[ch] = max[ch].max(v);
                }
            }
        }
        let (ma, mm) = (mlp(&avg), mlp(&max));
        let gate: Vec<f64> = (0..c).map(|ch| sigmoid(ma[ch] + mm[ch])).collect();
        for ch in 0..c {
            let got = g.tape.value(t.channel_gate).at([ib, ch, 0, 0]);
            assert!((got - gate[ch]).abs() < 1e-6);
            assert!(got > 0.0 && got < 1.0);
        }

        let y = |ch: usize, i: usize, j: usize| x.at([ib, ch, i, j]) * gate[ch];
        let mean_map = |i, j| (0..c).map(|ch| y(ch, i, j)).sum::<f64>() / c as f64;
        let max_map = |i, j| (0..c).map(|ch| y(ch, i, j)).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..h {
            for j in 0..w {
                let mut acc = bs;
                for di in 0..7 {
                    for dj in 0..7 {
                        let (si, sj) = (i as isize + di as isize - 3, j as isize + dj as isize - 3);
                        if si < 0 || sj < 0 || si as usize >= h || sj as usize >= w {
                            continue;
                        }
                        let (si, sj) = (si as usize, sj as usize);
                        acc += ws[di * 7 + dj] * mean_map(si, sj) + ws[49 + di * 7 + dj] * max_map(si, sj);
                    }
                }
                let want = sigmoid(acc);
                let got = g.tape.value(t.spatial_gate).at([ib, 0, i, j]);
                assert!((got - want).abs() < 1e-6, "spatial ({ib},{i},{j}): {got} vs {want}");
                for ch in 0..c {
                    let out = g.tape.value(t.output).at([ib, ch, i, j]);
                    assert!((out - y(ch, i, j) * want).abs() < 1e-6);
                    assert!(out.abs() <= x.at([ib, ch, i, j]).abs());
                }
            }
        }
    }
}

#[test]
fn double_dsc_passes_composite_gradient_check() {
    let mut reg = Registry::new(20);
    let block = ConvBlock::new(&mut reg.builder(), "b", BlockKind::Dsc, 2, 4, 3, 2).unwrap();
    let x = random(Shape::new(2, 2, 5, 4), 21);
    let err = composite_fd_error(&reg, &x, H_COMPOSITE, |g, x| block.forward(g, x));
    assert!(err < FD_TOL, "max rel err {err:.3e}");
}

#[test]
fn double_mixconv_passes_composite_gradient_check() {
    let mut reg = Registry::new(22);
    let block = ConvBlock::new(&mut reg.builder(), "b", BlockKind::Mix, 4, 6, 4, 2).unwrap();
    let x = random(Shape::new(2, 4, 6, 5), 23);
    let err = composite_fd_error(&reg, &x, H_COMPOSITE, |g, x| block.forward(g, x));
    assert!(err < FD_TOL, "max rel err {err:.3e}");
}

#[test]
fn cbam_passes_composite_gradient_check() {
    let mut reg = Registry::new(24);
    let cbam = Cbam::new(&mut reg.builder(), "c", 4, 2).unwrap();
    let x = random(Shape::new(2, 4, 5, 5), 25);
    let err = composite_fd_error(&reg, &x, H_COMPOSITE, |g, x| cbam.forward(g, x));
    assert!(err < FD_TOL, "max rel err {err:.3e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_spatial_dims(
        half_in in 1usize..4, half_out in 1usize..4, h in 1usize..9, w in 1usize..9,
        mix in any::<bool>(), seed in 0u64..1000,
    ) {
        let (cin, cout) = (2 * half_in, 2 * half_out);
        let kind = if mix { BlockKind::Mix } else { BlockKind::Dsc };
        let mut reg = Registry::new(seed);
        let block = ConvBlock::new(&mut reg.builder(), "b", kind, cin, cout, cout, 2).unwrap();
        let cbam = Cbam::new(&mut reg.builder(), "c", cout, half_out).unwrap();
        let mut g = Graph::new(&reg.params, &reg.buffers, Mode::Train);
        let x = g.tape.variable(random(Shape::new(2, cin, h, w), seed));
        let y = block.forward(&mut g, x).unwrap();
        prop_assert_eq!(g.tape.shape(y), Shape::new(2, cout, h, w));
        let t = cbam.trace(&mut g, y).unwrap();
        prop_assert_eq!(g.tape.shape(t.output), Shape::new(2, cout, h, w));
        for gate in [t.channel_gate, t.spatial_gate] {
            prop_assert!(g.tape.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
