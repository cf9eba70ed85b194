//! Numerics against independent oracles: nested-loop convolution, direct
//! index formulas, and central finite differences.

use std::rc::Rc;

use proptest::prelude::*;
use rand::Rng;
use svhdr_core::numerics::*;
use svhdr_core::rng::seeded;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (h, wd, cin) = x.hwc().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.at(&[co, ci, ky, kx]) * x.at(&[iy as usize, ix as usize, ci]);
                            }
                        }
                    }
                }
                out.set(&[oy, ox, co], acc);
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    for (seed, stride, pad) in [(1, 1, 1), (2, 2, 1), (3, 1, 0), (4, 2, 2)] {
        let x = random(&[5, 5, 2], seed);
        let w = random(&[3, 2, 3, 3], seed + 10);
        let b = random(&[3], seed + 20);
        let want = conv_oracle(&x, &w, &b, stride, pad);
        let got = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>(), stride, pad).unwrap();
        assert_eq!(got.shape(), want.shape());
        let err = got.cast::<f64>().max_abs_diff(&want);
        assert!(err < 1e-6, "stride {stride} pad {pad}: err {err}");
    }
}

#[test]
fn pixel_unshuffle_matches_index_formula() {
    let x = random(&[8, 6, 3], 5);
    let r = 2;
    let y = pixel_shuffle(&x, r, ShuffleDirection::Down).unwrap();
    assert_eq!(y.shape(), &[4, 3, 12]);
    for oy in 0..4 {
        for ox in 0..3 {
            for c in 0..3 {
                for dy in 0..r {
                    for dx in 0..r {
                        let want = x.at(&[oy * r + dy, ox * r + dx, c]);
                        assert_eq!(y.at(&[oy, ox, c * r * r + dy * r + dx]), want);
                    }
                }
            }
        }
    }
    let up = pixel_shuffle(&y, r, ShuffleDirection::Up).unwrap();
    assert_eq!(up, x);
}

#[test]
fn window_membership_matches_index_oracle() {
    let x = Tensor::<f64>::from_fn(&[16, 16, 1], |i| i as f64);
    let (win, layout) = window_partition(&x, 8, 0).unwrap();
    assert_eq!(win.shape(), &[4, 64, 1]);
    // Corner pixels of the image land in the corner tokens of the corner windows.
    assert_eq!(win.at(&[0, 0, 0]), x.at(&[0, 0, 0]));
    assert_eq!(win.at(&[1, 7, 0]), x.at(&[0, 15, 0]));
    assert_eq!(win.at(&[2, 56, 0]), x.at(&[15, 0, 0]));
    assert_eq!(win.at(&[3, 63, 0]), x.at(&[15, 15, 0]));
    assert_eq!(window_merge(&win, &layout).unwrap(), x);

    // With a cyclic shift of 4, token (0,0) of window 0 is pixel (4,4) and the
    // last token of the last window wraps around to pixel (3,3).
    let (win, layout) = window_partition(&x, 8, 4).unwrap();
    assert_eq!(win.at(&[0, 0, 0]), x.at(&[4, 4, 0]));
    assert_eq!(win.at(&[3, 63, 0]), x.at(&[3, 3, 0]));
    assert_eq!(window_merge(&win, &layout).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pixel_shuffle_round_trips(hb in 1usize..5, wb in 1usize..5, c in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
        let x = random(&[hb * r, wb * r, c], seed).cast::<f32>();
        let down = pixel_shuffle(&x, r, ShuffleDirection::Down).unwrap();
        prop_assert_eq!(pixel_shuffle(&down, r, ShuffleDirection::Up).unwrap(), x);
    }

    #[test]
    fn shifted_windows_round_trip(hb in 1usize..4, wb in 1usize..4, win in 1usize..6, c in 1usize..4, shift_seed in any::<u32>(), seed in any::<u64>()) {
        let shift = shift_seed as usize % win;
        let x = random(&[hb * win, wb * win, c], seed).cast::<f32>();
        let (w, layout) = window_partition(&x, win, shift).unwrap();
        prop_assert_eq!(w.shape(), &[hb * wb, win * win, c]);
        prop_assert_eq!(window_merge(&w, &layout).unwrap(), x);
    }

    #[test]
    fn softmax_is_a_probability_vector(len in 1usize..20, seed in any::<u64>()) {
        let x = random(&[3, len], seed).map(|v| v * 30.0).cast::<f32>();
        for row in softmax(&x).data().chunks_exact(len) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn deformable_conv_with_zero_offsets_is_conv2d() {
    for seed in 0..10 {
        let x = random(&[6, 5, 3], seed).cast::<f32>();
        let w = random(&[4, 3, 3, 3], seed + 100).cast::<f32>();
        let b = random(&[4], seed + 200).cast::<f32>();
        let off = Tensor::zeros(&[6, 5, 18]);
        let d = deform_conv2d(&x, &off, &w, &b).unwrap();
        let c = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert!(d.max_abs_diff(&c) < 1e-5);
    }
}

#[test]
fn integer_offsets_shift_the_sampling_grid() {
    // A uniform (+1, 0) offset samples one row below: away from the top
    // border this equals a standard conv on the image shifted up one row.
    let x = random(&[5, 4, 2], 8);
    let w = random(&[2, 2, 3, 3], 9);
    let b = Tensor::zeros(&[2]);
    let mut off = Tensor::zeros(&[5, 4, 18]);
    for (i, v) in off.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = 1.0;
        }
    }
    let shifted = Tensor::from_fn(&[5, 4, 2], |i| {
        let y = i / 8;
        if y + 1 < 5 {
            x.data()[i + 8]
        } else {
            0.0
        }
    });
    let d = deform_conv2d(&x, &off, &w, &b).unwrap();
    let c = conv2d(&shifted, &w, &b, 1, 1).unwrap();
    for py in 1..5 {
        for px in 0..4 {
            for co in 0..2 {
                assert!((d.at(&[py, px, co]) - c.at(&[py, px, co])).abs() < 1e-12);
            }
        }
    }
}

fn check(name: &str, inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> svhdr_core::Result<Var>) {
    let report = grad_check(name, inputs, &GradCheckOptions::default(), f).unwrap();
    assert!(
        report.max_rel_error < tol,
        "{name}: max rel err {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn grad_linear() {
    check("linear", &[random(&[4, 4], 1), random(&[3, 4], 2), random(&[3], 3)], 1e-6, |g, v| {
        g.linear(v[0], v[1], v[2])
    });
}

#[test]
fn grad_gelu() {
    check("gelu", &[random(&[17], 4).map(|v| v * 3.0)], 1e-6, |g, v| Ok(g.gelu(v[0])));
}

#[test]
fn grad_softmax_and_layer_norm() {
    check("softmax", &[random(&[3, 5], 5)], 1e-6, |g, v| Ok(g.softmax(v[0])));
    check("layer_norm", &[random(&[4, 6], 6), random(&[6], 7), random(&[6], 8)], 1e-6, |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn grad_conv2d_strided_and_padded() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(
            "conv2d",
            &[random(&[5, 4, 2], 9), random(&[3, 2, 3, 3], 10), random(&[3], 11)],
            1e-6,
            |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
        );
    }
}

#[test]
fn grad_deformable_conv_including_offsets() {
    // Fractional offsets keep the bilinear stencil away from its kinks.
    let off = random(&[4, 4, 18], 12).map(|v| 0.37 + 0.3 * v);
    check(
        "deform_conv2d",
        &[random(&[4, 4, 2], 13), off, random(&[3, 2, 3, 3], 14), random(&[3], 15)],
        1e-6,
        |g, v| g.deform_conv2d(v[0], v[1], v[2], v[3]),
    );
}

#[test]
fn grad_window_attention_with_shift_mask() {
    let layout = WindowLayout::new(4, 4, 2, 1).unwrap();
    let labels = Rc::new(layout.region_labels().unwrap());
    let spec = AttentionSpec { heads: 2, window: 2, labels: Some(labels) };
    check("window_attention", &[random(&[4, 4, 12], 16), random(&[9, 2], 17)], 1e-6, |g, v| {
        g.window_attention(v[0], v[1], &spec)
    });
}

#[test]
fn grad_layout_and_reductions() {
    let table = pixel_shuffle_table((4, 4, 2), 2, ShuffleDirection::Down).unwrap();
    check("gather", &[random(&[4, 4, 2], 18)], 1e-6, |g, v| g.gather(v[0], &table));
    let pad = reflect_pad_table((3, 2, 1), 5, 5).unwrap();
    check("reflect_pad", &[random(&[3, 2, 1], 19)], 1e-6, |g, v| g.gather(v[0], &pad));
    check("concat", &[random(&[2, 2, 1], 20), random(&[2, 2, 3], 21)], 1e-6, |g, v| g.concat(&[v[0], v[1]]));
    check("l2_norm", &[random(&[7], 22)], 1e-6, |g, v| Ok(g.l2_norm(v[0])));
    check("sub", &[random(&[5], 23), random(&[5], 24)], 1e-6, |g, v| g.sub(v[0], v[1]));
    check("clamp", &[random(&[9], 25)], 1e-6, |g, v| Ok(g.clamp_min_zero(v[0])));
}

#[test]
fn grad_check_reports_non_finite_probe() {
    let err = grad_check("sqrt-of-negative", &[Tensor::full(&[2], 1.0)], &GradCheckOptions::default(), |g, v| {
        let out = g.value(v[0]).map(|x| (x - 2.0).sqrt());
        Ok(g.constant(out))
    })
    .unwrap_err();
    assert!(err.to_string().contains("sqrt-of-negative"));
}

#[test]
fn ops_are_deterministic() {
    let x = random(&[8, 8, 4], 30).cast::<f32>();
    let w = random(&[4, 4, 3, 3], 31).cast::<f32>();
    let b = random(&[4], 32).cast::<f32>();
    let off = random(&[8, 8, 18], 33).cast::<f32>();
    let a = deform_conv2d(&x, &off, &w, &b).unwrap();
    let c = deform_conv2d(&x, &off, &w, &b).unwrap();
    assert_eq!(a.data(), c.data());
}
