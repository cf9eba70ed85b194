use proptest::prelude::*;
use svhdr_core::image::{HdrImage, LdrImage};
use svhdr_core::numerics::*;
use svhdr_core::sensor::Bracket;
use svhdr_core::transforms::*;

const MU: f64 = 5000.0;

#[test]
fn tonemap_anchors() {
    assert_eq!(tonemap_value(0.0, MU), 0.0);
    assert!((tonemap_value(1.0, MU) - 1.0).abs() < 1e-15);
    assert!((tonemap_value(1.0 / 5000.0, MU) - 0.08138).abs() < 1e-4);
    // log(2) / log(5001)
    assert!((tonemap_value(1.0 / 5000.0, MU) - 2f64.ln() / 5001f64.ln()).abs() < 1e-15);
}

#[test]
fn tonemap_rejects_negative_radiance() {
    let h = HdrImage::new(Tensor::full(&[2, 2, 3], 0.5)).unwrap();
    assert!(tonemap(&h, &TonemapParams::default()).is_ok());
    assert!(tonemap(&h, &TonemapParams { mu: -1.0 }).is_err());
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[3], -0.1));
    assert!(g.tonemap(x, MU).is_err());
}

#[test]
fn exposure_normalization_inverts_gamma_and_exposure() {
    let img = LdrImage::new(Tensor::full(&[1, 1, 3], 0.5)).unwrap();
    let n = exposure_normalize(&img, 8.0, 2.2).unwrap();
    assert!((n.data()[0] as f64 - 0.5f64.powf(2.2) / 8.0).abs() < 1e-7);
    assert!((n.data()[0] - 0.027206).abs() < 2e-6);
    assert!(exposure_normalize(&img, 0.0, 2.2).is_err());
}

#[test]
fn inputs_stack_ldr_and_normalized_channels() {
    let img = LdrImage::new(Tensor::from_fn(&[3, 2, 3], |i| i as f32 / 18.0)).unwrap();
    let b = Bracket { images: vec![img.clone(), img.clone()], exposures: vec![0.5, 4.0], gamma: 2.2 };
    let js = bracket_inputs(&b).unwrap();
    assert_eq!(js.len(), 2);
    for (j, &t) in js.iter().zip(&b.exposures) {
        assert_eq!(j.shape(), &[3, 2, 6]);
        let (ldr, norm) = split_input(j).unwrap();
        assert_eq!(&ldr, img.pixels());
        assert_eq!(norm, exposure_normalize(&img, t, 2.2).unwrap());
    }
    assert!(split_input(&Tensor::zeros(&[2, 2, 3])).is_err());
}

#[test]
fn loss_reductions() {
    let a = HdrImage::new(Tensor::full(&[2, 2, 3], 0.25)).unwrap();
    let b = HdrImage::new(Tensor::full(&[2, 2, 3], 0.5)).unwrap();
    let d = tonemap_value(0.25f32 as f64, MU) - tonemap_value(0.5, MU);
    let p = TonemapParams::default();
    let norm = loss(&a, &b, &p, LossReduction::Norm).unwrap();
    let mean = loss(&a, &b, &p, LossReduction::Mean).unwrap();
    assert!((norm - (12.0 * d * d).sqrt()).abs() < 1e-6);
    assert!((mean - d * d).abs() < 1e-8);
    assert_eq!(loss(&a, &a, &p, LossReduction::Mean).unwrap(), 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let pred = Tensor::from_fn(&[3, 3, 3], |i| 0.01 + (i as f64 * 0.37).sin().abs());
    let target = Tensor::from_fn(&[3, 3, 3], |i| 0.02 + (i as f64 * 0.71).cos().abs());
    for reduction in [LossReduction::Norm, LossReduction::Mean] {
        let r = grad_check("tonemapped_loss", &[pred.clone()], &GradCheckOptions::default(), |g, v| {
            g.tonemapped_loss(v[0], &target, &TonemapParams::default(), reduction)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{reduction:?}: {}", r.max_rel_error);
    }
    let r = grad_check("tonemap", &[pred], &GradCheckOptions::default(), |g, v| g.tonemap(v[0], MU)).unwrap();
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn remaining_primitive_gradients() {
    let x = Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.9).sin());
    let y = Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.4).cos());
    let opts = GradCheckOptions::default();
    let checks: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> svhdr_core::Result<Var>>)> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], 1.7)))),
        ("sum_squares", Box::new(|g, v| Ok(g.sum_squares(v[0])))),
        ("sum_all", Box::new(|g, v| Ok(g.sum_all(v[0])))),
        ("split", Box::new(|g, v| Ok(g.split(v[0], 2)?[1]))),
        ("pixel_shuffle_up", Box::new(|g, v| g.pixel_shuffle(v[0], 2, ShuffleDirection::Up))),
    ];
    for (name, f) in checks {
        let r = grad_check(name, &[x.clone(), y.clone()], &opts, |g, v| f(g, v)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{name}: {}", r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn tonemap_is_monotone_and_invertible(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (ta, tb) = (tonemap_value(a, MU), tonemap_value(b, MU));
        if a < b {
            prop_assert!(ta < tb);
        }
        prop_assert!((inverse_tonemap_value(ta, MU) - a).abs() <= 1e-10 * (1.0 + a));
    }
}
