//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p svhdr-pipeline --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use svhdr_core::fusion::{fuse_ml, fuse_uniform};
use svhdr_core::image::{HdrImage, RadianceImage};
use svhdr_core::metrics::{log_lux_levels, psnr, spearman, CURVE_LUX_MAX, CURVE_LUX_MIN};
use svhdr_core::network::{Architecture, NetworkConfig, ENCODER_PREFIX};
use svhdr_core::numerics::{conv2d, deform_conv2d, pixel_shuffle, window_merge, window_partition, ShuffleDirection, Tensor};
use svhdr_core::rng::seeded;
use svhdr_core::scene::synthetic_scene;
use svhdr_core::sensor::{
    ground_truth, photons_to_lux, poisson_draws, simulate_bracket, simulate_exposure, BracketConfig, SensorParams, ShotNoise,
};
use svhdr_core::transforms::{loss, tonemap_value, LossReduction, TonemapParams};
use svhdr_pipeline::config::{resolve, Preset, RunConfig};
use svhdr_pipeline::fuse::FusionMethod;
use svhdr_pipeline::image_io::{read_pfm, read_png_raster, read_rgbe, write_pfm, write_png_raster, PngRaster};
use svhdr_pipeline::{eval, gradsuite, train};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    check(t < budget, format!("{detail}; {:.1?} (budget {:?})", t, budget))
}

fn c1_sensor_statistics() -> Outcome {
    let start = Instant::now();
    let n = 1_000_000;
    let mut notes = Vec::new();
    let mut ok = true;
    for (i, lambda) in [1.0, 8.0, 50.0, 500.0].into_iter().enumerate() {
        let draws = poisson_draws(lambda, n, 1000 + i as u64);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard errors of the sample mean and variance for Poisson(λ):
        // fourth central moment λ + 3λ².
        let se_mean = (lambda / n as f64).sqrt();
        let se_var = ((lambda + 2.0 * lambda * lambda) / n as f64).sqrt();
        let (zm, zv) = ((mean - lambda) / se_mean, (var - lambda) / se_var);
        ok &= zm.abs() < 3.0 && zv.abs() < 3.0;
        notes.push(format!("λ={lambda}: z_mean={zm:+.2} z_var={zv:+.2}"));
    }
    if !ok {
        return Err(notes.join(", "));
    }
    within_budget(start, Duration::from_secs(10), notes.join(", "))
}

fn c2_sensor_limits() -> Outcome {
    let p = SensorParams::default();
    let full_well = p.quantize(1e9) == 5000.0 && p.dn_saturation() == 5000.0;
    let high_gain = SensorParams { gain_alpha: 10.0, ..SensorParams::default() };
    let adc = p.adc_max() == 16383.0 && high_gain.quantize(1e9) == 16383.0 && high_gain.quantize(1000.0) == 10000.0;
    let bright = RadianceImage::new(Tensor::full(&[4, 4, 3], 1e9)).map_err(|e| e.to_string())?;
    let out = simulate_exposure(&bright, &p, 3).map_err(|e| e.to_string())?;
    let saturated = out.pixels().data().iter().all(|&v| v == 1.0);
    check(
        full_well && adc && saturated,
        format!("full well clip {full_well}, 14-bit ceiling {adc}, saturated output exactly 1.0 {saturated}"),
    )
}

fn c3_photon_lux() -> Outcome {
    let a = photons_to_lux(256.0).map_err(|e| e.to_string())?;
    let b = photons_to_lux(4.0).map_err(|e| e.to_string())?;
    check(a == 0.323 && (0.0050..=0.0051).contains(&b), format!("256 photons -> {a} lux, 4 photons -> {b} lux"))
}

fn c4_tonemap_anchors() -> Outcome {
    let mu = TonemapParams::default().mu;
    let (t0, t1, tq) = (tonemap_value(0.0, mu), tonemap_value(1.0, mu), tonemap_value(1.0 / 5000.0, mu));
    check(
        mu == 5000.0 && t0 == 0.0 && t1 == 1.0 && (tq - 0.08138).abs() <= 1e-4,
        format!("mu={mu}: T(0)={t0}, T(1)={t1}, T(1/5000)={tq:.6}"),
    )
}

fn c5_permutation_inverses() -> Outcome {
    let mut rng = seeded(5);
    for case in 0..100 {
        let r = rng.random_range(1..4usize);
        let window = rng.random_range(1..5usize);
        let shift = rng.random_range(0..window);
        let h = window * r * rng.random_range(1..4usize);
        let w = window * r * rng.random_range(1..4usize);
        let c = rng.random_range(1..5usize);
        let x = Tensor::<f32>::from_fn(&[h, w, c], |_| rng.random_range(-1e3..1e3));
        let down = pixel_shuffle(&x, r, ShuffleDirection::Down).map_err(|e| e.to_string())?;
        let up = pixel_shuffle(&down, r, ShuffleDirection::Up).map_err(|e| e.to_string())?;
        let (win, layout) = window_partition(&x, window, shift).map_err(|e| e.to_string())?;
        let merged = window_merge(&win, &layout).map_err(|e| e.to_string())?;
        let exact = |a: &Tensor<f32>| a.shape() == x.shape() && a.data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !exact(&up) || !exact(&merged) {
            return Err(format!("case {case}: {h}x{w}x{c}, r={r}, window={window}, shift={shift}"));
        }
    }
    Ok("100 random shapes, shuffle/unshuffle and shifted partition/merge bit-exact".into())
}

fn c6_deformable_degeneracy() -> Outcome {
    let mut rng = seeded(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(3..10usize), rng.random_range(3..10usize));
        let (cin, cout) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
        let x = Tensor::<f32>::from_fn(&[h, w, cin], |_| rng.random_range(-1.0..1.0));
        let wt = Tensor::<f32>::from_fn(&[cout, cin, 3, 3], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(&[cout], |_| rng.random_range(-1.0..1.0));
        let zero = Tensor::<f32>::full(&[h, w, 18], 0.0);
        let d = deform_conv2d(&x, &zero, &wt, &b).map_err(|e| e.to_string())?;
        let c = conv2d(&x, &wt, &b, 1, 1).map_err(|e| e.to_string())?;
        if d.shape() != c.shape() {
            return Err(format!("shape {:?} vs {:?}", d.shape(), c.shape()));
        }
        for (p, q) in d.data().iter().zip(c.data()) {
            worst = worst.max((p - q).abs() as f64);
        }
    }
    check(worst <= 1e-5, format!("50 random cases, max |deform - conv| = {worst:.2e}"))
}

fn c7_gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = gradsuite::run_suite(0).map_err(|e| e.to_string())?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error)).collect();
    let worst = |tier: gradsuite::Tier| {
        rows.iter().filter(|r| r.tier == tier).map(|r| r.max_rel_error).fold(0.0f64, f64::max)
    };
    let detail = format!(
        "{} checks; worst primitive {:.1e} (<1e-6), block {:.1e} (<1e-4), network {:.1e} (<1e-3)",
        rows.len(),
        worst(gradsuite::Tier::Primitive),
        worst(gradsuite::Tier::Block),
        worst(gradsuite::Tier::Network)
    );
    if !failed.is_empty() {
        return Err(format!("{detail}; failed: {}", failed.join(", ")));
    }
    within_budget(start, Duration::from_secs(300), detail)
}

fn encoder_count(n: usize) -> Result<usize, String> {
    let cfg = NetworkConfig { num_exposures: n, ..NetworkConfig::default() };
    let arch = Architecture::new(&cfg).map_err(|e| e.to_string())?;
    Ok(arch.specs.iter().filter(|s| s.name.starts_with(ENCODER_PREFIX)).map(|s| s.shape.iter().product::<usize>()).sum())
}

fn c8_architecture() -> Outcome {
    let cfg = NetworkConfig::default();
    let layout = cfg.blocks_per_level == [4, 6, 6, 8]
        && cfg.heads_per_level == [1, 2, 4, 8]
        && cfg.base_channels == 48
        && cfg.refinement_blocks == 4;
    let widths: Vec<usize> = (0..cfg.levels).map(|l| cfg.channels(l)).collect();
    let counts = [1, 2, 3, 5].map(encoder_count);
    let counts: Vec<usize> = counts.into_iter().collect::<Result<_, _>>()?;
    let shared = counts.windows(2).all(|w| w[0] == w[1]);
    check(
        layout && widths == [48, 96, 192, 384] && shared,
        format!("blocks/heads/C/refine ok={layout}, widths {widths:?}, encoder params for n=1,2,3,5: {counts:?}"),
    )
}

fn c9_training_smoke() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig { out: tmp.path().join("run"), ..RunConfig::preset(Preset::Overfit) };
    cfg.train.checkpoint_every = 1000;
    cfg.train.log_every = 100;
    let adam = cfg.train.adam();
    let recipe = cfg.train.steps == 2000
        && cfg.train.sample_size == 64
        && cfg.network == NetworkConfig::tiny()
        && (adam.lr, adam.beta1, adam.beta2) == (1e-4, 0.9, 0.999);
    let full = train::cmd_train(&cfg).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();

    // Rerun the second half from the mid-run checkpoint.
    let mut again = cfg.clone();
    again.out = tmp.path().join("rerun");
    again.checkpoint = Some(cfg.out.join("checkpoint-001000.ckpt"));
    let rerun = train::cmd_train(&again).map_err(|e| e.to_string())?;
    let deterministic = rerun.losses == full.losses[1000..] && rerun.params == full.params;
    let detail = format!(
        "recipe ok={recipe}; tonemapped MSE {:.3e} after {} steps (<1e-3) in {:.1?} (budget 30 min); rerun from step 1000 bit-identical={deterministic}",
        full.final_mse, full.steps, train_time
    );
    check(recipe && full.final_mse < 1e-3 && deterministic && train_time < Duration::from_secs(1800), detail)
}

fn c10_baseline_oracle() -> Outcome {
    let clean_sensor = SensorParams { shot_noise: ShotNoise::Mean, ..SensorParams::default() };
    let clean = BracketConfig { read_sigmas: vec![0.0; 3], peak_photons: 500.0, ..BracketConfig::default() };
    let mut worst = f64::INFINITY;
    for seed in 0..3 {
        let flux = synthetic_scene(64, 64, seed).map_err(|e| e.to_string())?;
        let b = simulate_bracket(&flux, &clean, &clean_sensor, seed).map_err(|e| e.to_string())?;
        let gt = ground_truth(&flux).map_err(|e| e.to_string())?;
        let fused = fuse_ml(&b, &clean, &clean_sensor).map_err(|e| e.to_string())?;
        worst = worst.min(psnr(&fused, &gt, 1.0).map_err(|e| e.to_string())?);
    }
    let sensor = SensorParams::default();
    let noisy = BracketConfig { peak_photons: 64.0, ..BracketConfig::default() };
    let mse = |a: &HdrImage, b: &HdrImage| loss(a, b, &TonemapParams::default(), LossReduction::Mean);
    let (mut ml, mut uni) = (0.0, 0.0);
    for seed in 0..20u64 {
        let flux = synthetic_scene(48, 48, 100 + seed).map_err(|e| e.to_string())?;
        let gt = ground_truth(&flux).map_err(|e| e.to_string())?;
        let b = simulate_bracket(&flux, &noisy, &sensor, seed).map_err(|e| e.to_string())?;
        ml += mse(&fuse_ml(&b, &noisy, &sensor).map_err(|e| e.to_string())?, &gt).map_err(|e| e.to_string())? / 20.0;
        uni += mse(&fuse_uniform(&b, &noisy, &sensor).map_err(|e| e.to_string())?, &gt).map_err(|e| e.to_string())? / 20.0;
    }
    check(
        worst > 40.0 && ml < uni,
        format!("noiseless min PSNR {worst:.2} dB (>40); 64 photons, 20 seeds: tonemapped MSE inverse-variance {ml:.4e} < uniform {uni:.4e}"),
    )
}

fn c11_curve_behaviour() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig { out: tmp.path().to_path_buf(), ..RunConfig::preset(Preset::Desk) };
    cfg.curve_points = 10;
    cfg.repeats = 10;
    cfg.synthetic_sources = 1;
    cfg.crop = 64;
    let set = eval::test_set(&cfg).map_err(|e| e.to_string())?;
    let rows = eval::curve(&cfg, &FusionMethod::Baseline, &set).map_err(|e| e.to_string())?;
    let lux: Vec<f64> = rows.iter().map(|r| r.lux).collect();
    let mu: Vec<f64> = rows.iter().map(|r| r.psnr_mu).collect();
    let rho = spearman(&lux, &mu).map_err(|e| e.to_string())?;
    let range = lux == log_lux_levels(CURVE_LUX_MIN, CURVE_LUX_MAX, 10);
    check(
        rho > 0.9 && range && rows.len() == 10,
        format!(
            "Spearman rho {rho:.3} (>0.9) over 10 levels {:.3}..{:.3} lux x 10 seeds; PSNR-mu {:.2}..{:.2} dB",
            lux[0],
            lux[9],
            mu[0],
            mu[9]
        ),
    )
}

fn c12_full_scale_substitution() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = resolve(None, Vec::new(), &[("train.preset".into(), "paper".into())]).map_err(|e| e.to_string())?;
    let echo = cfg.write_resolved(tmp.path()).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(echo).map_err(|e| e.to_string())?;
    let has = |l: &str| text.lines().any(|x| x == l);
    let budget = has("train.steps_per_epoch = 1184") && has("train.epochs = 300") && has("train.steps = 355200") && has("train.batch_size = 3");
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let documented = std::fs::read_to_string(readme).map(|r| r.contains("not reproducible at desk scale")).unwrap_or(false);
    check(
        budget && documented,
        format!("full-scale absolute numbers substituted by criteria 7-11; paper preset echoes 1184 x 300 = 355200 steps, batch 3: {budget}; README documents the substitution: {documented}"),
    )
}

fn c13_io_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = seeded(13);
    let img = Tensor::<f32>::from_fn(&[17, 23, 3], |_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff) * if rng.random() { 1.0 } else { -1.0 });
    let p = tmp.path().join("x.pfm");
    write_pfm(&p, &img).map_err(|e| e.to_string())?;
    let back = read_pfm(&p).map_err(|e| e.to_string())?;
    let pfm = back.shape() == img.shape() && back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let raster = PngRaster { width: 19, height: 11, bits: 16, samples: (0..19 * 11 * 3).map(|_| rng.random()).collect() };
    let q = tmp.path().join("x.png");
    write_png_raster(&q, &raster).map_err(|e| e.to_string())?;
    let png = read_png_raster(&q).map_err(|e| e.to_string())? == raster;

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let ours = read_rgbe(&fixtures.join("reference.hdr")).map_err(|e| e.to_string())?;
    let raw = std::fs::read(fixtures.join("reference_rgb.f32")).map_err(|e| e.to_string())?;
    let theirs: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut worst = 0.0f64;
    for (a, b) in ours.data().chunks_exact(3).zip(theirs.chunks_exact(3)) {
        let peak = b.iter().cloned().fold(0.0f32, f32::max) as f64;
        for (x, y) in a.iter().zip(b) {
            worst = worst.max(if peak > 0.0 { (*x as f64 - *y as f64).abs() / peak } else { *x as f64 });
        }
    }
    let rgbe = ours.data().len() == theirs.len() && worst < 0.005;
    check(
        pfm && png && rgbe,
        format!("PFM bit-exact {pfm}; 16-bit PNG exact {png}; RGBE vs OpenCV-decoded reference max rel diff {:.3}% (<0.5%)", worst * 100.0),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("sensor statistics", c1_sensor_statistics),
        ("sensor limits", c2_sensor_limits),
        ("photon-lux mapping", c3_photon_lux),
        ("tonemap anchors", c4_tonemap_anchors),
        ("permutation inverses", c5_permutation_inverses),
        ("deformable degeneracy", c6_deformable_degeneracy),
        ("gradient suite", c7_gradient_suite),
        ("architecture conformance", c8_architecture),
        ("training smoke", c9_training_smoke),
        ("baseline oracle", c10_baseline_oracle),
        ("curve behaviour", c11_curve_behaviour),
        ("full-scale numbers (substituted)", c12_full_scale_substitution),
        ("I/O round trips", c13_io_round_trips),
    ];
    let only: Option<usize> = std::env::var("SVHDR_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {id:>2} {name}: {detail} [{:.1?}]", start.elapsed());
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
