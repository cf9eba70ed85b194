//! Image-quality metrics (PSNR, MS-SSIM and their μ-law tonemapped variants)
//! and the quality-versus-illuminance curve.

use std::fmt::Write as _;

use crate::error::{ensure, Result};
use crate::image::{HdrImage, RadianceImage};
use crate::numerics::Tensor;
use crate::rng::derive_seed;
use crate::sensor::{ground_truth, lux_to_photons, simulate_bracket, Bracket, BracketConfig, SensorParams};
use crate::transforms::{tonemap, TonemapParams};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Illuminance levels of the standard comparison table.
pub const TABLE_LUX: [f64; 4] = [0.4, 0.2, 0.1, 0.05];
pub const CURVE_LUX_MIN: f64 = 0.005;
pub const CURVE_LUX_MAX: f64 = 0.644;
pub const CSV_HEADER: &str = "lux,psnr,psnr_mu,ms_ssim,ms_ssim_mu,n_images,seed";

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    ensure!(a.shape() == b.shape(), "metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape());
    ensure!(!a.is_empty(), "metric inputs are empty");
    Ok(())
}

fn psnr_tensor(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    ensure!(peak > 0.0, "PSNR peak must be positive");
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// `10 log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &HdrImage, b: &HdrImage, peak: f64) -> Result<f64> {
    psnr_tensor(a.pixels(), b.pixels(), peak)
}

/// PSNR of the μ-law tonemapped images with peak 1.
pub fn psnr_mu(a: &HdrImage, b: &HdrImage, tm: &TonemapParams) -> Result<f64> {
    check_pair(a.pixels(), b.pixels())?;
    psnr_tensor(&tonemap(a, tm)?, &tonemap(b, tm)?, 1.0)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of an `h x w` plane.
fn blur(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> (f64, f64) {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu1, _, _) = blur(a, h, w, g);
    let (mu2, _, _) = blur(b, h, w, g);
    let (s11, _, _) = blur(&prod(|x, _| x * x), h, w, g);
    let (s22, _, _) = blur(&prod(|_, y| y * y), h, w, g);
    let (s12, oh, ow) = blur(&prod(|x, y| x * y), h, w, g);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (m1, m2) = (mu1[i], mu2[i]);
        let v1 = s11[i] - m1 * m1;
        let v2 = s22[i] - m2 * m2;
        let v12 = s12[i] - m1 * m2;
        let c = (2.0 * v12 + c2) / (v1 + v2 + c2);
        cs += c;
        ssim += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * c;
    }
    (ssim / n, cs / n)
}

/// 2x2 average pooling; an odd trailing row or column is dropped.
fn downsample(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x0 in 0..ow {
            let i = 2 * y * w + 2 * x0;
            out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
        }
    }
    (out, oh, ow)
}

/// Number of scales used for an image whose short side is `min_side`: the
/// coarsest scale must still hold one full window.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&m| min_side >= SSIM_WINDOW << (m - 1)).unwrap_or(0)
}

fn ms_ssim_tensor(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, c) = a.hwc()?;
    let scales = ms_ssim_scales(h.min(w));
    ensure!(scales > 0, "MS-SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}");
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|v| v / wsum).collect();
    let g = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor<f32>| t.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect::<Vec<_>>();
        let (mut x, mut y, mut hh, mut ww) = (plane(a), plane(b), h, w);
        let mut score = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&x, &y, hh, ww, &g);
            let term = if s + 1 == scales { ssim } else { cs };
            score *= term.max(0.0).powf(wt);
            if s + 1 < scales {
                let (nx, nh, nw) = downsample(&x, hh, ww);
                y = downsample(&y, hh, ww).0;
                (x, hh, ww) = (nx, nh, nw);
            }
        }
        total += score;
    }
    Ok(total / c as f64)
}

/// Multi-scale SSIM with data range 1, averaged over channels. Images with a
/// short side below 176 pixels use fewer scales with renormalized weights.
pub fn ms_ssim(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    ms_ssim_tensor(a.pixels(), b.pixels())
}

pub fn ms_ssim_mu(a: &HdrImage, b: &HdrImage, tm: &TonemapParams) -> Result<f64> {
    check_pair(a.pixels(), b.pixels())?;
    ms_ssim_tensor(&tonemap(a, tm)?, &tonemap(b, tm)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub psnr_mu: f64,
    pub ms_ssim: f64,
    pub ms_ssim_mu: f64,
    pub lux: f64,
}

/// All four metrics of `pred` against the ground truth `gt`.
pub fn evaluate(pred: &HdrImage, gt: &HdrImage, tm: &TonemapParams, lux: f64) -> Result<MetricsReport> {
    Ok(MetricsReport {
        psnr: psnr(pred, gt, 1.0)?,
        psnr_mu: psnr_mu(pred, gt, tm)?,
        ms_ssim: ms_ssim(pred, gt)?,
        ms_ssim_mu: ms_ssim_mu(pred, gt, tm)?,
        lux,
    })
}

/// A fusion method evaluated by [`psnr_curve`].
pub trait Fuser {
    fn fuse(&self, bracket: &Bracket, cfg: &BracketConfig, sensor: &SensorParams) -> Result<HdrImage>;
}

impl<F> Fuser for F
where
    F: Fn(&Bracket, &BracketConfig, &SensorParams) -> Result<HdrImage>,
{
    fn fuse(&self, bracket: &Bracket, cfg: &BracketConfig, sensor: &SensorParams) -> Result<HdrImage> {
        self(bracket, cfg, sensor)
    }
}

#[derive(Clone, Debug)]
pub struct CurveConfig {
    pub lux_levels: Vec<f64>,
    /// Noise realizations per image and level.
    pub repeats: usize,
    pub seed: u64,
    pub bracket: BracketConfig,
    pub sensor: SensorParams,
    pub tonemap: TonemapParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub lux: f64,
    pub psnr: f64,
    pub psnr_mu: f64,
    pub ms_ssim: f64,
    pub ms_ssim_mu: f64,
    pub n_images: usize,
    pub seed: u64,
}

/// Evenly spaced illuminance levels in log space over `[lo, hi]`.
pub fn log_lux_levels(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Mean metrics per illuminance level. Each (image, repeat) pair uses the
/// same seed at every level, so levels differ only in photon count.
pub fn psnr_curve(fuser: &dyn Fuser, dataset: &[RadianceImage], cfg: &CurveConfig) -> Result<Vec<CurveRow>> {
    ensure!(!dataset.is_empty(), "evaluation dataset is empty");
    ensure!(cfg.repeats > 0, "repeats must be positive");
    let truths = dataset.iter().map(ground_truth).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(cfg.lux_levels.len());
    for &lux in &cfg.lux_levels {
        let bracket_cfg = BracketConfig { peak_photons: lux_to_photons(lux)?, ..cfg.bracket.clone() };
        let mut sum = [0.0; 4];
        let mut count = 0usize;
        for (i, (flux, gt)) in dataset.iter().zip(&truths).enumerate() {
            for r in 0..cfg.repeats {
                let seed = derive_seed(cfg.seed, (i * cfg.repeats + r) as u64);
                let bracket = simulate_bracket(flux, &bracket_cfg, &cfg.sensor, seed)?;
                let pred = fuser.fuse(&bracket, &bracket_cfg, &cfg.sensor)?;
                let m = evaluate(&pred, gt, &cfg.tonemap, lux)?;
                for (s, v) in sum.iter_mut().zip([m.psnr, m.psnr_mu, m.ms_ssim, m.ms_ssim_mu]) {
                    *s += v;
                }
                count += 1;
            }
        }
        let n = count as f64;
        rows.push(CurveRow {
            lux,
            psnr: sum[0] / n,
            psnr_mu: sum[1] / n,
            ms_ssim: sum[2] / n,
            ms_ssim_mu: sum[3] / n,
            n_images: dataset.len(),
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

/// `%g`-style formatting with `digits` significant digits; infinities print
/// as `inf` / `-inf`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim(&format!("{:.*}", (digits as i32 - 1 - exp).max(0) as usize, x))
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let f = |v: f64| format_sig(v, 6);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            f(r.lux),
            f(r.psnr),
            f(r.psnr_mu),
            f(r.ms_ssim),
            f(r.ms_ssim_mu),
            r.n_images,
            r.seed
        );
    }
    s
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure!(x.len() == y.len() && x.len() >= 2, "spearman needs two equal-length series of length >= 2");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    ensure!(vx > 0.0 && vy > 0.0, "spearman undefined for a constant series");
    Ok(cov / (vx * vy).sqrt())
}
