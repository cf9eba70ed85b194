//! Image-sensor forward model and exposure-bracket synthesis.
//!
//! Per pixel and channel:
//!
//! ```text
//! λ     = τ · QE · (θ + μ_dark)
//! e     ~ Poisson(λ)
//! dn    = min(round(α · min(e, full_well)), 2^bits − 1)
//! y     = clamp(dn / dn_sat + N(0, σ²), 0, 1)
//! I     = y^(1/γ)
//! ```
//!
//! Every draw comes from a generator keyed on `(seed, pixel, channel)`, so the
//! output does not depend on traversal order.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, Triangular};

use crate::error::{ensure, Result};
use crate::image::{HdrImage, LdrImage, RadianceImage};
use crate::numerics::Tensor;
use crate::rng::{counter_rng, derive_seed};

/// Photons at the top of the training range map to this illuminance.
pub const LUX_AT_256_PHOTONS: f64 = 0.323;
/// Illuminance per photon of peak signal (`0.323 / 256`).
pub const LUX_PER_PHOTON: f64 = LUX_AT_256_PHOTONS / 256.0;

pub const PEAK_PHOTONS_MIN: f64 = 4.0;
pub const PEAK_PHOTONS_MODE: f64 = 8.0;
pub const PEAK_PHOTONS_MAX: f64 = 256.0;

/// Where the Gaussian read noise is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadNoiseStage {
    /// `σ` is in digital numbers and is added before normalization.
    Adu,
    /// `σ` is in normalized `[0, 1]` output units.
    Normalized,
}

/// Shot-noise treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShotNoise {
    Poisson,
    /// Electrons equal their expectation `λ` (noiseless limit).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorParams {
    pub adc_bits: u32,
    pub full_well_e: f64,
    pub tau: f64,
    pub qe: f64,
    /// Dark signal added to the flux before the Poisson stage.
    pub dark_current: f64,
    pub gain_alpha: f64,
    pub read_sigma: f64,
    pub read_noise_stage: ReadNoiseStage,
    pub shot_noise: ShotNoise,
    /// Display gamma used to encode the output.
    pub gamma: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            adc_bits: 14,
            full_well_e: 5000.0,
            tau: 1.0,
            qe: 0.5,
            dark_current: 0.0,
            gain_alpha: 1.0,
            read_sigma: 0.0,
            read_noise_stage: ReadNoiseStage::Normalized,
            shot_noise: ShotNoise::Poisson,
            gamma: 2.2,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.qe > 0.0 && self.qe <= 1.0, "qe must lie in (0, 1], got {}", self.qe);
        ensure!(self.tau > 0.0, "tau must be positive, got {}", self.tau);
        ensure!(self.full_well_e > 0.0, "full well must be positive");
        ensure!((8..=16).contains(&self.adc_bits), "adc_bits must lie in 8..=16, got {}", self.adc_bits);
        ensure!(self.read_sigma >= 0.0, "read_sigma must be nonnegative");
        ensure!(self.gain_alpha > 0.0, "gain must be positive");
        ensure!(self.dark_current >= 0.0, "dark current must be nonnegative");
        ensure!(self.gamma > 0.0, "gamma must be positive");
        Ok(())
    }

    /// Largest representable digital number, `2^bits − 1`.
    pub fn adc_max(&self) -> f64 {
        ((1u64 << self.adc_bits) - 1) as f64
    }

    /// Digital number of a full-well pixel; normalizes the output to `[0, 1]`.
    pub fn dn_saturation(&self) -> f64 {
        (self.gain_alpha * self.full_well_e).round().min(self.adc_max())
    }

    /// Expected photo-electrons for flux `theta`.
    pub fn mean_electrons(&self, theta: f64) -> f64 {
        self.tau * self.qe * (theta + self.dark_current)
    }

    /// Full-well clip followed by gain and ADC quantization.
    pub fn quantize(&self, electrons: f64) -> f64 {
        (self.gain_alpha * electrons.min(self.full_well_e)).round().min(self.adc_max())
    }

    /// Read-noise standard deviation in normalized units.
    pub fn read_sigma_normalized(&self) -> f64 {
        match self.read_noise_stage {
            ReadNoiseStage::Normalized => self.read_sigma,
            ReadNoiseStage::Adu => self.read_sigma / self.dn_saturation(),
        }
    }
}

/// Draws one Poisson electron count (or its mean in the noiseless mode).
pub fn sample_electrons<R: Rng>(lambda: f64, mode: ShotNoise, rng: &mut R) -> f64 {
    match mode {
        ShotNoise::Mean => lambda,
        ShotNoise::Poisson if lambda <= 0.0 => 0.0,
        ShotNoise::Poisson => Poisson::new(lambda).expect("finite positive rate").sample(rng),
    }
}

/// `n` Poisson draws at rate `lambda` from the same counter-keyed streams the
/// sensor uses (draw `i` uses counter `i`).
pub fn poisson_draws(lambda: f64, n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|i| sample_electrons(lambda, ShotNoise::Poisson, &mut counter_rng(seed, i as u64)))
        .collect()
}

/// Simulates one exposure of `flux`.
pub fn simulate_exposure(flux: &RadianceImage, p: &SensorParams, seed: u64) -> Result<LdrImage> {
    p.validate()?;
    let theta = flux.pixels();
    let dn_sat = p.dn_saturation();
    let sigma = p.read_sigma_normalized();
    let inv_gamma = 1.0 / p.gamma;
    let data = theta
        .data()
        .iter()
        .enumerate()
        .map(|(i, &th)| {
            let mut rng = counter_rng(seed, i as u64);
            let e = sample_electrons(p.mean_electrons(th as f64), p.shot_noise, &mut rng);
            let mut y = p.quantize(e) / dn_sat;
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                y += sigma * z;
            }
            y.clamp(0.0, 1.0).powf(inv_gamma) as f32
        })
        .collect();
    LdrImage::new(Tensor::new(theta.shape(), data)?)
}

/// Exposure ladder and read-noise profile of a bracket.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketConfig {
    /// Relative exposure factors, strictly increasing.
    pub exposure_factors: Vec<f64>,
    pub read_sigmas: Vec<f64>,
    pub gamma: f64,
    /// Peak of `τ · QE · θ` at the middle exposure.
    pub peak_photons: f64,
}

impl Default for BracketConfig {
    fn default() -> Self {
        Self {
            exposure_factors: vec![1.0, 8.0, 64.0],
            read_sigmas: vec![0.0292, 0.1798, 1.4384],
            gamma: 2.2,
            peak_photons: PEAK_PHOTONS_MODE,
        }
    }
}

impl BracketConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.exposure_factors;
        ensure!(!t.is_empty(), "bracket needs at least one exposure");
        ensure!(t.iter().all(|&v| v > 0.0), "exposure factors must be positive");
        ensure!(t.windows(2).all(|w| w[0] < w[1]), "exposure factors must be strictly increasing: {t:?}");
        ensure!(
            self.read_sigmas.len() == t.len(),
            "{} read sigmas for {} exposures",
            self.read_sigmas.len(),
            t.len()
        );
        ensure!(self.read_sigmas.iter().all(|&s| s >= 0.0), "read sigmas must be nonnegative");
        ensure!(self.gamma > 0.0, "gamma must be positive");
        ensure!(self.peak_photons > 0.0, "peak photons must be positive");
        Ok(())
    }

    pub fn middle(&self) -> usize {
        self.exposure_factors.len() / 2
    }
}

/// A synthesized bracket.
#[derive(Clone, Debug)]
pub struct Bracket {
    pub images: Vec<LdrImage>,
    /// Absolute exposure factor `t_i` of each image: without noise or
    /// clipping, `I_i^γ = t_i · H` for the unit-peak ground truth `H`.
    pub exposures: Vec<f64>,
    pub gamma: f64,
}

/// Ground truth for a flux map: the flux scaled to unit peak.
pub fn ground_truth(flux: &RadianceImage) -> Result<HdrImage> {
    HdrImage::normalized(flux.pixels().clone())
}

/// Synthesizes all exposures of a bracket. The flux is rescaled so the middle
/// exposure peaks at `cfg.peak_photons`; exposure `i` uses
/// `τ_i = τ · t_i / t_mid`, `σ_i = cfg.read_sigmas[i]` and the sub-seed
/// `(seed, i)`.
pub fn simulate_bracket(flux: &RadianceImage, cfg: &BracketConfig, base: &SensorParams, seed: u64) -> Result<Bracket> {
    cfg.validate()?;
    base.validate()?;
    let peak_flux = flux.pixels().max_value() as f64;
    let scale = if peak_flux > 0.0 { cfg.peak_photons / (base.tau * base.qe * peak_flux) } else { 1.0 };
    let scaled = RadianceImage::new(flux.pixels().map(|v| (v as f64 * scale) as f32))?;
    let t_mid = cfg.exposure_factors[cfg.middle()];
    let mut images = Vec::with_capacity(cfg.exposure_factors.len());
    let mut exposures = Vec::with_capacity(cfg.exposure_factors.len());
    for (i, (&t, &sigma)) in cfg.exposure_factors.iter().zip(&cfg.read_sigmas).enumerate() {
        let p = SensorParams { tau: base.tau * t / t_mid, read_sigma: sigma, gamma: cfg.gamma, ..base.clone() };
        images.push(simulate_exposure(&scaled, &p, derive_seed(seed, i as u64))?);
        exposures.push(p.gain_alpha * (t / t_mid) * cfg.peak_photons / p.dn_saturation());
    }
    Ok(Bracket { images, exposures, gamma: cfg.gamma })
}

/// Peak photon count drawn from the triangular training distribution on
/// `[4, 256]` with mode 8.
pub fn sample_peak_photons<R: Rng>(rng: &mut R) -> f64 {
    Triangular::new(PEAK_PHOTONS_MIN, PEAK_PHOTONS_MAX, PEAK_PHOTONS_MODE)
        .expect("valid triangular bounds")
        .sample(rng)
}

pub fn photons_to_lux(photons: f64) -> Result<f64> {
    ensure!(photons > 0.0 && photons.is_finite(), "photon count must be positive, got {photons}");
    Ok(photons * LUX_PER_PHOTON)
}

pub fn lux_to_photons(lux: f64) -> Result<f64> {
    ensure!(lux > 0.0 && lux.is_finite(), "illuminance must be positive, got {lux}");
    Ok(lux / LUX_PER_PHOTON)
}

/// Normalized-domain variance of an observation `y` under the Poisson +
/// Gaussian model: `y · α / dn_sat + σ²`.
pub fn noise_variance(y: f64, p: &SensorParams) -> f64 {
    let dn_sat = p.dn_saturation();
    let shot = (y * dn_sat / p.gain_alpha) * (p.gain_alpha / dn_sat).powi(2);
    shot + p.read_sigma_normalized().powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(value: f32, h: usize, w: usize) -> RadianceImage {
        RadianceImage::new(Tensor::full(&[h, w, 3], value)).unwrap()
    }

    #[test]
    fn dark_scene_without_read_noise_is_black() {
        let out = simulate_exposure(&flat(0.0, 4, 4), &SensorParams::default(), 1).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overfull_well_clips_to_white() {
        let p = SensorParams::default();
        // λ = 0.5 · 24000 = 12000 ≫ 5000, so even the low tail exceeds 6000.
        assert_eq!(p.quantize(6000.0), 5000.0);
        let out = simulate_exposure(&flat(24000.0, 3, 3), &p, 9).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adc_ceiling_caps_high_gain() {
        let p = SensorParams { gain_alpha: 8.0, ..SensorParams::default() };
        assert_eq!(p.adc_max(), 16383.0);
        assert_eq!(p.quantize(5000.0), 16383.0);
        assert_eq!(p.dn_saturation(), 16383.0);
    }

    #[test]
    fn params_are_validated() {
        assert!(SensorParams { qe: 0.0, ..Default::default() }.validate().is_err());
        assert!(SensorParams { adc_bits: 20, ..Default::default() }.validate().is_err());
        let bad = BracketConfig { exposure_factors: vec![1.0, 8.0, 8.0], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn negative_flux_is_rejected() {
        assert!(RadianceImage::new(Tensor::full(&[2, 2, 3], -1.0)).is_err());
    }

    #[test]
    fn lux_mapping_anchors() {
        assert_eq!(photons_to_lux(256.0).unwrap(), 0.323);
        let low = photons_to_lux(4.0).unwrap();
        assert!((0.0050..=0.0051).contains(&low));
        for x in [4.0, 8.0, 17.3, 256.0, 512.0] {
            let back = lux_to_photons(photons_to_lux(x).unwrap()).unwrap();
            assert!(((back - x) / x).abs() < 1e-12);
        }
        assert!(photons_to_lux(0.0).is_err());
        assert!(lux_to_photons(-1.0).is_err());
    }

    #[test]
    fn noise_variance_limits() {
        let p = SensorParams::default();
        assert_eq!(noise_variance(0.0, &p), 0.0);
        let p = SensorParams { read_sigma: 0.1, ..p };
        assert!((noise_variance(0.0, &p) - 0.01).abs() < 1e-15);
        let adu = SensorParams { read_sigma: 10.0, read_noise_stage: ReadNoiseStage::Adu, ..p };
        assert!((noise_variance(0.0, &adu) - (10.0f64 / 5000.0).powi(2)).abs() < 1e-15);
    }
}
