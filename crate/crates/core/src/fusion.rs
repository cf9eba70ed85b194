//! Classical noise-aware HDR merge.
//!
//! Each exposure is linearized and normalized (`Î_i = I_i^γ / t_i`) and the
//! estimates are averaged with inverse-variance weights
//! `w_i = t_i² / Var(y_i)`. The variance is evaluated at the signal predicted
//! by a pilot estimate (`t_i · Ĥ_pilot`) rather than at the noisy observation:
//! weighting by the observation's own variance favours samples that
//! happened to come out dark and biases the merge low when photons are scarce.
//! The pilot is the equal-weight merge; the weights are then recomputed from
//! the latest estimate twice.

use crate::error::{ensure, Result};
use crate::image::HdrImage;
use crate::numerics::Tensor;
use crate::sensor::{noise_variance, Bracket, BracketConfig, SensorParams};

/// Linear observations at or above this are treated as clipped.
pub const SATURATION_THRESHOLD: f64 = 0.99;
pub const VARIANCE_FLOOR: f64 = 1e-12;
const REFINEMENTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    InverseVariance,
    /// Equal weight for every unsaturated exposure.
    Uniform,
}

/// Per-exposure normalized weights and saturation masks, each `H x W x 3`.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub weights: Vec<Tensor<f32>>,
    pub saturated: Vec<Vec<bool>>,
}

struct Prepared {
    shape: Vec<usize>,
    /// Linear observation `y_i = I_i^γ` per exposure.
    linear: Vec<Vec<f64>>,
    exposures: Vec<f64>,
    params: Vec<SensorParams>,
    shortest: usize,
}

fn prepare(bracket: &Bracket, cfg: &BracketConfig, base: &SensorParams) -> Result<Prepared> {
    let n = bracket.images.len();
    ensure!(n > 0, "empty bracket");
    ensure!(bracket.exposures.len() == n, "{} exposure factors for {n} images", bracket.exposures.len());
    ensure!(cfg.read_sigmas.len() == n, "{} read sigmas for {n} images", cfg.read_sigmas.len());
    ensure!(bracket.exposures.iter().all(|&t| t > 0.0), "exposure factors must be positive");
    let shape = bracket.images[0].pixels().shape().to_vec();
    for img in &bracket.images {
        ensure!(img.pixels().shape() == shape.as_slice(), "bracket images differ in shape");
    }
    let linear = bracket
        .images
        .iter()
        .map(|img| img.pixels().data().iter().map(|&v| (v as f64).powf(bracket.gamma)).collect())
        .collect();
    let params = cfg.read_sigmas.iter().map(|&s| SensorParams { read_sigma: s, ..base.clone() }).collect();
    let shortest = (0..n).min_by(|&a, &b| bracket.exposures[a].total_cmp(&bracket.exposures[b])).unwrap();
    Ok(Prepared { shape, linear, exposures: bracket.exposures.clone(), params, shortest })
}

impl Prepared {
    /// Raw (unnormalized) weights of element `k` given the current estimate.
    fn raw_weights(&self, k: usize, estimate: Option<f64>, mode: Weighting, out: &mut [f64]) {
        for (i, w) in out.iter_mut().enumerate() {
            let y = self.linear[i][k];
            *w = if y >= SATURATION_THRESHOLD {
                0.0
            } else {
                match (mode, estimate) {
                    (Weighting::Uniform, _) | (_, None) => 1.0,
                    (Weighting::InverseVariance, Some(h)) => {
                        let t = self.exposures[i];
                        let predicted = (t * h).clamp(0.0, 1.0);
                        t * t / noise_variance(predicted, &self.params[i]).max(VARIANCE_FLOOR)
                    }
                }
            };
        }
        if out.iter().all(|&w| w == 0.0) {
            out[self.shortest] = 1.0;
        }
    }

    fn merge(&self, mode: Weighting) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.exposures.len();
        let len = self.linear[0].len();
        let passes = if mode == Weighting::Uniform { 0 } else { REFINEMENTS };
        let mut estimate: Vec<Option<f64>> = vec![None; len];
        let mut weights = vec![vec![0.0; len]; n];
        let mut w = vec![0.0; n];
        let mut out = vec![0.0; len];
        for _ in 0..=passes {
            for k in 0..len {
                self.raw_weights(k, estimate[k], mode, &mut w);
                let sum: f64 = w.iter().sum();
                let mut h = 0.0;
                for i in 0..n {
                    let wi = w[i] / sum;
                    weights[i][k] = wi;
                    h += wi * self.linear[i][k] / self.exposures[i];
                }
                out[k] = h;
            }
            for (e, &h) in estimate.iter_mut().zip(&out) {
                *e = Some(h);
            }
        }
        (out, weights)
    }
}

/// Normalized per-pixel weights and saturation masks used by [`fuse_with`].
pub fn fusion_weights(bracket: &Bracket, cfg: &BracketConfig, p: &SensorParams, mode: Weighting) -> Result<FusionWeights> {
    let prep = prepare(bracket, cfg, p)?;
    let (_, weights) = prep.merge(mode);
    let weights = weights
        .into_iter()
        .map(|w| Tensor::new(&prep.shape, w.into_iter().map(|v| v as f32).collect()))
        .collect::<Result<_>>()?;
    let saturated = prep.linear.iter().map(|y| y.iter().map(|&v| v >= SATURATION_THRESHOLD).collect()).collect();
    Ok(FusionWeights { weights, saturated })
}

pub fn fuse_with(bracket: &Bracket, cfg: &BracketConfig, p: &SensorParams, mode: Weighting) -> Result<HdrImage> {
    let prep = prepare(bracket, cfg, p)?;
    let (h, _) = prep.merge(mode);
    HdrImage::new(Tensor::new(&prep.shape, h.into_iter().map(|v| v as f32).collect())?)
}

/// Inverse-variance maximum-likelihood merge.
pub fn fuse_ml(bracket: &Bracket, cfg: &BracketConfig, p: &SensorParams) -> Result<HdrImage> {
    fuse_with(bracket, cfg, p, Weighting::InverseVariance)
}

pub fn fuse_uniform(bracket: &Bracket, cfg: &BracketConfig, p: &SensorParams) -> Result<HdrImage> {
    fuse_with(bracket, cfg, p, Weighting::Uniform)
}
