//! Exposure normalization, network input assembly, μ-law tonemapping and the
//! tonemapped training loss.

use crate::error::{ensure, Result};
use crate::image::{HdrImage, LdrImage};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::sensor::Bracket;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TonemapParams {
    pub mu: f64,
}

impl Default for TonemapParams {
    fn default() -> Self {
        Self { mu: 5000.0 }
    }
}

impl TonemapParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.mu > 0.0 && self.mu.is_finite(), "tonemap mu must be positive, got {}", self.mu);
        Ok(())
    }
}

/// How the tonemapped residual is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossReduction {
    /// Euclidean norm over all pixels and channels.
    #[default]
    Norm,
    /// Mean squared residual; independent of image and batch size.
    Mean,
}

/// `Î = I^γ / t`.
pub fn exposure_normalize(image: &LdrImage, t: f64, gamma: f64) -> Result<Tensor<f32>> {
    ensure!(t > 0.0, "exposure factor must be positive, got {t}");
    ensure!(gamma > 0.0, "gamma must be positive, got {gamma}");
    Ok(image.pixels().map(|v| ((v as f64).powf(gamma) / t) as f32))
}

/// Channel concatenation `[I, Î]` into an `H x W x 6` tensor.
pub fn assemble_input(image: &LdrImage, normalized: &Tensor<f32>) -> Result<Tensor<f32>> {
    ensure!(
        image.pixels().shape() == normalized.shape(),
        "LDR {:?} and normalized {:?} shapes differ",
        image.pixels().shape(),
        normalized.shape()
    );
    Tensor::concat_channels(&[image.pixels(), normalized])
}

/// Inverse of [`assemble_input`].
pub fn split_input(j: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    ensure!(j.channels() == 6, "network input needs 6 channels, got {}", j.channels());
    let mut parts = j.split_channels(&[3, 3])?;
    let normalized = parts.pop().unwrap();
    Ok((parts.pop().unwrap(), normalized))
}

/// Network inputs `J_i` for every exposure of a bracket.
pub fn bracket_inputs(bracket: &Bracket) -> Result<Vec<Tensor<f32>>> {
    bracket
        .images
        .iter()
        .zip(&bracket.exposures)
        .map(|(img, &t)| assemble_input(img, &exposure_normalize(img, t, bracket.gamma)?))
        .collect()
}

/// `log(1 + μh) / log(1 + μ)`.
pub fn tonemap_value(h: f64, mu: f64) -> f64 {
    (mu * h).ln_1p() / mu.ln_1p()
}

pub fn inverse_tonemap_value(t: f64, mu: f64) -> f64 {
    (t * mu.ln_1p()).exp_m1() / mu
}

fn tonemap_tensor<T: Real>(h: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    ensure!(h.all_finite(), "tonemap input is not finite");
    ensure!(h.min_value() >= T::zero(), "tonemap input must be nonnegative; clamp first");
    Ok(h.map(|v| T::lit(tonemap_value(v.as_f64(), mu))))
}

pub fn tonemap(h: &HdrImage, p: &TonemapParams) -> Result<Tensor<f32>> {
    p.validate()?;
    tonemap_tensor(h.pixels(), p.mu)
}

/// Tonemapped loss between a prediction and the ground truth.
pub fn loss(pred: &HdrImage, target: &HdrImage, p: &TonemapParams, reduction: LossReduction) -> Result<f64> {
    let (value, _) = loss_and_grad(pred, target, p, reduction)?;
    Ok(value)
}

/// Loss value and its gradient with respect to `pred`.
pub fn loss_and_grad(
    pred: &HdrImage,
    target: &HdrImage,
    p: &TonemapParams,
    reduction: LossReduction,
) -> Result<(f64, Tensor<f64>)> {
    let mut g = Graph::<f64>::new();
    let x = g.param(pred.pixels().cast());
    let out = g.tonemapped_loss(x, &target.pixels().cast(), p, reduction)?;
    let value = g.value(out).data()[0];
    let mut grads = g.backward(out)?;
    Ok((value, grads.take(x).expect("prediction gradient")))
}

impl<T: Real> Graph<T> {
    /// Differentiable elementwise μ-law.
    pub fn tonemap(&mut self, x: Var, mu: f64) -> Result<Var> {
        let out = tonemap_tensor(self.value(x), mu)?;
        let denom = mu.ln_1p();
        Ok(self.push(
            "tonemap",
            out,
            vec![x],
            Box::new(move |g, p, _| {
                let d = p[0].zip_map(g, |h, g| g * T::lit(mu / ((1.0 + mu * h.as_f64()) * denom)));
                vec![Some(d.expect("tonemap shapes"))]
            }),
        ))
    }

    /// `‖T(pred) − T(target)‖₂` (or its mean-square variant) as a `[1]` scalar.
    pub fn tonemapped_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        p: &TonemapParams,
        reduction: LossReduction,
    ) -> Result<Var> {
        p.validate()?;
        ensure!(
            self.value(pred).shape() == target.shape(),
            "prediction {:?} and target {:?} shapes differ",
            self.value(pred).shape(),
            target.shape()
        );
        let tp = self.tonemap(pred, p.mu)?;
        let tt = self.constant(tonemap_tensor(target, p.mu)?);
        let diff = self.sub(tp, tt)?;
        Ok(match reduction {
            LossReduction::Norm => self.l2_norm(diff),
            LossReduction::Mean => {
                let n = target.len() as f64;
                let s = self.sum_squares(diff);
                self.scale(s, 1.0 / n)
            }
        })
    }
}
