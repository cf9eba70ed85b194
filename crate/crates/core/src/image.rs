//! Image newtypes shared by the sensor model, transforms, fusion and metrics.
//! All are `H x W x 3` channels-last `f32` tensors.

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

fn check_image(t: &Tensor<f32>, what: &str) -> Result<()> {
    let (h, w, _) = t.hwc()?;
    ensure!(h > 0 && w > 0, "{what} must be non-empty");
    ensure!(t.all_finite(), "{what} contains non-finite values");
    ensure!(t.min_value() >= 0.0, "{what} contains negative values");
    Ok(())
}

/// Scene flux θ(x) in photons per unit exposure, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceImage(Tensor<f32>);

impl RadianceImage {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        check_image(&pixels, "radiance image")?;
        Ok(Self(pixels))
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<f32> {
        self.0
    }
}

/// One gamma-encoded exposure with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrImage(Tensor<f32>);

impl LdrImage {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        check_image(&pixels, "LDR image")?;
        ensure!(pixels.max_value() <= 1.0, "LDR image exceeds 1.0");
        Ok(Self(pixels))
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<f32> {
        self.0
    }
}

/// Linear HDR radiance, nonnegative; ground truth is normalized to unit peak.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage(Tensor<f32>);

impl HdrImage {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        check_image(&pixels, "HDR image")?;
        Ok(Self(pixels))
    }

    /// Divides by the maximum so the peak is exactly 1 (all-zero stays zero).
    pub fn normalized(pixels: Tensor<f32>) -> Result<Self> {
        let m = pixels.max_value();
        let t = if m > 0.0 { pixels.map(|v| v / m) } else { pixels };
        Self::new(t)
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<f32> {
        self.0
    }
}
