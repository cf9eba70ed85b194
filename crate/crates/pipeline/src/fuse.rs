//! The `fuse` command and the fusion methods shared with `eval`.

use std::path::{Path, PathBuf};

use log::info;
use svhdr_core::fusion::fuse_ml;
use svhdr_core::image::{HdrImage, LdrImage};
use svhdr_core::network::{checkpoint, forward, ParamStore};
use svhdr_core::numerics::Tensor;
use svhdr_core::sensor::{Bracket, BracketConfig, SensorParams};
use svhdr_core::transforms::{bracket_inputs, tonemap, TonemapParams};

use crate::config::{Method, RunConfig};
use crate::error::{PipelineError, Result};
use crate::image_io::{read_png, write_hdr, write_png8};

/// A loaded fusion method.
pub enum FusionMethod {
    Baseline,
    Network(Box<ParamStore>),
}

impl FusionMethod {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match cfg.method {
            Method::Baseline => Ok(Self::Baseline),
            Method::Network => {
                let path = cfg
                    .checkpoint
                    .as_deref()
                    .ok_or_else(|| PipelineError::Usage("method=network requires --checkpoint".into()))?;
                if !path.is_file() {
                    return Err(PipelineError::Usage(format!("checkpoint {} does not exist", path.display())));
                }
                let store = checkpoint::load(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
                Ok(Self::Network(Box::new(store)))
            }
        }
    }

    pub fn fuse(&self, bracket: &Bracket, cfg: &BracketConfig, sensor: &SensorParams) -> svhdr_core::Result<HdrImage> {
        match self {
            Self::Baseline => fuse_ml(bracket, cfg, sensor),
            Self::Network(store) => forward(store, &bracket_inputs(bracket)?),
        }
    }
}

/// 8-bit display rendering: μ-law tonemap, clip to `[0, 1]`, gamma-encode.
pub fn preview(h: &HdrImage, tm: &TonemapParams, gamma: f64) -> Result<Tensor<f32>> {
    let t = tonemap(h, tm)?;
    Ok(t.map(|v| (v.clamp(0.0, 1.0) as f64).powf(1.0 / gamma) as f32))
}

#[derive(Clone, Debug)]
pub struct FuseReport {
    pub hdr: PathBuf,
    pub preview: PathBuf,
}

/// Fuses the LDR files `inputs` (shortest exposure first) taken with the
/// absolute exposure factors in `cfg.exposures`.
pub fn cmd_fuse(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<FuseReport> {
    if inputs.len() != cfg.exposures.len() {
        return Err(PipelineError::Usage(format!(
            "{} LDR inputs but {} exposure factors (set `exposures`)",
            inputs.len(),
            cfg.exposures.len()
        )));
    }
    if inputs.len() != cfg.bracket.read_sigmas.len() {
        return Err(PipelineError::Usage(format!("bracket config describes {} exposures, got {}", cfg.bracket.read_sigmas.len(), inputs.len())));
    }
    if !cfg.exposures.windows(2).all(|w| w[0] < w[1]) || !cfg.exposures.iter().all(|&t| t > 0.0) {
        return Err(PipelineError::Usage(format!("exposure factors must be positive and ascending: {:?}", cfg.exposures)));
    }
    let method = FusionMethod::load(cfg)?;
    let images = inputs.iter().map(|p| Ok(LdrImage::new(read_png(p)?)?)).collect::<Result<Vec<_>>>()?;
    for (img, p) in images.iter().zip(inputs) {
        if img.pixels().shape() != images[0].pixels().shape() {
            return Err(PipelineError::Data(format!(
                "{} is {:?}, expected {:?}",
                p.display(),
                img.pixels().shape(),
                images[0].pixels().shape()
            )));
        }
    }
    let bracket = Bracket { images, exposures: cfg.exposures.clone(), gamma: cfg.bracket.gamma };
    let fused = method.fuse(&bracket, &cfg.bracket, &cfg.sensor)?;
    write_outputs(cfg, &fused, &cfg.out)
}

pub fn write_outputs(cfg: &RunConfig, fused: &HdrImage, dir: &Path) -> Result<FuseReport> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let hdr = dir.join(format!("fused.{}", cfg.hdr_format.extension()));
    write_hdr(&hdr, fused.pixels())?;
    let preview_path = dir.join("preview.png");
    write_png8(&preview_path, &preview(fused, &cfg.tonemap, cfg.bracket.gamma)?)?;
    info!("wrote {} and {}", hdr.display(), preview_path.display());
    Ok(FuseReport { hdr, preview: preview_path })
}
