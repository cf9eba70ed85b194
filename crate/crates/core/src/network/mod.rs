//! The multi-exposure fusion network: a shared-weight transformer encoder
//! applied to every exposure, Expo-Share exchange blocks at each scale, a
//! U-shaped decoder, and a small Adam training loop.

pub mod checkpoint;
mod config;
pub mod layers;
mod optimizer;
mod params;

pub use config::NetworkConfig;
pub use layers::Architecture;
pub use optimizer::Adam;
pub use params::{Init, Param, ParamSpec, ParamStore};

use crate::error::{ensure, Error, Result};
use crate::image::HdrImage;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::transforms::{LossReduction, TonemapParams};

/// Prefix shared by every parameter of the per-exposure encoder.
pub const ENCODER_PREFIX: &str = "encoder.";

/// Builds and initializes all parameters for `cfg`.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    let arch = Architecture::new(cfg)?;
    ParamStore::initialize(cfg.clone(), &arch.specs, seed)
}

/// Inference in `f32`.
pub fn forward(params: &ParamStore, inputs: &[Tensor<f32>]) -> Result<HdrImage> {
    let arch = Architecture::new(&params.config)?;
    let mut g = Graph::<f32>::new();
    let p: Vec<Var> = params.params().iter().map(|x| g.constant(x.value.clone())).collect();
    let x: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = arch.forward(&mut g, &p, &x)?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(Error::NonFinite(format!("forward pass, node {node} ({op})")));
    }
    HdrImage::new(g.value(out).clone())
}

/// Records forward pass plus loss on `g`, with every parameter as a
/// differentiable leaf. Returns `(parameter vars, loss var)`.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    arch: &Architecture,
    params: &[Tensor<T>],
    inputs: &[Tensor<T>],
    target: &Tensor<T>,
    tonemap: &TonemapParams,
    reduction: LossReduction,
) -> Result<(Vec<Var>, Var)> {
    let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let x: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = arch.forward(g, &p, &x)?;
    let loss = g.tonemapped_loss(out, target, tonemap, reduction)?;
    Ok((p, loss))
}

/// One training example: network inputs `J_i` and the ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: Vec<Tensor<f32>>,
    pub target: HdrImage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossConfig {
    pub tonemap: TonemapParams,
    pub reduction: LossReduction,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean loss over the batch, before the update.
    pub loss: f64,
    pub lr: f64,
}

/// Forward, loss, backward and one Adam update. The batch loss is the mean of
/// the per-sample losses.
pub fn train_step(params: &mut ParamStore, opt: &Adam, batch: &[Sample], loss_cfg: &LossConfig) -> Result<StepReport> {
    ensure!(!batch.is_empty(), "training batch is empty");
    opt.validate()?;
    let arch = Architecture::new(&params.config)?;
    let values: Vec<Tensor<f32>> = params.params().iter().map(|p| p.value.clone()).collect();
    params.zero_grads();
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for sample in batch {
        let mut g = Graph::<f32>::new();
        let (vars, loss) =
            loss_graph(&mut g, &arch, &values, &sample.inputs, sample.target.pixels(), &loss_cfg.tonemap, loss_cfg.reduction)?;
        let l = g.value(loss).data()[0] as f64;
        if !l.is_finite() {
            let first = g.first_non_finite().map(|(n, op)| format!("node {n} ({op})")).unwrap_or_default();
            return Err(Error::NonFinite(format!("training loss; first non-finite tensor: {first}")));
        }
        total += l;
        let mut grads = g.backward(loss)?;
        for (p, v) in params.params_mut().iter_mut().zip(vars) {
            if let Some(d) = grads.take(v) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(d.data()) {
                    *a += b * scale;
                }
            }
        }
    }
    if let Some(p) = params.params().iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    let lr = opt.update(params);
    Ok(StepReport { loss: total / batch.len() as f64, lr })
}
