//! The `grad-check` command: finite-difference verification of every
//! differentiable operation, the network blocks and the full network loss.

use std::rc::Rc;
use std::time::Instant;

use log::info;
use rand::Rng;
use svhdr_core::network::layers::{block, expo_share};
use svhdr_core::network::{build_network, Architecture, NetworkConfig, ParamStore};
use svhdr_core::numerics::{
    grad_check, pixel_shuffle_table, reflect_pad_table, AttentionSpec, GradCheckOptions, Graph, ShuffleDirection, Tensor,
    Var, WindowLayout,
};
use svhdr_core::rng::seeded;
use svhdr_core::transforms::{LossReduction, TonemapParams};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};

/// Tolerance class of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Block,
    Network,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Self::Primitive => 1e-6,
            Self::Block => 1e-4,
            Self::Network => 1e-3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Primitive => "primitive",
            Self::Block => "block",
            Self::Network => "network",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub tier: Tier,
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> svhdr_core::Result<Var>>;

struct Case {
    name: &'static str,
    tier: Tier,
    inputs: Vec<Tensor<f64>>,
    opts: GradCheckOptions,
    f: OpFn,
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}

/// Parameters moved away from the identity-at-initialization point.
fn perturbed(store: &ParamStore, seed: u64, scale: f64) -> Vec<Tensor<f64>> {
    store
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let noise = random(p.value.shape(), seed + i as u64, scale);
            Tensor::from_fn(p.value.shape(), |k| p.value.data()[k] as f64 + noise.data()[k])
        })
        .collect()
}

fn primitive(name: &'static str, inputs: Vec<Tensor<f64>>, f: OpFn) -> Case {
    Case { name, tier: Tier::Primitive, inputs, opts: GradCheckOptions::default(), f }
}

fn primitive_cases(seed: u64) -> Result<Vec<Case>> {
    let r = |shape: &[usize], k: u64| random(shape, seed.wrapping_add(k), 1.0);
    let shuffle = pixel_shuffle_table((4, 4, 2), 2, ShuffleDirection::Down)?;
    let pad = reflect_pad_table((3, 2, 1), 5, 5)?;
    let layout = WindowLayout::new(4, 4, 2, 1)?;
    let spec = AttentionSpec { heads: 2, window: 2, labels: Some(Rc::new(layout.region_labels().unwrap_or_default())) };
    let projection = r(&[5], 30);
    let tm = TonemapParams::default();
    let positive = |shape: &[usize], k: u64| r(shape, k).map(|v| 0.51 + 0.49 * v);
    let target = positive(&[3, 3, 3], 31);
    let target2 = target.clone();
    let mut cases = vec![
        primitive("linear", vec![r(&[4, 4], 1), r(&[3, 4], 2), r(&[3], 3)], Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        primitive("gelu", vec![r(&[17], 4).map(|v| 3.0 * v)], Box::new(|g, v| Ok(g.gelu(v[0])))),
        primitive("softmax", vec![r(&[3, 5], 5)], Box::new(|g, v| Ok(g.softmax(v[0])))),
        primitive(
            "layer_norm",
            vec![r(&[4, 6], 6), r(&[6], 7), r(&[6], 8)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        primitive("add", vec![r(&[5], 9), r(&[5], 10)], Box::new(|g, v| g.add(v[0], v[1]))),
        primitive("sub", vec![r(&[5], 11), r(&[5], 12)], Box::new(|g, v| g.sub(v[0], v[1]))),
        primitive("scale", vec![r(&[5], 13)], Box::new(|g, v| Ok(g.scale(v[0], 1.7)))),
        primitive("clamp_min_zero", vec![r(&[9], 14)], Box::new(|g, v| Ok(g.clamp_min_zero(v[0])))),
        primitive("sum_squares", vec![r(&[6], 15)], Box::new(|g, v| Ok(g.sum_squares(v[0])))),
        primitive("l2_norm", vec![r(&[7], 16)], Box::new(|g, v| Ok(g.l2_norm(v[0])))),
        primitive("sum_all", vec![r(&[6], 17)], Box::new(|g, v| Ok(g.sum_all(v[0])))),
        primitive("dot_const", vec![r(&[5], 18)], Box::new(move |g, v| g.dot_const(v[0], &projection))),
        primitive("gather(pixel_unshuffle)", vec![r(&[4, 4, 2], 19)], Box::new(move |g, v| g.gather(v[0], &shuffle))),
        primitive("gather(reflect_pad)", vec![r(&[3, 2, 1], 20)], Box::new(move |g, v| g.gather(v[0], &pad))),
        primitive(
            "pixel_shuffle(up)",
            vec![r(&[2, 2, 8], 21)],
            Box::new(|g, v| g.pixel_shuffle(v[0], 2, ShuffleDirection::Up)),
        ),
        primitive("concat", vec![r(&[2, 2, 1], 22), r(&[2, 2, 3], 23)], Box::new(|g, v| g.concat(&[v[0], v[1]]))),
        primitive("split", vec![r(&[2, 2, 4], 24)], Box::new(|g, v| Ok(g.split(v[0], 2)?[1]))),
        primitive(
            "window_attention(shifted)",
            vec![r(&[4, 4, 12], 25), r(&[9, 2], 26)],
            Box::new(move |g, v| g.window_attention(v[0], v[1], &spec)),
        ),
        primitive("tonemap", vec![positive(&[3, 3, 3], 32)], Box::new(move |g, v| g.tonemap(v[0], tm.mu))),
        primitive(
            "tonemapped_loss(norm)",
            vec![positive(&[3, 3, 3], 33)],
            Box::new(move |g, v| g.tonemapped_loss(v[0], &target, &tm, LossReduction::Norm)),
        ),
        primitive(
            "tonemapped_loss(mean)",
            vec![positive(&[3, 3, 3], 34)],
            Box::new(move |g, v| g.tonemapped_loss(v[0], &target2, &tm, LossReduction::Mean)),
        ),
    ];
    for (name, stride, pad) in [("conv2d(s1,p1)", 1, 1), ("conv2d(s2,p1)", 2, 1), ("conv2d(s1,p0)", 1, 0)] {
        cases.push(primitive(
            name,
            vec![r(&[5, 4, 2], 40), r(&[3, 2, 3, 3], 41), r(&[3], 42)],
            Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)),
        ));
    }
    // Fractional offsets keep the bilinear stencil away from its kinks.
    cases.push(primitive(
        "deform_conv2d",
        vec![r(&[4, 4, 2], 43), r(&[4, 4, 18], 44).map(|v| 0.37 + 0.3 * v), r(&[3, 2, 3, 3], 45), r(&[3], 46)],
        Box::new(|g, v| g.deform_conv2d(v[0], v[1], v[2], v[3])),
    ));
    Ok(cases)
}

fn layer_cases(seed: u64) -> Result<Vec<Case>> {
    let cfg = NetworkConfig::grad_check();
    let store = build_network(&cfg, seed)?;
    let arch = Rc::new(Architecture::new(&cfg)?);
    let values = perturbed(&store, seed.wrapping_add(100), 0.3);
    let n_params = values.len();
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let mut cases = Vec::new();

    // Level-0 block 1 is shifted; a 4x4 input with window 2 keeps the mask live.
    for (name, bi) in [("transformer_block", 0usize), ("transformer_block(shifted)", 1)] {
        let b = arch.encoder[0][bi].clone();
        let ids = [
            b.norm1.scale,
            b.norm1.shift,
            b.qkv.w,
            b.qkv.b,
            b.rel_bias,
            b.proj.w,
            b.proj.b,
            b.norm2.scale,
            b.norm2.shift,
            b.fc1.w,
            b.fc1.b,
            b.fc2.w,
            b.fc2.b,
        ];
        let mut inputs = vec![random(&[4, 4, 2], seed.wrapping_add(200 + bi as u64), 1.0)];
        inputs.extend(ids.iter().map(|&i| values[i].clone()));
        let cfg = cfg.clone();
        cases.push(Case {
            name,
            tier: Tier::Block,
            inputs,
            opts: opts.clone(),
            f: Box::new(move |g, v| {
                let mut p = vec![v[0]; n_params];
                for (k, &i) in ids.iter().enumerate() {
                    p[i] = v[k + 1];
                }
                block(g, &p, &cfg, &b, v[0])
            }),
        });
    }

    let idx: Vec<usize> = store
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.starts_with("expo_share.level0."))
        .map(|(i, _)| i)
        .collect();
    let n = cfg.num_exposures;
    let mut inputs: Vec<Tensor<f64>> = (0..n).map(|i| random(&[4, 4, 2], seed.wrapping_add(300 + i as u64), 1.0)).collect();
    inputs.extend(idx.iter().map(|&i| values[i].clone()));
    let share = arch.expo_share[0].clone();
    cases.push(Case {
        name: "expo_share",
        tier: Tier::Block,
        inputs,
        opts: opts.clone(),
        f: Box::new(move |g, v| {
            let mut p = vec![v[0]; n_params];
            for (k, &i) in idx.iter().enumerate() {
                p[i] = v[k + n];
            }
            let outs = expo_share(g, &p, &share, &v[..n])?;
            g.concat(&outs)
        }),
    });

    // The loss is O(1), so central differences carry about 1e-10 of
    // round-off; parameters whose true gradient is zero need a matching floor.
    let x: Vec<Tensor<f64>> = (0..n).map(|i| random(&[16, 16, 6], seed.wrapping_add(400 + i as u64), 0.5).map(|v| v + 0.5)).collect();
    let target = random(&[16, 16, 3], seed.wrapping_add(500), 0.5).map(|v| v + 0.5);
    let full = Rc::clone(&arch);
    cases.push(Case {
        name: "network+loss",
        tier: Tier::Network,
        inputs: values,
        opts: GradCheckOptions { eps: 1e-6, abs_floor: 1e-5, max_coords_per_input: Some(3), seed },
        f: Box::new(move |g, p| {
            let xs: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
            let out = full.forward(g, p, &xs)?;
            g.tonemapped_loss(out, &target, &TonemapParams::default(), LossReduction::Norm)
        }),
    });
    Ok(cases)
}

/// Runs every check; a failing probe (non-finite value, contract error) is
/// reported as an error rather than a failed row.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut cases = primitive_cases(seed)?;
    cases.extend(layer_cases(seed)?);
    cases
        .into_iter()
        .map(|c| {
            let start = Instant::now();
            let report = grad_check(c.name, &c.inputs, &c.opts, &c.f)?;
            let tol = c.tier.tolerance();
            info!("{}: max rel err {:.3e} over {} probes ({:.1?})", c.name, report.max_rel_error, report.probes, start.elapsed());
            Ok(CheckResult {
                name: c.name.to_string(),
                tier: c.tier,
                max_rel_error: report.max_rel_error,
                probes: report.probes,
                passed: report.max_rel_error < tol,
            })
        })
        .collect()
}

pub fn suite_csv(rows: &[CheckResult]) -> String {
    let mut s = String::from("op,tier,tolerance,max_rel_error,probes,passed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{},{}\n",
            r.name,
            r.tier.name(),
            r.tier.tolerance(),
            r.max_rel_error,
            r.probes,
            r.passed
        ));
    }
    s
}

/// Writes `grad-check.csv`; any failed check is a numerical error.
pub fn cmd_grad_check(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let rows = run_suite(cfg.seed)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let path = cfg.out.join("grad-check.csv");
    std::fs::write(&path, suite_csv(&rows)).map_err(|e| PipelineError::io(&path, e))?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(PipelineError::Numerical(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(rows)
}
