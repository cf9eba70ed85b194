//! The `train` command: Adam with a cosine schedule over synthesized
//! brackets, with loss logging, interval checkpoints and exact resume.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::seq::index::sample as sample_indices;
use svhdr_core::network::{build_network, checkpoint, forward, train_step, LossConfig, ParamStore, Sample};
use svhdr_core::rng::{derive_seed, seeded};
use svhdr_core::scene::synthetic_scene;
use svhdr_core::sensor::{ground_truth, simulate_bracket, BracketConfig, SensorParams, ShotNoise};
use svhdr_core::transforms::{bracket_inputs, loss, LossReduction};

use crate::config::{Preset, RunConfig};
use crate::error::{PipelineError, Result};
use crate::synthesize::training_samples;

/// Photon level of the overfit preset's noiseless bracket.
pub const OVERFIT_PEAK_PHOTONS: f64 = 256.0;
/// Evaluation subset size for the end-of-run training error.
const SUMMARY_SAMPLES: usize = 4;

const INIT_STREAM: u64 = 0x1417;
const BATCH_STREAM: u64 = 0xba7c;
const OVERFIT_STREAM: u64 = 0x0f17;

/// The overfit preset's single sample: a noiseless bracket of a procedural
/// scene, so the target is reachable and the run exercises only the
/// optimizer and gradient path.
pub fn overfit_sample(cfg: &RunConfig) -> Result<Sample> {
    let size = cfg.train.sample_size;
    let scene = synthetic_scene(size, size, derive_seed(cfg.seed, OVERFIT_STREAM))?;
    let bracket_cfg = BracketConfig {
        peak_photons: OVERFIT_PEAK_PHOTONS,
        read_sigmas: vec![0.0; cfg.bracket.exposure_factors.len()],
        ..cfg.bracket.clone()
    };
    let sensor = SensorParams { shot_noise: ShotNoise::Mean, ..cfg.sensor.clone() };
    let bracket = simulate_bracket(&scene, &bracket_cfg, &sensor, derive_seed(cfg.seed, OVERFIT_STREAM + 1))?;
    Ok(Sample { inputs: bracket_inputs(&bracket)?, target: ground_truth(&scene)? })
}

pub fn preset_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match cfg.train.preset {
        Preset::Overfit => Ok(vec![overfit_sample(cfg)?]),
        Preset::Desk | Preset::Paper => training_samples(cfg),
    }
}

/// Indices of the batch for `step`: drawn without replacement from a
/// generator keyed by the step, so a resumed run draws the same batches.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = seeded(derive_seed(derive_seed(seed, BATCH_STREAM), step));
    sample_indices(&mut rng, n, batch.min(n)).into_vec()
}

/// Tonemapped mean squared error of the network on `samples`.
pub fn tonemapped_mse(store: &ParamStore, samples: &[Sample], cfg: &RunConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = forward(store, &s.inputs)?;
        total += loss(&pred, &s.target, &cfg.tonemap, LossReduction::Mean)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    /// Zero-based index of the update.
    pub step: u64,
    /// Batch loss before the update.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Rows of the updates run by this invocation.
    pub losses: Vec<LossRow>,
    pub final_checkpoint: PathBuf,
    pub start_step: u64,
    pub steps: u64,
    /// Tonemapped MSE on (up to four of) the training samples after the run.
    pub final_mse: f64,
    pub params: ParamStore,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,lr";

fn read_loss_rows(path: &Path) -> Result<Vec<LossRow>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let start = offset;
        offset += line.len() + 1;
        if line.is_empty() || line == LOSS_CSV_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (f.len() == 3)
            .then(|| Some(LossRow { step: f[0].parse().ok()?, loss: f[1].parse().ok()?, lr: f[2].parse().ok()? }))
            .flatten();
        rows.push(parsed.ok_or_else(|| PipelineError::parse(path, start, format!("bad loss row {line:?}")))?);
    }
    Ok(rows)
}

fn render_loss_rows(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
    }
    s
}

/// Timestamped progress log; the only artifact that differs between reruns.
struct RunLog(Option<std::fs::File>);

impl RunLog {
    fn open(path: &Path) -> Self {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path);
        if let Err(e) = &f {
            warn!("cannot open {}: {e}", path.display());
        }
        Self(f.ok())
    }

    fn line(&mut self, msg: &str) {
        info!("{msg}");
        if let Some(f) = &mut self.0 {
            let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            let _ = writeln!(f, "[{t:.3}] {msg}");
        }
    }
}

fn save(store: &ParamStore, path: &Path) -> Result<()> {
    checkpoint::save(store, path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Trains from scratch, or resumes from `cfg.checkpoint`. Loss rows logged
/// every `log_every` updates go to `loss.csv`; rows past the resume point
/// are replaced.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let samples = preset_samples(cfg)?;
    let mut store = match cfg.checkpoint.as_deref() {
        Some(path) => {
            if !path.is_file() {
                return Err(PipelineError::Usage(format!("checkpoint {} does not exist", path.display())));
            }
            let s = checkpoint::load(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            if s.config != cfg.network {
                warn!("using the architecture stored in {} instead of the configured one", path.display());
            }
            s
        }
        None => build_network(&cfg.network, derive_seed(cfg.seed, INIT_STREAM))?,
    };
    let opt = cfg.train.adam();
    let loss_cfg = LossConfig { tonemap: cfg.tonemap, reduction: cfg.train.reduction };
    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let csv_path = cfg.out.join("loss.csv");
    let start_step = store.step;
    let mut logged: Vec<LossRow> = read_loss_rows(&csv_path)?.into_iter().filter(|r| r.step < start_step).collect();
    let mut log = RunLog::open(&cfg.out.join("train.log"));
    log.line(&format!(
        "training {} parameters on {} samples, steps {start_step}..{}",
        store.count(),
        samples.len(),
        cfg.train.steps
    ));

    let mut losses = Vec::new();
    for step in start_step..cfg.train.steps {
        let batch: Vec<Sample> =
            batch_indices(cfg.seed, step, samples.len(), cfg.train.batch_size).into_iter().map(|i| samples[i].clone()).collect();
        let report = match train_step(&mut store, &opt, &batch, &loss_cfg) {
            Ok(r) => r,
            Err(svhdr_core::Error::NonFinite(msg)) => {
                // The failed step returns before the update, so these are
                // still the last good weights.
                let path = cfg.out.join("last-good.ckpt");
                save(&store, &path)?;
                std::fs::write(&csv_path, render_loss_rows(&logged)).map_err(|e| PipelineError::io(&csv_path, e))?;
                log.line(&format!("step {step}: {msg}; saved {}", path.display()));
                return Err(PipelineError::Numerical(format!("step {step}: {msg}")));
            }
            Err(e) => return Err(e.into()),
        };
        let row = LossRow { step, loss: report.loss, lr: report.lr };
        let done = step + 1;
        if step % cfg.train.log_every == 0 || done == cfg.train.steps {
            log.line(&format!("step {step} loss {:.6e} lr {:.3e}", row.loss, row.lr));
            logged.push(row.clone());
        }
        losses.push(row);
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < cfg.train.steps {
            save(&store, &cfg.out.join(format!("checkpoint-{done:06}.ckpt")))?;
            std::fs::write(&csv_path, render_loss_rows(&logged)).map_err(|e| PipelineError::io(&csv_path, e))?;
        }
    }
    std::fs::write(&csv_path, render_loss_rows(&logged)).map_err(|e| PipelineError::io(&csv_path, e))?;
    let final_checkpoint = cfg.out.join("final.ckpt");
    save(&store, &final_checkpoint)?;

    let final_mse = tonemapped_mse(&store, &samples[..samples.len().min(SUMMARY_SAMPLES)], cfg)?;
    if !final_mse.is_finite() {
        return Err(PipelineError::Numerical(format!("final training error is {final_mse}")));
    }
    let summary = format!(
        "steps = {}\nfinal_loss = {}\ntonemapped_mse = {final_mse}\ncheckpoint = final.ckpt\n",
        store.step,
        losses.last().map(|r| r.loss.to_string()).unwrap_or_default(),
    );
    let summary_path = cfg.out.join("train-summary.txt");
    std::fs::write(&summary_path, summary).map_err(|e| PipelineError::io(&summary_path, e))?;
    log.line(&format!("finished at step {}; tonemapped MSE {final_mse:.3e}", store.step));
    Ok(TrainReport { losses, final_checkpoint, start_step, steps: store.step, final_mse, params: store })
}
