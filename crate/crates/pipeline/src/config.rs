//! Run configuration: `key = value` files, environment overrides and flags,
//! resolved into one [`RunConfig`] that can be echoed back to disk.
//!
//! Precedence, lowest first: preset defaults, config file, `SVHDR_*`
//! environment variables, command-line flags. An environment variable maps
//! to a key by dropping the prefix, lowercasing and turning `__` into `.`
//! (`SVHDR_TRAIN__STEPS=10` sets `train.steps`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use svhdr_core::metrics::TABLE_LUX;
use svhdr_core::network::{Adam, NetworkConfig};
use svhdr_core::sensor::{BracketConfig, ReadNoiseStage, SensorParams, ShotNoise};
use svhdr_core::transforms::{LossReduction, TonemapParams};

use crate::error::{PipelineError, Result};

pub const ENV_PREFIX: &str = "SVHDR_";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.txt";

/// Iterations per epoch and epoch count of the published training recipe.
pub const PAPER_STEPS_PER_EPOCH: u64 = 1184;
pub const PAPER_EPOCHS: u64 = 300;
pub const PAPER_BATCH_SIZE: usize = 3;
/// Upper bound on the desk preset's step budget.
pub const DESK_MAX_STEPS: u64 = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdrFormat {
    Pfm,
    Rgbe,
}

impl HdrFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Pfm => "pfm",
            Self::Rgbe => "hdr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Tiny network on a synthesized or procedural dataset.
    Desk,
    /// Tiny network memorizing one noiseless 64x64 procedural sample.
    Overfit,
    /// Full network and the published step budget.
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub steps: u64,
    pub batch_size: usize,
    pub steps_per_epoch: u64,
    pub epochs: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub reduction: LossReduction,
    pub log_every: u64,
    /// Zero disables interval checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// Side of the overfit preset's procedural sample.
    pub sample_size: usize,
}

impl TrainConfig {
    pub fn adam(&self) -> Adam {
        Adam { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, total_steps: self.steps }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
    pub deterministic: bool,
    pub hdr_format: HdrFormat,
    /// Procedural source scenes used when no dataset is given.
    pub synthetic_sources: usize,
    pub synthetic_size: usize,
    pub crop: usize,
    pub lux_levels: Vec<f64>,
    /// When positive, replaces `lux_levels` by this many log-spaced levels
    /// over the full illuminance range.
    pub curve_points: usize,
    pub repeats: usize,
    /// Absolute exposure factors of the `fuse` inputs.
    pub exposures: Vec<f64>,
    pub tonemap: TonemapParams,
    pub bracket: BracketConfig,
    pub sensor: SensorParams,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (network, steps, batch_size, steps_per_epoch, epochs) = match preset {
            Preset::Desk | Preset::Overfit => (NetworkConfig::tiny(), 2000, 1, 2000, 1),
            Preset::Paper => (
                NetworkConfig::default(),
                PAPER_STEPS_PER_EPOCH * PAPER_EPOCHS,
                PAPER_BATCH_SIZE,
                PAPER_STEPS_PER_EPOCH,
                PAPER_EPOCHS,
            ),
        };
        let adam = Adam::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            method: Method::Baseline,
            checkpoint: None,
            deterministic: false,
            hdr_format: HdrFormat::Pfm,
            synthetic_sources: 4,
            synthetic_size: 256,
            crop: 128,
            lux_levels: TABLE_LUX.to_vec(),
            curve_points: 0,
            repeats: 1,
            exposures: Vec::new(),
            tonemap: TonemapParams::default(),
            bracket: BracketConfig::default(),
            sensor: SensorParams::default(),
            network,
            train: TrainConfig {
                preset,
                steps,
                batch_size,
                steps_per_epoch,
                epochs,
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                reduction: LossReduction::Norm,
                log_every: 10,
                checkpoint_every: 500,
                sample_size: 64,
            },
        }
    }

    /// Sets one key. Unknown keys and unparsable values are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "dataset" => self.dataset = opt_path(v),
            "method" => {
                self.method = match v {
                    "baseline" => Method::Baseline,
                    "network" => Method::Network,
                    _ => return Err(bad(key, v)),
                }
            }
            "checkpoint" => self.checkpoint = opt_path(v),
            "deterministic" => self.deterministic = num(key, v)?,
            "hdr_format" => {
                self.hdr_format = match v {
                    "pfm" => HdrFormat::Pfm,
                    "hdr" | "rgbe" => HdrFormat::Rgbe,
                    _ => return Err(bad(key, v)),
                }
            }
            "synthetic_sources" => self.synthetic_sources = num(key, v)?,
            "synthetic_size" => self.synthetic_size = num(key, v)?,
            "crop" => self.crop = num(key, v)?,
            "lux_levels" => self.lux_levels = list(key, v)?,
            "curve_points" => self.curve_points = num(key, v)?,
            "repeats" => self.repeats = num(key, v)?,
            "exposures" => self.exposures = list(key, v)?,
            "tonemap.mu" => self.tonemap.mu = num(key, v)?,
            "bracket.exposure_factors" => self.bracket.exposure_factors = list(key, v)?,
            "bracket.read_sigmas" => self.bracket.read_sigmas = list(key, v)?,
            "bracket.gamma" => self.bracket.gamma = num(key, v)?,
            "bracket.peak_photons" => self.bracket.peak_photons = num(key, v)?,
            "sensor.adc_bits" => self.sensor.adc_bits = num(key, v)?,
            "sensor.full_well_e" => self.sensor.full_well_e = num(key, v)?,
            "sensor.tau" => self.sensor.tau = num(key, v)?,
            "sensor.qe" => self.sensor.qe = num(key, v)?,
            "sensor.dark_current" => self.sensor.dark_current = num(key, v)?,
            "sensor.gain_alpha" => self.sensor.gain_alpha = num(key, v)?,
            "sensor.read_sigma" => self.sensor.read_sigma = num(key, v)?,
            "sensor.gamma" => self.sensor.gamma = num(key, v)?,
            "sensor.read_noise_stage" => {
                self.sensor.read_noise_stage = match v {
                    "adu" => ReadNoiseStage::Adu,
                    "normalized" => ReadNoiseStage::Normalized,
                    _ => return Err(bad(key, v)),
                }
            }
            "sensor.shot_noise" => {
                self.sensor.shot_noise = match v {
                    "poisson" => ShotNoise::Poisson,
                    "mean" => ShotNoise::Mean,
                    _ => return Err(bad(key, v)),
                }
            }
            "train.preset" => {
                let p = parse_preset(v)?;
                if p != self.train.preset {
                    return Err(PipelineError::Usage(format!("train.preset must be resolved before other keys ({v})")));
                }
            }
            "train.steps" => self.train.steps = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.beta1" => self.train.beta1 = num(key, v)?,
            "train.beta2" => self.train.beta2 = num(key, v)?,
            "train.eps" => self.train.eps = num(key, v)?,
            "train.reduction" => {
                self.train.reduction = match v {
                    "norm" => LossReduction::Norm,
                    "mean" => LossReduction::Mean,
                    _ => return Err(bad(key, v)),
                }
            }
            "train.log_every" => self.train.log_every = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "train.sample_size" => self.train.sample_size = num(key, v)?,
            _ => {
                let Some(k) = key.strip_prefix("network.") else {
                    return Err(PipelineError::Usage(format!("unknown configuration key {key:?}")));
                };
                if !self.network.to_pairs().iter().any(|(name, _)| name == k) {
                    return Err(PipelineError::Usage(format!("unknown configuration key {key:?}")));
                }
                let map = BTreeMap::from([(k.to_string(), v.to_string())]);
                self.network = self.network.clone().apply_map(&map).map_err(|e| PipelineError::Usage(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Every effective value, in a stable order; feeding these back through
    /// [`RunConfig::set`] reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let s = |v: &dyn Display| v.to_string();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train;
        let mut pairs = vec![
            ("seed", s(&self.seed)),
            ("out", self.out.display().to_string()),
            ("dataset", path(&self.dataset)),
            ("method", if self.method == Method::Baseline { "baseline" } else { "network" }.into()),
            ("checkpoint", path(&self.checkpoint)),
            ("deterministic", s(&self.deterministic)),
            ("hdr_format", if self.hdr_format == HdrFormat::Pfm { "pfm" } else { "hdr" }.into()),
            ("synthetic_sources", s(&self.synthetic_sources)),
            ("synthetic_size", s(&self.synthetic_size)),
            ("crop", s(&self.crop)),
            ("lux_levels", join(&self.lux_levels)),
            ("curve_points", s(&self.curve_points)),
            ("repeats", s(&self.repeats)),
            ("exposures", join(&self.exposures)),
            ("tonemap.mu", s(&self.tonemap.mu)),
            ("bracket.exposure_factors", join(&self.bracket.exposure_factors)),
            ("bracket.read_sigmas", join(&self.bracket.read_sigmas)),
            ("bracket.gamma", s(&self.bracket.gamma)),
            ("bracket.peak_photons", s(&self.bracket.peak_photons)),
            ("sensor.adc_bits", s(&self.sensor.adc_bits)),
            ("sensor.full_well_e", s(&self.sensor.full_well_e)),
            ("sensor.tau", s(&self.sensor.tau)),
            ("sensor.qe", s(&self.sensor.qe)),
            ("sensor.dark_current", s(&self.sensor.dark_current)),
            ("sensor.gain_alpha", s(&self.sensor.gain_alpha)),
            ("sensor.read_sigma", s(&self.sensor.read_sigma)),
            ("sensor.gamma", s(&self.sensor.gamma)),
            (
                "sensor.read_noise_stage",
                if self.sensor.read_noise_stage == ReadNoiseStage::Adu { "adu" } else { "normalized" }.into(),
            ),
            ("sensor.shot_noise", if self.sensor.shot_noise == ShotNoise::Poisson { "poisson" } else { "mean" }.into()),
            ("train.preset", preset_name(t.preset).into()),
            ("train.steps", s(&t.steps)),
            ("train.batch_size", s(&t.batch_size)),
            ("train.steps_per_epoch", s(&t.steps_per_epoch)),
            ("train.epochs", s(&t.epochs)),
            ("train.lr", s(&t.lr)),
            ("train.beta1", s(&t.beta1)),
            ("train.beta2", s(&t.beta2)),
            ("train.eps", s(&t.eps)),
            ("train.reduction", if t.reduction == LossReduction::Norm { "norm" } else { "mean" }.into()),
            ("train.log_every", s(&t.log_every)),
            ("train.checkpoint_every", s(&t.checkpoint_every)),
            ("train.sample_size", s(&t.sample_size)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<Vec<_>>();
        pairs.extend(self.network.to_pairs().into_iter().map(|(k, v)| (format!("network.{k}"), v)));
        pairs
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: svhdr_core::Error| PipelineError::Usage(e.to_string());
        self.tonemap.validate().map_err(usage)?;
        self.bracket.validate().map_err(usage)?;
        self.sensor.validate().map_err(usage)?;
        self.network.validate().map_err(usage)?;
        self.train.adam().validate().map_err(usage)?;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(PipelineError::Usage(msg.into())) };
        check(self.network.num_exposures == self.bracket.exposure_factors.len(), "network.num_exposures must match the bracket length")?;
        check(self.crop > 0 && self.synthetic_size > 0, "crop and synthetic_size must be positive")?;
        check(self.repeats > 0, "repeats must be positive")?;
        check(self.lux_levels.iter().all(|&l| l > 0.0), "lux levels must be positive")?;
        check(self.train.batch_size > 0, "train.batch_size must be positive")?;
        check(self.train.log_every > 0, "train.log_every must be positive")?;
        check(
            self.train.preset != Preset::Desk || self.train.steps <= DESK_MAX_STEPS,
            "the desk preset allows at most 5000 steps",
        )?;
        Ok(())
    }

    /// `key = value` text of [`RunConfig::to_pairs`].
    pub fn render(&self) -> String {
        let mut s = String::from("# resolved configuration; rerun with --config <this file>\n");
        for (k, v) in self.to_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.render()).map_err(|e| PipelineError::io(&path, e))?;
        Ok(path)
    }
}

fn bad(key: &str, v: &str) -> PipelineError {
    PipelineError::Usage(format!("{key}: invalid value {v:?}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_preset(v: &str) -> Result<Preset> {
    match v {
        "desk" => Ok(Preset::Desk),
        "overfit" => Ok(Preset::Overfit),
        "paper" => Ok(Preset::Paper),
        _ => Err(bad("train.preset", v)),
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Overfit => "overfit",
        Preset::Paper => "paper",
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(PipelineError::Usage(format!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1)));
        };
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(PipelineError::Usage(format!("{origin}:{}: empty key", i + 1)));
        }
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(PipelineError::Usage(format!("{origin}:{}: duplicate key {k:?} (first on line {prev})", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Maps `SVHDR_*` variables to configuration keys.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v)))
        .collect();
    out.sort();
    out
}

/// Layers file, environment and flag assignments over the selected preset.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[(String, String)],
) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
        layers.extend(parse_config_text(&text, &path.display().to_string())?);
    }
    layers.extend(env_overrides(env));
    layers.extend(flags.iter().cloned());
    let preset = match layers.iter().rev().find(|(k, _)| k == "train.preset") {
        Some((_, v)) => parse_preset(v.trim())?,
        None => Preset::Desk,
    };
    let mut cfg = RunConfig::preset(preset);
    for (k, v) in &layers {
        if k != "train.preset" {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::preset(Preset::Paper);
        cfg.set("bracket.peak_photons", "17.5").unwrap();
        cfg.set("network.base_channels", "16").unwrap();
        cfg.set("checkpoint", "a/b.ckpt").unwrap();
        let pairs = parse_config_text(&cfg.render(), "echo").unwrap();
        let back = resolve(None, Vec::new(), &pairs).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 1 # comment\nrepeats = 3\ncrop = 64\n").unwrap();
        let env = vec![("SVHDR_REPEATS".to_string(), "5".to_string()), ("HOME".to_string(), "/x".to_string())];
        let flags = vec![("crop".to_string(), "32".to_string())];
        let cfg = resolve(Some(&path), env, &flags).unwrap();
        assert_eq!((cfg.seed, cfg.repeats, cfg.crop), (1, 5, 32));
    }

    #[test]
    fn env_keys_map_double_underscore_to_dot() {
        let got = env_overrides(vec![("SVHDR_TRAIN__STEPS".into(), "7".into())]);
        assert_eq!(got, vec![("train.steps".to_string(), "7".to_string())]);
    }

    #[test]
    fn bad_input_is_a_usage_error() {
        for text in ["nonsense", "bogus = 1", "seed = x", "seed = 1\nseed = 2", "network.colour = 3"] {
            let pairs = parse_config_text(text, "t");
            let err = pairs.and_then(|p| resolve(None, Vec::new(), &p)).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}: {err}");
        }
        let flags = vec![("train.steps".to_string(), "6000".to_string())];
        assert!(resolve(None, Vec::new(), &flags).is_err());
    }

    #[test]
    fn paper_preset_records_published_budget() {
        let flags = vec![("train.preset".to_string(), "paper".to_string())];
        let cfg = resolve(None, Vec::new(), &flags).unwrap();
        let text = cfg.render();
        assert!(text.contains("train.steps = 355200\n"));
        assert!(text.contains("train.steps_per_epoch = 1184\n"));
        assert!(text.contains("train.epochs = 300\n"));
        assert!(text.contains("train.batch_size = 3\n"));
        assert!(text.contains("network.base_channels = 48\n"));
    }
}
