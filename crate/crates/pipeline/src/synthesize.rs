//! Training-data synthesis: dihedral augmentation, 2x box downsampling,
//! center-region random crops and simulated photon-limited brackets.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::{info, warn};
use rand::Rng;
use svhdr_core::image::{HdrImage, LdrImage, RadianceImage};
use svhdr_core::network::Sample;
use svhdr_core::numerics::Tensor;
use svhdr_core::rng::{derive_seed, seeded};
use svhdr_core::scene::synthetic_scene;
use svhdr_core::sensor::{ground_truth, photons_to_lux, sample_peak_photons, simulate_bracket, Bracket, BracketConfig};
use svhdr_core::transforms::{assemble_input, bracket_inputs, exposure_normalize};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::image_io::{read_hdr, read_png, write_pfm, write_png16};
use crate::manifest::{DatasetManifest, ManifestEntry, Split};

/// Rotations by 0/90/180/270 degrees, each with and without a mirror.
pub const AUGMENTATIONS: usize = 8;

/// Dihedral transform `a` in `0..8`: `a % 4` counter-clockwise quarter
/// turns, then a horizontal mirror when `a >= 4`.
pub fn augment(img: &Tensor<f32>, a: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = img.hwc()?;
    let turns = a % 4;
    let (oh, ow) = if turns % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = Vec::with_capacity(img.len());
    for i in 0..oh {
        for j in 0..ow {
            let j = if a >= 4 { ow - 1 - j } else { j };
            let (si, sj) = match turns {
                0 => (i, j),
                1 => (j, w - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                _ => (h - 1 - j, i),
            };
            out.extend_from_slice(&img.data()[(si * w + sj) * c..(si * w + sj + 1) * c]);
        }
    }
    Ok(Tensor::new(&[oh, ow, c], out)?)
}

/// 2x2 box filter with stride 2; an odd trailing row or column is dropped.
pub fn downsample2(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = img.hwc()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(PipelineError::Data(format!("{h}x{w} image is too small to downsample")));
    }
    let at = |y: usize, x: usize, k: usize| img.data()[(y * w + x) * c + k];
    Ok(Tensor::from_fn(&[oh, ow, c], |i| {
        let (y, x, k) = (i / (ow * c), (i / c) % ow, i % c);
        0.25 * (at(2 * y, 2 * x, k) + at(2 * y, 2 * x + 1, k) + at(2 * y + 1, 2 * x, k) + at(2 * y + 1, 2 * x + 1, k))
    }))
}

/// Top-left corner of a `size` crop whose centre lies in the middle half of
/// a `dim`-long axis.
pub fn crop_start<R: Rng>(dim: usize, size: usize, rng: &mut R) -> Result<usize> {
    if dim < size {
        return Err(PipelineError::Data(format!("image side {dim} is smaller than the {size} crop")));
    }
    let half = size / 2;
    let lo = (dim / 4).max(half);
    let hi = (3 * dim / 4).min(dim - (size - half));
    Ok(rng.random_range(lo..=hi) - half)
}

pub fn crop(img: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ih, iw, c) = img.hwc()?;
    if top + h > ih || left + w > iw {
        return Err(PipelineError::Data(format!("crop {h}x{w}@({top},{left}) exceeds {ih}x{iw}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        out.extend_from_slice(&img.data()[(y * iw + left) * c..(y * iw + left + w) * c]);
    }
    Ok(Tensor::new(&[h, w, c], out)?)
}

/// Deterministic central crop (used for evaluation).
pub fn center_crop(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w, _) = img.hwc()?;
    let (ch, cw) = (size.min(h), size.min(w));
    crop(img, (h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// A source radiance map, already downsampled.
#[derive(Clone, Debug)]
pub struct Source {
    pub name: String,
    pub split: Split,
    pub flux: Tensor<f32>,
}

/// Sources from the manifest's radiance entries (unreadable ones are skipped
/// with a warning) or, without a dataset, procedural scenes.
pub fn load_sources(cfg: &RunConfig, manifest: Option<&DatasetManifest>) -> Result<(Vec<Source>, usize)> {
    let Some(m) = manifest else {
        let sources = (0..cfg.synthetic_sources)
            .map(|i| {
                let scene = synthetic_scene(cfg.synthetic_size, cfg.synthetic_size, derive_seed(cfg.seed, 0x5ce7_0000 + i as u64))?;
                Ok(Source { name: format!("procedural-{i}"), split: Split::Train, flux: downsample2(scene.pixels())? })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((sources, 0));
    };
    let mut sources = Vec::new();
    let mut failed = 0;
    for e in &m.entries {
        let loaded = read_hdr(&e.radiance).and_then(|t| {
            let t = downsample2(&t)?;
            RadianceImage::new(t.clone())?;
            Ok(t)
        });
        match loaded {
            Ok(flux) => sources.push(Source { name: e.radiance.display().to_string(), split: e.split, flux }),
            Err(err) => {
                warn!("skipping {}: {err}", e.radiance.display());
                failed += 1;
            }
        }
    }
    Ok((sources, failed))
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub gt: HdrImage,
    pub bracket: Bracket,
    pub peak_photons: f64,
    pub lux: f64,
    pub seed: u64,
    pub augmentation: usize,
    pub crop_origin: (usize, usize),
}

/// Sample `index` of the dataset: augmentation `index % 8` of source
/// `index / 8`, with its own derived seed for the crop, photon level and noise.
pub fn synthesize_sample(source: &Source, index: usize, cfg: &RunConfig) -> Result<SynthSample> {
    let a = index % AUGMENTATIONS;
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = seeded(seed);
    let img = augment(&source.flux, a)?;
    let (h, w, _) = img.hwc()?;
    let top = crop_start(h, cfg.crop, &mut rng)?;
    let left = crop_start(w, cfg.crop, &mut rng)?;
    let patch = RadianceImage::new(crop(&img, top, left, cfg.crop, cfg.crop)?)?;
    let peak = sample_peak_photons(&mut rng);
    let bracket_cfg = BracketConfig { peak_photons: peak, ..cfg.bracket.clone() };
    let bracket = simulate_bracket(&patch, &bracket_cfg, &cfg.sensor, derive_seed(seed, 1))?;
    Ok(SynthSample {
        gt: ground_truth(&patch)?,
        bracket,
        peak_photons: peak,
        lux: photons_to_lux(peak)?,
        seed,
        augmentation: a,
        crop_origin: (top, left),
    })
}

#[derive(Clone, Debug)]
pub struct SynthReport {
    pub manifest: PathBuf,
    pub samples: usize,
    pub skipped: usize,
}

/// Writes every sample as `sample_NNNNN/{gt.pfm, ldr_i.png, meta.txt}` plus
/// a manifest of the generated dataset.
pub fn cmd_synthesize(cfg: &RunConfig) -> Result<SynthReport> {
    let manifest = cfg.dataset.as_deref().map(DatasetManifest::load).transpose()?;
    let (sources, skipped) = load_sources(cfg, manifest.as_ref())?;
    if sources.is_empty() {
        return Err(PipelineError::Data(format!("no usable source images ({skipped} failed)")));
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let mut out = DatasetManifest::default();
    for (s, source) in sources.iter().enumerate() {
        for a in 0..AUGMENTATIONS {
            let index = s * AUGMENTATIONS + a;
            let sample = synthesize_sample(source, index, cfg)?;
            let dir = cfg.out.join(format!("sample_{index:05}"));
            std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            write_pfm(&dir.join("gt.pfm"), sample.gt.pixels())?;
            let mut ldr = Vec::new();
            for (i, img) in sample.bracket.images.iter().enumerate() {
                let p = dir.join(format!("ldr_{i}.png"));
                write_png16(&p, img.pixels())?;
                ldr.push(p);
            }
            std::fs::write(dir.join("meta.txt"), sample_meta(source, &sample)).map_err(|e| PipelineError::io(&dir, e))?;
            out.entries.push(ManifestEntry {
                split: source.split,
                radiance: dir.join("gt.pfm"),
                ldr,
                exposures: sample.bracket.exposures.clone(),
                gamma: sample.bracket.gamma,
            });
        }
    }
    let path = cfg.out.join("manifest.txt");
    std::fs::write(&path, out.render(&cfg.out)).map_err(|e| PipelineError::io(&path, e))?;
    info!("synthesized {} samples from {} sources ({skipped} skipped)", out.entries.len(), sources.len());
    Ok(SynthReport { manifest: path, samples: out.entries.len(), skipped })
}

fn sample_meta(source: &Source, s: &SynthSample) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "source = {}", source.name);
    let _ = writeln!(m, "split = {}", source.split.name());
    let _ = writeln!(m, "augmentation = {}", s.augmentation);
    let _ = writeln!(m, "crop_origin = {},{}", s.crop_origin.0, s.crop_origin.1);
    let _ = writeln!(m, "seed = {}", s.seed);
    let _ = writeln!(m, "peak_photons = {}", s.peak_photons);
    let _ = writeln!(m, "lux = {}", s.lux);
    let t: Vec<String> = s.bracket.exposures.iter().map(|t| t.to_string()).collect();
    let _ = writeln!(m, "exposures = {}", t.join(","));
    let _ = writeln!(m, "gamma = {}", s.bracket.gamma);
    m
}

/// Network inputs and target for a manifest entry with a stored bracket.
pub fn load_stored_sample(e: &ManifestEntry) -> Result<Sample> {
    let target = HdrImage::new(read_hdr(&e.radiance)?)?;
    let inputs = e
        .ldr
        .iter()
        .zip(&e.exposures)
        .map(|(p, &t)| {
            let img = LdrImage::new(read_png(p)?)?;
            if img.pixels().shape() != target.pixels().shape() {
                return Err(PipelineError::Data(format!("{} does not match {}", p.display(), e.radiance.display())));
            }
            Ok(assemble_input(&img, &exposure_normalize(&img, t, e.gamma)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample { inputs, target })
}

/// Training samples for the current configuration: stored brackets from the
/// manifest's train split, on-the-fly synthesis for radiance-only entries,
/// or procedural sources when no dataset is given.
pub fn training_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let manifest = cfg.dataset.as_deref().map(DatasetManifest::load).transpose()?;
    let mut samples = Vec::new();
    if let Some(m) = &manifest {
        for e in m.split(Split::Train).filter(|e| !e.ldr.is_empty()) {
            samples.push(load_stored_sample(e)?);
        }
        let raw = DatasetManifest { entries: m.split(Split::Train).filter(|e| e.ldr.is_empty()).cloned().collect() };
        if !raw.entries.is_empty() {
            let (sources, _) = load_sources(cfg, Some(&raw))?;
            samples.extend(synthesized(cfg, &sources)?);
        }
    } else {
        let (sources, _) = load_sources(cfg, None)?;
        samples.extend(synthesized(cfg, &sources)?);
    }
    if samples.is_empty() {
        return Err(PipelineError::Data("no training samples".into()));
    }
    Ok(samples)
}

fn synthesized(cfg: &RunConfig, sources: &[Source]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (s, source) in sources.iter().enumerate() {
        for a in 0..AUGMENTATIONS {
            let sample = synthesize_sample(source, s * AUGMENTATIONS + a, cfg)?;
            out.push(Sample { inputs: bracket_inputs(&sample.bracket)?, target: sample.gt });
        }
    }
    Ok(out)
}
