//! The `eval` command: metric curves over illuminance, as CSV and SVG.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::info;
use svhdr_core::image::RadianceImage;
use svhdr_core::metrics::{curve_csv, log_lux_levels, psnr_curve, CurveConfig, CurveRow, CURVE_LUX_MAX, CURVE_LUX_MIN};
use svhdr_core::rng::derive_seed;
use svhdr_core::scene::synthetic_scene;

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::fuse::FusionMethod;
use crate::image_io::read_hdr;
use crate::manifest::{DatasetManifest, Split};
use crate::synthesize::center_crop;

/// Illuminance levels: the configured list, or a log sweep over the full
/// range when `curve_points` is set.
pub fn lux_levels(cfg: &RunConfig) -> Vec<f64> {
    if cfg.curve_points > 0 {
        log_lux_levels(CURVE_LUX_MIN, CURVE_LUX_MAX, cfg.curve_points)
    } else {
        cfg.lux_levels.clone()
    }
}

/// Test radiance maps, centre-cropped to `crop`; procedural scenes when no
/// dataset is configured.
pub fn test_set(cfg: &RunConfig) -> Result<Vec<RadianceImage>> {
    match cfg.dataset.as_deref() {
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            let set = m
                .split(Split::Test)
                .map(|e| Ok(RadianceImage::new(center_crop(&read_hdr(&e.radiance)?, cfg.crop)?)?))
                .collect::<Result<Vec<_>>>()?;
            if set.is_empty() {
                return Err(PipelineError::Data(format!("{} has no test samples", path.display())));
            }
            Ok(set)
        }
        None => (0..cfg.synthetic_sources)
            .map(|i| Ok(synthetic_scene(cfg.crop, cfg.crop, derive_seed(cfg.seed, 0xe7a1_0000 + i as u64))?))
            .collect(),
    }
}

pub fn curve(cfg: &RunConfig, method: &FusionMethod, set: &[RadianceImage]) -> Result<Vec<CurveRow>> {
    let curve_cfg = CurveConfig {
        lux_levels: lux_levels(cfg),
        repeats: cfg.repeats,
        seed: cfg.seed,
        bracket: cfg.bracket.clone(),
        sensor: cfg.sensor.clone(),
        tonemap: cfg.tonemap,
    };
    let fuser = |b: &_, c: &_, s: &_| method.fuse(b, c, s);
    Ok(psnr_curve(&fuser, set, &curve_cfg)?)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub rows: Vec<CurveRow>,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let method = FusionMethod::load(cfg)?;
    let set = test_set(cfg)?;
    let rows = curve(cfg, &method, &set)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let csv = cfg.out.join("metrics.csv");
    std::fs::write(&csv, curve_csv(&rows)).map_err(|e| PipelineError::io(&csv, e))?;
    let svg = cfg.out.join("curve.svg");
    std::fs::write(&svg, curve_svg(&rows)).map_err(|e| PipelineError::io(&svg, e))?;
    info!("evaluated {} images at {} illuminance levels", set.len(), rows.len());
    Ok(EvalReport { csv, svg, rows })
}

/// Line plot of PSNR and PSNR-μ against illuminance (log axis).
pub fn curve_svg(rows: &[CurveRow]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 20.0, 30.0, 50.0);
    let finite: Vec<&CurveRow> = rows.iter().filter(|r| r.lux > 0.0 && r.psnr.is_finite() && r.psnr_mu.is_finite()).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if finite.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no finite points</text>"#, w / 2.0, h / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let xs: Vec<f64> = finite.iter().map(|r| r.lux.log10()).collect();
    let ys: Vec<f64> = finite.iter().flat_map(|r| [r.psnr, r.psnr_mu]).collect();
    let (mut x0, mut x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    y0 = (y0 - 1.0).floor();
    y1 = (y1 + 1.0).ceil();
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for r in &finite {
        let x = px(r.lux.log10());
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            h - bottom + 15.0,
            svhdr_core::metrics::format_sig(r.lux, 3)
        );
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y:.1}</text>"#, left - 5.0, py(y) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">illuminance (lux)</text>"#, (left + w - right) / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {:.1})">dB</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (name, color, get) in [("PSNR", "#1f77b4", 0usize), ("PSNR-mu", "#d62728", 1usize)] {
        let pts: Vec<String> = finite
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.lux.log10()), py(if get == 0 { r.psnr } else { r.psnr_mu })))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = top + 15.0 * (get as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-size="12" fill="{color}">{name}</text>"#, left + 10.0);
    }
    s.push_str("</svg>\n");
    s
}
