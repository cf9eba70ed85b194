//! Dataset manifests: one sample per line as whitespace-separated
//! `field=value` pairs; `#` starts a comment. Paths are relative to the
//! manifest's directory.
//!
//! ```text
//! split=train radiance=scenes/a.hdr
//! split=test radiance=s0/gt.pfm ldr=s0/ldr_0.png,s0/ldr_1.png,s0/ldr_2.png exposures=0.002,0.016,0.128
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub radiance: PathBuf,
    /// Pre-bracketed LDR exposures, shortest first.
    pub ldr: Vec<PathBuf>,
    /// Absolute exposure factors of `ldr`, ascending.
    pub exposures: Vec<f64>,
    pub gamma: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base).map_err(|e| match e {
            PipelineError::Data(msg) => PipelineError::Data(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        for e in &m.entries {
            for p in std::iter::once(&e.radiance).chain(&e.ldr) {
                if !p.is_file() {
                    return Err(PipelineError::Data(format!("{}: missing file {}", path.display(), p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| PipelineError::Data(format!("line {}: {msg}", i + 1));
            let (mut split, mut radiance, mut ldr, mut exposures, mut gamma) = (None, None, Vec::new(), Vec::new(), 2.2);
            for field in line.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(|| err(format!("expected field=value, got {field:?}")))?;
                match k {
                    "split" => {
                        split = Some(match v {
                            "train" => Split::Train,
                            "test" => Split::Test,
                            _ => return Err(err(format!("unknown split {v:?}"))),
                        })
                    }
                    "radiance" => radiance = Some(base.join(v)),
                    "ldr" => ldr = v.split(',').map(|p| base.join(p)).collect(),
                    "exposures" => {
                        exposures = v
                            .split(',')
                            .map(|x| x.parse::<f64>().map_err(|_| err(format!("bad exposure {x:?}"))))
                            .collect::<Result<_>>()?
                    }
                    "gamma" => gamma = v.parse().map_err(|_| err(format!("bad gamma {v:?}")))?,
                    _ => return Err(err(format!("unknown field {k:?}"))),
                }
            }
            let radiance = radiance.ok_or_else(|| err("missing radiance=".into()))?;
            if ldr.len() != exposures.len() {
                return Err(err(format!("{} LDR paths for {} exposure factors", ldr.len(), exposures.len())));
            }
            if !exposures.iter().all(|&t| t > 0.0 && t.is_finite()) || !exposures.windows(2).all(|w| w[0] < w[1]) {
                return Err(err(format!("exposure factors must be positive and ascending: {exposures:?}")));
            }
            if !(gamma > 0.0) {
                return Err(err(format!("gamma must be positive, got {gamma}")));
            }
            entries.push(ManifestEntry { split: split.unwrap_or(Split::Train), radiance, ldr, exposures, gamma });
        }
        Ok(Self { entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Renders with paths relative to `base` where possible.
    pub fn render(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut s = String::new();
        for e in &self.entries {
            let _ = write!(s, "split={} radiance={}", e.split.name(), rel(&e.radiance));
            if !e.ldr.is_empty() {
                let ldr: Vec<String> = e.ldr.iter().map(|p| rel(p)).collect();
                let t: Vec<String> = e.exposures.iter().map(|t| t.to_string()).collect();
                let _ = write!(s, " ldr={} exposures={} gamma={}", ldr.join(","), t.join(","), e.gamma);
            }
            s.push('\n');
        }
        s
    }
}
