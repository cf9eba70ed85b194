//! Image file formats: PFM (lossless `f32`), Radiance RGBE, and 8/16-bit PNG.
//!
//! All readers return channels-last `H x W x C` tensors with row 0 at the top.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use log::warn;
use svhdr_core::numerics::Tensor;

use crate::error::{PipelineError, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PipelineError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

/// Cursor over a byte buffer that reports parse errors by offset.
struct Header<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn err(&self, message: impl Into<String>) -> PipelineError {
        PipelineError::parse(self.path, self.pos, message)
    }

    fn skip_space(&mut self) {
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| PipelineError::parse(self.path, start, "non-ASCII header"))
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        self.skip_space();
        let start = self.pos;
        let tok = self.token()?;
        tok.parse().map_err(|_| PipelineError::parse(self.path, start, format!("bad {what} {tok:?}")))
    }

    fn line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.buf.len() {
            return Err(self.err("unterminated header line"));
        }
        self.pos += 1;
        std::str::from_utf8(&self.buf[start..self.pos - 1]).map_err(|_| PipelineError::parse(self.path, start, "non-ASCII header"))
    }
}

// ---------------------------------------------------------------- PFM

/// Writes little-endian PFM (`PF` for 3 channels, `Pf` for 1), rows stored
/// bottom-to-top as the format requires.
pub fn write_pfm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    let tag = match c {
        3 => "PF",
        1 => "Pf",
        _ => return Err(PipelineError::Data(format!("PFM stores 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for row in (0..h).rev() {
        for v in &img.data()[row * w * c..(row + 1) * w * c] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let buf = read_bytes(path)?;
    let mut hd = Header { path, buf: &buf, pos: 0 };
    let c = match hd.token()? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(PipelineError::parse(path, 0, format!("bad PFM magic {other:?}"))),
    };
    let w: usize = hd.parse("width")?;
    let h: usize = hd.parse("height")?;
    let scale: f64 = hd.parse("scale")?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(hd.err(format!("invalid PFM geometry {w}x{h} scale {scale}")));
    }
    // Exactly one whitespace byte separates the scale from the raster.
    if hd.pos >= buf.len() || !buf[hd.pos].is_ascii_whitespace() {
        return Err(hd.err("missing separator after scale"));
    }
    let start = hd.pos + 1;
    let need = h * w * c * 4;
    if buf.len() - start != need {
        return Err(PipelineError::parse(path, start, format!("expected {need} raster bytes, found {}", buf.len() - start)));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; h * w * c];
    for (k, chunk) in buf[start..].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, rest) = (k / (w * c), k % (w * c));
        data[(h - 1 - file_row) * w * c + rest] = v;
    }
    Ok(Tensor::new(&[h, w, c], data)?)
}

// ---------------------------------------------------------------- RGBE

/// Radiance convention: mantissa bytes address bin centres.
pub fn rgbe_to_rgb(p: [u8; 4]) -> [f32; 3] {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(p[3] as i32 - (128 + 8));
    [(p[0] as f64 + 0.5) * f, (p[1] as f64 + 0.5) * f, (p[2] as f64 + 0.5) * f].map(|v| v as f32)
}

/// Shared-exponent encoding; negative or non-finite inputs must be clamped
/// by the caller.
pub fn rgb_to_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let v = rgb.iter().cloned().fold(0.0f32, f32::max) as f64;
    if v < 1e-32 {
        return [0; 4];
    }
    // v = m * 2^e with m in [0.5, 1).
    let mut e = v.log2().floor() as i32 + 1;
    let mut m = v / 2f64.powi(e);
    if m >= 1.0 {
        m /= 2.0;
        e += 1;
    } else if m < 0.5 {
        m *= 2.0;
        e -= 1;
    }
    if e + 128 > 255 {
        return [255, 255, 255, 255];
    }
    if e + 128 < 1 {
        return [0; 4];
    }
    let scale = m * 256.0 / v;
    let q = |c: f32| ((c as f64 * scale) as i64).clamp(0, 255) as u8;
    [q(rgb[0]), q(rgb[1]), q(rgb[2]), (e + 128) as u8]
}

/// Writes a flat (non-run-length) Radiance picture.
pub fn write_rgbe(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(PipelineError::Data(format!("RGBE stores 3 channels, got {c}")));
    }
    let clipped = img.data().iter().filter(|v| !v.is_finite() || **v < 0.0).count();
    if clipped > 0 {
        warn!("{}: clamping {clipped} negative or non-finite values to 0", path.display());
    }
    let mut out = format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n").into_bytes();
    for px in img.data().chunks_exact(3) {
        let f = |v: f32| if v.is_finite() && v > 0.0 { v } else { 0.0 };
        out.extend_from_slice(&rgb_to_rgbe([f(px[0]), f(px[1]), f(px[2])]));
    }
    write_bytes(path, &out)
}

/// Reads a Radiance picture in standard orientation, flat or with
/// new-style run-length encoded scanlines.
pub fn read_rgbe(path: &Path) -> Result<Tensor<f32>> {
    let buf = read_bytes(path)?;
    let mut hd = Header { path, buf: &buf, pos: 0 };
    let magic = hd.line()?;
    if !magic.starts_with("#?") {
        return Err(PipelineError::parse(path, 0, "missing #? Radiance signature"));
    }
    loop {
        let at = hd.pos;
        let line = hd.line()?;
        if line.trim().is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(PipelineError::parse(path, at, format!("unsupported format {fmt:?}")));
            }
        }
    }
    let at = hd.pos;
    let res = hd.line()?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (h, w) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>().map_err(|_| PipelineError::parse(path, at, "bad height"))?,
            w.parse::<usize>().map_err(|_| PipelineError::parse(path, at, "bad width"))?,
        ),
        _ => return Err(PipelineError::parse(path, at, format!("unsupported resolution line {res:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(PipelineError::parse(path, at, "empty picture"));
    }
    let mut pos = hd.pos;
    let mut pixels = vec![0u8; h * w * 4];
    let eof = |pos: usize| PipelineError::parse(path, pos, "truncated scanline data");
    for row in 0..h {
        let line = &mut pixels[row * w * 4..(row + 1) * w * 4];
        let rle = (8..0x8000).contains(&w)
            && buf.len() >= pos + 4
            && buf[pos] == 2
            && buf[pos + 1] == 2
            && buf[pos + 2] & 0x80 == 0
            && (((buf[pos + 2] as usize) << 8) | buf[pos + 3] as usize) == w;
        if !rle {
            let n = w * 4;
            if buf.len() < pos + n {
                return Err(eof(pos));
            }
            line.copy_from_slice(&buf[pos..pos + n]);
            pos += n;
            continue;
        }
        pos += 4;
        for ch in 0..4 {
            let mut x = 0;
            while x < w {
                let count = *buf.get(pos).ok_or_else(|| eof(pos))? as usize;
                pos += 1;
                if count > 128 {
                    let run = count - 128;
                    let v = *buf.get(pos).ok_or_else(|| eof(pos))?;
                    pos += 1;
                    if x + run > w {
                        return Err(PipelineError::parse(path, pos, "run overflows scanline"));
                    }
                    for k in x..x + run {
                        line[k * 4 + ch] = v;
                    }
                    x += run;
                } else {
                    if count == 0 || x + count > w {
                        return Err(PipelineError::parse(path, pos, "bad literal count"));
                    }
                    if buf.len() < pos + count {
                        return Err(eof(pos));
                    }
                    for k in 0..count {
                        line[(x + k) * 4 + ch] = buf[pos + k];
                    }
                    pos += count;
                    x += count;
                }
            }
        }
    }
    let data = pixels.chunks_exact(4).flat_map(|p| rgbe_to_rgb([p[0], p[1], p[2], p[3]])).collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

// ---------------------------------------------------------------- PNG

/// Raw integer PNG raster (RGB, 8 or 16 bits per sample).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PngRaster {
    pub width: usize,
    pub height: usize,
    pub bits: u8,
    /// Row-major RGB samples.
    pub samples: Vec<u16>,
}

pub fn write_png_raster(path: &Path, r: &PngRaster) -> Result<()> {
    if r.samples.len() != r.width * r.height * 3 {
        return Err(PipelineError::Data(format!("PNG raster has {} samples for {}x{} RGB", r.samples.len(), r.width, r.height)));
    }
    let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), r.width as u32, r.height as u32);
    enc.set_color(png::ColorType::Rgb);
    let bytes: Vec<u8> = match r.bits {
        8 => {
            enc.set_depth(png::BitDepth::Eight);
            r.samples.iter().map(|&v| v.min(255) as u8).collect()
        }
        16 => {
            enc.set_depth(png::BitDepth::Sixteen);
            r.samples.iter().flat_map(|v| v.to_be_bytes()).collect()
        }
        b => return Err(PipelineError::Data(format!("unsupported PNG bit depth {b}"))),
    };
    let png_err = |e: png::EncodingError| PipelineError::Data(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Reads any non-interlaced PNG as RGB samples; gray is replicated, alpha dropped.
pub fn read_png_raster(path: &Path) -> Result<PngRaster> {
    let file = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let data_err = |e: png::DecodingError| PipelineError::Data(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(data_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(data_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let bits: u8 = match info.bit_depth {
        png::BitDepth::Sixteen => 16,
        _ => 8,
    };
    let channels = info.color_type.samples();
    let raw: Vec<u16> = if bits == 16 {
        buf[..info.buffer_size()].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        buf[..info.buffer_size()].iter().map(|&b| b as u16).collect()
    };
    let mut samples = Vec::with_capacity(width * height * 3);
    for px in raw.chunks_exact(channels) {
        match channels {
            1 | 2 => samples.extend_from_slice(&[px[0]; 3]),
            _ => samples.extend_from_slice(&px[..3]),
        }
    }
    Ok(PngRaster { width, height, bits, samples })
}

fn quantize(img: &Tensor<f32>, max: f64, path: &Path) -> Result<Vec<u16>> {
    let (_, _, c) = img.hwc()?;
    if c != 3 {
        return Err(PipelineError::Data(format!("PNG output needs 3 channels, got {c}")));
    }
    let out_of_range = img.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if out_of_range > 0 {
        warn!("{}: clamping {out_of_range} values outside [0, 1]", path.display());
    }
    Ok(img
        .data()
        .iter()
        .map(|&v| {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            (v as f64 * max).round() as u16
        })
        .collect())
}

/// Writes `[0, 1]` values as 16-bit RGB (`round(v · 65535)`).
pub fn write_png16(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, _) = img.hwc()?;
    let samples = quantize(img, 65535.0, path)?;
    write_png_raster(path, &PngRaster { width: w, height: h, bits: 16, samples })
}

/// Writes `[0, 1]` values as 8-bit RGB (`round(v · 255)`).
pub fn write_png8(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, _) = img.hwc()?;
    let samples = quantize(img, 255.0, path)?;
    write_png_raster(path, &PngRaster { width: w, height: h, bits: 8, samples })
}

/// Reads a PNG as `[0, 1]` floats.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let r = read_png_raster(path)?;
    let max = if r.bits == 16 { 65535.0 } else { 255.0 };
    Ok(Tensor::new(&[r.height, r.width, 3], r.samples.iter().map(|&v| v as f32 / max).collect())?)
}

// ---------------------------------------------------------------- dispatch

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a linear HDR image (`.pfm` or `.hdr`/`.pic`) as 3 channels.
pub fn read_hdr(path: &Path) -> Result<Tensor<f32>> {
    let t = match extension(path).as_str() {
        "pfm" => read_pfm(path)?,
        "hdr" | "pic" | "rgbe" => read_rgbe(path)?,
        e => return Err(PipelineError::Data(format!("{}: unknown HDR extension {e:?}", path.display()))),
    };
    let (h, w, c) = t.hwc()?;
    if c == 1 {
        let d = t.data().iter().flat_map(|&v| [v; 3]).collect();
        return Ok(Tensor::new(&[h, w, 3], d)?);
    }
    Ok(t)
}

/// Writes a linear HDR image, format chosen by extension.
pub fn write_hdr(path: &Path, img: &Tensor<f32>) -> Result<()> {
    match extension(path).as_str() {
        "pfm" => write_pfm(path, img),
        "hdr" | "pic" | "rgbe" => write_rgbe(path, img),
        e => Err(PipelineError::Data(format!("{}: unknown HDR extension {e:?}", path.display()))),
    }
}
