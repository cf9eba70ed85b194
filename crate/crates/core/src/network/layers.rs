//! Layer definitions and their composition into the full fusion network.
//!
//! [`Architecture`] lists every parameter (name, shape, initializer) in a
//! fixed order and remembers which index each layer uses; the forward pass
//! is generic over the float type so the same code runs in `f32` for
//! training and `f64` for gradient checks.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::network::params::{Init, ParamSpec};
use crate::network::NetworkConfig;
use crate::numerics::{
    crop_table, reflect_pad_table, AttentionSpec, Graph, Real, ShuffleDirection, Var, WindowLayout,
};

const ATTN_STD: f64 = 0.02;
const DEFORM_TAPS: usize = 9;

#[derive(Default)]
struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        self.conv_init(name, cin, cout, k, Init::FanIn(cin * k * k))
    }

    fn conv_init(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Conv {
        let w = self.add(format!("{name}.weight"), vec![cout, cin, k, k], init);
        let b = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        Conv { w, b, k }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, init: Init) -> Linear {
        let w = self.add(format!("{name}.weight"), vec![cout, cin], init);
        let b = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let scale = self.add(format!("{name}.scale"), vec![c], Init::Ones);
        let shift = self.add(format!("{name}.shift"), vec![c], Init::Zeros);
        Norm { scale, shift }
    }

    fn block(&mut self, name: &str, cfg: &NetworkConfig, c: usize, heads: usize, shifted: bool) -> Block {
        let span = 2 * cfg.window - 1;
        let hidden = cfg.mlp_hidden(c);
        Block {
            norm1: self.norm(&format!("{name}.norm1"), c),
            qkv: self.linear(&format!("{name}.attn.qkv"), c, 3 * c, Init::TruncNormal(ATTN_STD)),
            rel_bias: self.add(format!("{name}.attn.rel_bias"), vec![span * span, heads], Init::TruncNormal(ATTN_STD)),
            proj: self.linear(&format!("{name}.attn.proj"), c, c, Init::Zeros),
            norm2: self.norm(&format!("{name}.norm2"), c),
            fc1: self.linear(&format!("{name}.mlp.fc1"), c, hidden, Init::TruncNormal(ATTN_STD)),
            fc2: self.linear(&format!("{name}.mlp.fc2"), hidden, c, Init::Zeros),
            heads,
            shifted,
        }
    }

    fn blocks(&mut self, prefix: &str, cfg: &NetworkConfig, count: usize, c: usize, heads: usize) -> Vec<Block> {
        (0..count).map(|j| self.block(&format!("{prefix}.block{j}"), cfg, c, heads, j % 2 == 1)).collect()
    }

    fn expo_share(&mut self, name: &str, width: usize) -> ExpoShare {
        let deform = (0..3)
            .map(|i| DeformConv {
                offset: self.conv_init(&format!("{name}.deform{i}.offset"), width, 2 * DEFORM_TAPS, 3, Init::Zeros),
                conv: self.conv(&format!("{name}.deform{i}"), width, width, 3),
            })
            .collect();
        let point = (0..3).map(|i| self.conv(&format!("{name}.point{i}"), width, width, 1)).collect();
        ExpoShare { deform, point }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub scale: usize,
    pub shift: usize,
}

/// Pre-norm transformer block: windowed attention then MLP, each residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub rel_bias: usize,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    /// Odd blocks of a stage use cyclically shifted windows.
    pub shifted: bool,
}

#[derive(Clone, Debug)]
pub struct DeformConv {
    pub offset: Conv,
    pub conv: Conv,
}

/// Cross-exposure exchange: three deformable 3x3 convs, three 1x1 convs.
#[derive(Clone, Debug)]
pub struct ExpoShare {
    pub deform: Vec<DeformConv>,
    pub point: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: NetworkConfig,
    pub shallow: Conv,
    pub encoder: Vec<Vec<Block>>,
    pub down: Vec<Conv>,
    pub expo_share: Vec<ExpoShare>,
    pub merge: Conv,
    pub up: Vec<Conv>,
    /// 1x1 conv over `[upsampled, skip_1 .. skip_n]`, indexed by level.
    pub fuse: Vec<Conv>,
    pub decoder: Vec<Vec<Block>>,
    pub refine: Vec<Block>,
    pub head: Conv,
    pub specs: Vec<ParamSpec>,
}

impl Architecture {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_exposures;
        let top = cfg.levels - 1;
        let mut r = Registry::default();
        let shallow = r.conv("encoder.shallow", 6, cfg.channels(0), 3);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            let p = format!("encoder.level{l}");
            encoder.push(r.blocks(&p, cfg, cfg.blocks_per_level[l], c, cfg.heads_per_level[l]));
            if l < top {
                down.push(r.conv(&format!("{p}.down"), c, c / 2, 3));
            }
        }
        let expo_share = (0..cfg.levels).map(|l| r.expo_share(&format!("expo_share.level{l}"), n * cfg.channels(l))).collect();
        let merge = r.conv("fusion.merge", n * cfg.channels(top), cfg.channels(top), 1);
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..top {
            let c = cfg.channels(l);
            let p = format!("decoder.level{l}");
            up.push(r.conv(&format!("{p}.up"), 2 * c, 4 * c, 3));
            fuse.push(r.conv(&format!("{p}.fuse"), (n + 1) * c, c, 1));
            decoder.push(r.blocks(&p, cfg, cfg.blocks_per_level[l], c, cfg.heads_per_level[l]));
        }
        let refine = r.blocks("refine", cfg, cfg.refinement_blocks, cfg.channels(0), cfg.heads_per_level[0]);
        let head = r.conv("head", cfg.channels(0), 3, 3);
        Ok(Self {
            config: cfg.clone(),
            shallow,
            encoder,
            down,
            expo_share,
            merge,
            up,
            fuse,
            decoder,
            refine,
            head,
            specs: r.specs,
        })
    }

    /// Runs the network on `J_1 .. J_n` (each `H x W x 6`); `p[i]` is the
    /// graph variable of parameter `i`. Returns the clamped `H x W x 3` output.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], inputs: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        ensure!(p.len() == self.specs.len(), "expected {} parameters, got {}", self.specs.len(), p.len());
        ensure!(
            inputs.len() == cfg.num_exposures,
            "network expects {} exposures, got {}",
            cfg.num_exposures,
            inputs.len()
        );
        let shape = g.value(inputs[0]).hwc()?;
        for &x in inputs {
            ensure!(g.value(x).hwc()? == shape, "exposure shapes differ: {:?} vs {:?}", g.value(x).shape(), shape);
        }
        let (h, w, c) = shape;
        ensure!(c == 6, "network inputs need 6 channels, got {c}");
        let m = cfg.pad_multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let pad = reflect_pad_table((h, w, c), hp, wp)?;

        let mut feats = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let x = if (hp, wp) == (h, w) { x } else { g.gather(x, &pad)? };
            feats.push(conv(g, p, self.shallow, x)?);
        }

        let top = cfg.levels - 1;
        let mut skips = Vec::with_capacity(top);
        for l in 0..cfg.levels {
            for f in &mut feats {
                for b in &self.encoder[l] {
                    *f = block(g, p, cfg, b, *f)?;
                }
            }
            let shared = expo_share(g, p, &self.expo_share[l], &feats)?;
            for (f, s) in feats.iter_mut().zip(shared) {
                *f = g.add(*f, s)?;
            }
            if l < top {
                skips.push(feats.clone());
                for f in &mut feats {
                    let y = conv(g, p, self.down[l], *f)?;
                    *f = g.pixel_shuffle(y, 2, ShuffleDirection::Down)?;
                }
            }
        }
        let cat = g.concat(&feats)?;
        let mut x = conv(g, p, self.merge, cat)?;
        for l in (0..top).rev() {
            let y = conv(g, p, self.up[l], x)?;
            let y = g.pixel_shuffle(y, 2, ShuffleDirection::Up)?;
            let mut parts = vec![y];
            parts.extend_from_slice(&skips[l]);
            let cat = g.concat(&parts)?;
            x = conv(g, p, self.fuse[l], cat)?;
            for b in &self.decoder[l] {
                x = block(g, p, cfg, b, x)?;
            }
        }
        for b in &self.refine {
            x = block(g, p, cfg, b, x)?;
        }
        let mut out = conv(g, p, self.head, x)?;
        if (hp, wp) != (h, w) {
            out = g.gather(out, &crop_table((hp, wp, 3), h, w)?)?;
        }
        Ok(g.clamp_min_zero(out))
    }
}

fn conv<T: Real>(g: &mut Graph<T>, p: &[Var], c: Conv, x: Var) -> Result<Var> {
    g.conv2d(x, p[c.w], p[c.b], 1, c.k / 2)
}

fn linear<T: Real>(g: &mut Graph<T>, p: &[Var], l: Linear, x: Var) -> Result<Var> {
    g.linear(x, p[l.w], p[l.b])
}

/// One transformer block on an `h x w x C` map. The shift is dropped when a
/// single window already covers the map.
pub fn block<T: Real>(g: &mut Graph<T>, p: &[Var], cfg: &NetworkConfig, b: &Block, x: Var) -> Result<Var> {
    let (h, w, c) = g.value(x).hwc()?;
    let shift = if b.shifted && h.min(w) > cfg.window { cfg.shift } else { 0 };
    let layout = WindowLayout::new(h, w, cfg.window, shift)?;
    let spec = AttentionSpec { heads: b.heads, window: cfg.window, labels: layout.region_labels().map(Rc::new) };

    let y = g.layer_norm(x, p[b.norm1.scale], p[b.norm1.shift])?;
    let y = g.gather(y, &layout.partition_table(c))?;
    let y = linear(g, p, b.qkv, y)?;
    let y = g.window_attention(y, p[b.rel_bias], &spec)?;
    let y = linear(g, p, b.proj, y)?;
    let y = g.gather(y, &layout.merge_table(c))?;
    let x = g.add(x, y)?;

    let y = g.layer_norm(x, p[b.norm2.scale], p[b.norm2.shift])?;
    let y = linear(g, p, b.fc1, y)?;
    let y = g.gelu(y);
    let y = linear(g, p, b.fc2, y)?;
    g.add(x, y)
}

/// Expo-Share on per-exposure features; returns the per-exposure updates
/// (the caller adds them back as residuals).
pub fn expo_share<T: Real>(g: &mut Graph<T>, p: &[Var], e: &ExpoShare, feats: &[Var]) -> Result<Vec<Var>> {
    let shape = g.value(feats[0]).shape().to_vec();
    for &f in feats {
        ensure!(g.value(f).shape() == shape.as_slice(), "Expo-Share inputs differ in shape");
    }
    let mut x = g.concat(feats)?;
    for d in &e.deform {
        let off = conv(g, p, d.offset, x)?;
        x = g.deform_conv2d(x, off, p[d.conv.w], p[d.conv.b])?;
        x = g.gelu(x);
    }
    for (i, &pc) in e.point.iter().enumerate() {
        x = conv(g, p, pc, x)?;
        if i + 1 < e.point.len() {
            x = g.gelu(x);
        }
    }
    g.split(x, feats.len())
}
