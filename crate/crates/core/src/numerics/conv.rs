//! 2-D convolution, deformable convolution and bilinear sampling on
//! channels-last images.
//!
//! Both convolutions lower to a column matrix of shape `[pixels, k² Cin]`
//! whose inner index is `tap * Cin + ci`, followed by one GEMM against the
//! weight permuted from `Cout x Cin x k x k` to `Cout x k² x Cin`.

use crate::error::{ensure, Result};
use crate::numerics::{gemm, Graph, MatMut, MatRef, Real, Tensor, Var};

/// Static geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [in_h, in_w, cin] = input[..] else {
            return Err(crate::Error::Contract(format!("conv input must be H x W x C, got {input:?}")));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(crate::Error::Contract(format!("conv weight must be Cout x Cin x k x k, got {weight:?}")));
        };
        ensure!(wcin == cin, "conv weight expects {wcin} input channels, input has {cin}");
        ensure!(kh == kw && kh % 2 == 1, "conv kernel must be square and odd, got {kh}x{kw}");
        ensure!(bias == [cout], "conv bias must have shape [{cout}], got {bias:?}");
        ensure!(stride >= 1, "conv stride must be positive");
        ensure!(
            in_h + 2 * pad >= kh && in_w + 2 * pad >= kw,
            "conv input {in_h}x{in_w} (pad {pad}) smaller than kernel {kh}"
        );
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Ok(Self { in_h, in_w, cin, cout, k: kh, stride, pad, out_h, out_w })
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_width(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `Cout x Cin x k x k -> Cout x (k² Cin)` with inner index `tap * Cin + ci`.
fn permute_weight<T: Real>(w: &[T], cout: usize, cin: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for tap in 0..kk {
                out[co * kk * cin + tap * cin + ci] = w[(co * cin + ci) * kk + tap];
            }
        }
    }
    out
}

fn unpermute_weight<T: Real>(wp: &[T], cout: usize, cin: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wp.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for tap in 0..kk {
                out[(co * cin + ci) * kk + tap] = wp[co * kk * cin + tap * cin + ci];
            }
        }
    }
    out
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, cin) = (g.k, g.cin);
    let width = g.col_width();
    let mut cols = vec![T::zero(); g.pixels() * width];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * width..][..width];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * cin;
                    let tap = ky * k + kx;
                    row[tap * cin..(tap + 1) * cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, cin) = (g.k, g.cin);
    let width = g.col_width();
    let mut dx = vec![T::zero(); g.in_h * g.in_w * cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &dcols[(oy * g.out_w + ox) * width..][..width];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * cin;
                    let tap = ky * k + kx;
                    for (d, &s) in dx[dst..dst + cin].iter_mut().zip(&row[tap * cin..(tap + 1) * cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

/// `out = cols * wpᵀ + bias`.
fn project<T: Real>(cols: &[T], wp: &[T], bias: &[T], pixels: usize, width: usize, cout: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(pixels * cout);
    for _ in 0..pixels {
        out.extend_from_slice(bias);
    }
    gemm(
        MatRef::new(cols, pixels, width),
        MatRef::new(wp, cout, width).t(),
        T::one(),
        MatMut::new(&mut out, pixels, cout),
    );
    out
}

/// Gradients of `project` for weight (unpermuted) and bias, plus the column
/// gradient when requested.
fn project_backward<T: Real>(
    grad: &[T],
    cols: &[T],
    wp: &[T],
    geom: (usize, usize, usize, usize),
    need_cols: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let (pixels, cout, cin, kk) = geom;
    let width = kk * cin;
    let mut dwp = vec![T::zero(); cout * width];
    gemm(
        MatRef::new(grad, pixels, cout).t(),
        MatRef::new(cols, pixels, width),
        T::zero(),
        MatMut::new(&mut dwp, cout, width),
    );
    let mut db = vec![T::zero(); cout];
    for row in grad.chunks_exact(cout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let dcols = need_cols.then(|| {
        let mut dcols = vec![T::zero(); pixels * width];
        gemm(
            MatRef::new(grad, pixels, cout),
            MatRef::new(wp, cout, width),
            T::zero(),
            MatMut::new(&mut dcols, pixels, width),
        );
        dcols
    });
    (unpermute_weight(&dwp, cout, cin, kk), db, dcols)
}

/// Cross-correlation of an `H x W x Cin` image with a `Cout x Cin x k x k`
/// kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let wp = permute_weight(weight.data(), g.cout, g.cin, g.k * g.k);
    let out = if g.is_pointwise() {
        project(input.data(), &wp, bias.data(), g.pixels(), g.col_width(), g.cout)
    } else {
        let cols = im2col(input.data(), &g);
        project(&cols, &wp, bias.data(), g.pixels(), g.col_width(), g.cout)
    };
    Tensor::new(&[g.out_h, g.out_w, g.cout], out)
}

/// Samples every channel of an `H x W x C` map at fractional `(y, x)` with
/// bilinear interpolation; positions outside the map read as zero.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, y: T, x: T) -> Result<Vec<T>> {
    let (h, w, c) = map.hwc()?;
    let mut out = vec![T::zero(); c];
    let s = BilinearTap::new(y, x, h, w);
    s.accumulate(map.data(), c, &mut out);
    Ok(out)
}

/// Four-corner bilinear stencil with zero padding.
#[derive(Clone, Copy, Debug)]
struct BilinearTap<T> {
    /// Pixel offsets of corners (00, 01, 10, 11), `None` if outside.
    corners: [Option<usize>; 4],
    fy: T,
    fx: T,
}

impl<T: Real> BilinearTap<T> {
    fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0.as_f64(), x0.as_f64());
        let at = |yy: f64, xx: f64| -> Option<usize> {
            (yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64).then(|| yy as usize * w + xx as usize)
        };
        Self { corners: [at(y0, x0), at(y0, x0 + 1.0), at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0)], fy, fx }
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [(one - self.fy) * (one - self.fx), (one - self.fy) * self.fx, self.fy * (one - self.fx), self.fy * self.fx]
    }

    fn accumulate(&self, map: &[T], c: usize, out: &mut [T]) {
        for (corner, wt) in self.corners.iter().zip(self.weights()) {
            if let Some(p) = corner {
                if wt != T::zero() {
                    for (o, &v) in out.iter_mut().zip(&map[p * c..(p + 1) * c]) {
                        *o += wt * v;
                    }
                }
            }
        }
    }

    fn corner_value(&self, map: &[T], c: usize, idx: usize, ci: usize) -> T {
        self.corners[idx].map_or(T::zero(), |p| map[p * c + ci])
    }
}

/// Geometry of a deformable convolution: stride 1, "same" padding.
fn deform_geometry<T: Real>(x: &Tensor<T>, offsets: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<ConvGeometry> {
    let k = weight.shape().get(2).copied().unwrap_or(0);
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), 1, k / 2)?;
    ensure!(
        offsets.shape() == [g.out_h, g.out_w, 2 * g.k * g.k],
        "deformable offsets must be {}x{}x{}, got {:?}",
        g.out_h,
        g.out_w,
        2 * g.k * g.k,
        offsets.shape()
    );
    Ok(g)
}

fn deform_taps<T: Real>(offsets: &[T], g: &ConvGeometry) -> Vec<BilinearTap<T>> {
    let kk = g.k * g.k;
    let mut taps = Vec::with_capacity(g.pixels() * kk);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let off = &offsets[(oy * g.out_w + ox) * 2 * kk..][..2 * kk];
            for tap in 0..kk {
                let (ky, kx) = (tap / g.k, tap % g.k);
                let y = T::lit(oy as f64 + ky as f64 - g.pad as f64) + off[2 * tap];
                let x = T::lit(ox as f64 + kx as f64 - g.pad as f64) + off[2 * tap + 1];
                taps.push(BilinearTap::new(y, x, g.in_h, g.in_w));
            }
        }
    }
    taps
}

fn deform_cols<T: Real>(x: &[T], taps: &[BilinearTap<T>], g: &ConvGeometry) -> Vec<T> {
    let cin = g.cin;
    let mut cols = vec![T::zero(); g.pixels() * g.col_width()];
    for (i, tap) in taps.iter().enumerate() {
        tap.accumulate(x, cin, &mut cols[i * cin..(i + 1) * cin]);
    }
    cols
}

/// Deformable 3x3 (any odd k) convolution: tap `k` at output `p` reads
/// `x(p + p_k + Δp_k(p))`, where `offsets[p]` holds `(Δy, Δx)` pairs per tap.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = deform_geometry(x, offsets, weight, bias)?;
    let taps = deform_taps(offsets.data(), &g);
    let cols = deform_cols(x.data(), &taps, &g);
    let wp = permute_weight(weight.data(), g.cout, g.cin, g.k * g.k);
    Tensor::new(&[g.out_h, g.out_w, g.cout], project(&cols, &wp, bias.data(), g.pixels(), g.col_width(), g.cout))
}

impl<T: Real> Graph<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let g = ConvGeometry::new(xv.shape(), wv.shape(), bv.shape(), stride, padding)?;
        let kk = g.k * g.k;
        let wp = permute_weight(wv.data(), g.cout, g.cin, kk);
        let cols = if g.is_pointwise() { None } else { Some(im2col(xv.data(), &g)) };
        let out = project(
            cols.as_deref().unwrap_or(xv.data()),
            &wp,
            bv.data(),
            g.pixels(),
            g.col_width(),
            g.cout,
        );
        let out = Tensor::new(&[g.out_h, g.out_w, g.cout], out)?;
        Ok(self.push(
            "conv2d",
            out,
            vec![x, weight, bias],
            Box::new(move |grad, parents, needs| {
                let cols = cols.as_deref().unwrap_or(parents[0].data());
                let (dw, db, dcols) =
                    project_backward(grad.data(), cols, &wp, (g.pixels(), g.cout, g.cin, kk), needs[0]);
                let dx = dcols.map(|dc| {
                    let d = if g.is_pointwise() { dc } else { col2im(&dc, &g) };
                    Tensor::new(parents[0].shape(), d).expect("conv dx shape")
                });
                vec![
                    dx,
                    Some(Tensor::new(parents[1].shape(), dw).expect("conv dw shape")),
                    Some(Tensor::new(parents[2].shape(), db).expect("conv db shape")),
                ]
            }),
        ))
    }

    /// Deformable convolution with externally supplied offsets.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, ov, wv, bv) = (self.value(x), self.value(offsets), self.value(weight), self.value(bias));
        let g = deform_geometry(xv, ov, wv, bv)?;
        let kk = g.k * g.k;
        let taps = deform_taps(ov.data(), &g);
        let cols = deform_cols(xv.data(), &taps, &g);
        let wp = permute_weight(wv.data(), g.cout, g.cin, kk);
        let out = Tensor::new(
            &[g.out_h, g.out_w, g.cout],
            project(&cols, &wp, bv.data(), g.pixels(), g.col_width(), g.cout),
        )?;
        Ok(self.push(
            "deform_conv2d",
            out,
            vec![x, offsets, weight, bias],
            Box::new(move |grad, parents, needs| {
                let need_cols = needs[0] || needs[1];
                let (dw, db, dcols) = project_backward(grad.data(), &cols, &wp, (g.pixels(), g.cout, g.cin, kk), need_cols);
                let (mut dx, mut doff) = (None, None);
                if let Some(dcols) = dcols {
                    let cin = g.cin;
                    let xs = parents[0].data();
                    if needs[0] {
                        let mut d = vec![T::zero(); xs.len()];
                        for (i, tap) in taps.iter().enumerate() {
                            let gcol = &dcols[i * cin..(i + 1) * cin];
                            for (corner, wt) in tap.corners.iter().zip(tap.weights()) {
                                if let Some(p) = corner {
                                    for (dd, &gv) in d[p * cin..(p + 1) * cin].iter_mut().zip(gcol) {
                                        *dd += wt * gv;
                                    }
                                }
                            }
                        }
                        dx = Some(Tensor::new(parents[0].shape(), d).expect("deform dx shape"));
                    }
                    if needs[1] {
                        let mut d = vec![T::zero(); parents[1].len()];
                        let one = T::one();
                        for (i, tap) in taps.iter().enumerate() {
                            let gcol = &dcols[i * cin..(i + 1) * cin];
                            let (mut gy, mut gx) = (T::zero(), T::zero());
                            for (ci, &gv) in gcol.iter().enumerate() {
                                let v00 = tap.corner_value(xs, cin, 0, ci);
                                let v01 = tap.corner_value(xs, cin, 1, ci);
                                let v10 = tap.corner_value(xs, cin, 2, ci);
                                let v11 = tap.corner_value(xs, cin, 3, ci);
                                gy += gv * ((one - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                                gx += gv * ((one - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                            }
                            // taps are laid out pixel-major, tap-minor, matching offsets.
                            d[2 * i] = gy;
                            d[2 * i + 1] = gx;
                        }
                        doff = Some(Tensor::new(parents[1].shape(), d).expect("deform doffset shape"));
                    }
                }
                vec![
                    dx,
                    doff,
                    Some(Tensor::new(parents[2].shape(), dw).expect("deform dw shape")),
                    Some(Tensor::new(parents[3].shape(), db).expect("deform db shape")),
                ]
            }),
        ))
    }
}
