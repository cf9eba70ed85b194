//! Pure index permutations on channels-last images: pixel (un)shuffle, shifted
//! window partitioning, reflect padding and cropping.
//!
//! Each rearrangement is expressed as a gather table `out[i] = in[table[i]]`,
//! so the same table drives the plain tensor function and the differentiable
//! graph op (whose backward is the matching scatter-add).

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Direction of a pixel shuffle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShuffleDirection {
    /// `H x W x C -> H/r x W/r x C r²` (pixel unshuffle).
    Down,
    /// `H x W x C -> H r x W r x C/r²` (pixel shuffle).
    Up,
}

/// A gather table together with the output shape it produces.
#[derive(Clone, Debug)]
pub struct Gather {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub table: Rc<Vec<usize>>,
}

impl Gather {
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            x.shape() == self.in_shape.as_slice(),
            "gather expects input {:?}, got {:?}",
            self.in_shape,
            x.shape()
        );
        let src = x.data();
        Tensor::new(&self.out_shape, self.table.iter().map(|&i| src[i]).collect())
    }
}

/// Output channel for sub-position `(dy, dx)` of input channel `c` is
/// `c * r² + dy * r + dx`.
pub fn pixel_shuffle_table(shape: (usize, usize, usize), r: usize, dir: ShuffleDirection) -> Result<Gather> {
    let (h, w, c) = shape;
    ensure!(r >= 1, "shuffle factor must be positive");
    let rr = r * r;
    match dir {
        ShuffleDirection::Down => {
            ensure!(h % r == 0 && w % r == 0, "pixel unshuffle: {h}x{w} not divisible by {r}");
            let (oh, ow, oc) = (h / r, w / r, c * rr);
            let mut table = Vec::with_capacity(h * w * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                table.push(((oy * r + dy) * w + ox * r + dx) * c + ci);
                            }
                        }
                    }
                }
            }
            Ok(Gather { in_shape: vec![h, w, c], out_shape: vec![oh, ow, oc], table: Rc::new(table) })
        }
        ShuffleDirection::Up => {
            ensure!(c % rr == 0, "pixel shuffle: {c} channels not divisible by {rr}");
            let (oh, ow, oc) = (h * r, w * r, c / rr);
            let mut table = Vec::with_capacity(h * w * c);
            for y in 0..oh {
                for x in 0..ow {
                    for co in 0..oc {
                        let ic = co * rr + (y % r) * r + x % r;
                        table.push(((y / r) * w + x / r) * c + ic);
                    }
                }
            }
            Ok(Gather { in_shape: vec![h, w, c], out_shape: vec![oh, ow, oc], table: Rc::new(table) })
        }
    }
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize, dir: ShuffleDirection) -> Result<Tensor<T>> {
    pixel_shuffle_table(x.hwc()?, r, dir)?.apply(x)
}

/// Geometry of a (possibly shifted) window partition of an `h x w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        ensure!(window >= 1, "window must be positive");
        ensure!(
            height % window == 0 && width % window == 0,
            "{height}x{width} map not divisible by window {window}"
        );
        ensure!(shift < window, "shift {shift} must be smaller than window {window}");
        Ok(Self { height, width, window, shift })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Source pixel (row-major index into the unshifted map) of token `t` in
    /// window `n`.
    pub fn source_pixel(&self, n: usize, t: usize) -> usize {
        let wpr = self.width / self.window;
        let (wy, wx) = (n / wpr, n % wpr);
        let (ty, tx) = (t / self.window, t % self.window);
        let y = (wy * self.window + ty + self.shift) % self.height;
        let x = (wx * self.window + tx + self.shift) % self.width;
        y * self.width + x
    }

    /// Pixel index for every token, in window order.
    pub fn token_pixels(&self) -> Vec<usize> {
        let tpw = self.tokens_per_window();
        (0..self.num_windows() * tpw).map(|i| self.source_pixel(i / tpw, i % tpw)).collect()
    }

    /// Region label per token (window order) for the shifted-window attention
    /// mask: tokens may only attend to tokens with the same label. `None` when
    /// unshifted.
    pub fn region_labels(&self) -> Option<Vec<u32>> {
        if self.shift == 0 {
            return None;
        }
        let band = |v: usize, size: usize| -> u32 {
            if v < size - self.window {
                0
            } else if v < size - self.shift {
                1
            } else {
                2
            }
        };
        let tpw = self.tokens_per_window();
        let wpr = self.width / self.window;
        Some(
            (0..self.num_windows() * tpw)
                .map(|i| {
                    let (n, t) = (i / tpw, i % tpw);
                    // Coordinates in the shifted frame.
                    let y = (n / wpr) * self.window + t / self.window;
                    let x = (n % wpr) * self.window + t % self.window;
                    band(y, self.height) * 3 + band(x, self.width)
                })
                .collect(),
        )
    }

    /// `h x w x C -> (N w²) x C` gather in window order.
    pub fn partition_table(&self, channels: usize) -> Gather {
        let pix = self.token_pixels();
        let mut table = Vec::with_capacity(pix.len() * channels);
        for p in pix {
            table.extend((0..channels).map(|c| p * channels + c));
        }
        Gather {
            in_shape: vec![self.height, self.width, channels],
            out_shape: vec![self.num_windows(), self.tokens_per_window(), channels],
            table: Rc::new(table),
        }
    }

    /// Inverse of [`Self::partition_table`], undoing the cyclic shift.
    pub fn merge_table(&self, channels: usize) -> Gather {
        let pix = self.token_pixels();
        let mut inv = vec![0usize; pix.len()];
        for (tok, &p) in pix.iter().enumerate() {
            inv[p] = tok;
        }
        let mut table = Vec::with_capacity(pix.len() * channels);
        for tok in inv {
            table.extend((0..channels).map(|c| tok * channels + c));
        }
        Gather {
            in_shape: vec![self.num_windows(), self.tokens_per_window(), channels],
            out_shape: vec![self.height, self.width, channels],
            table: Rc::new(table),
        }
    }
}

/// Cyclically shifts by `shift` and splits into `N x w² x C` windows.
pub fn window_partition<T: Real>(x: &Tensor<T>, window: usize, shift: usize) -> Result<(Tensor<T>, WindowLayout)> {
    let (h, w, c) = x.hwc()?;
    let layout = WindowLayout::new(h, w, window, shift)?;
    Ok((layout.partition_table(c).apply(x)?, layout))
}

pub fn window_merge<T: Real>(windows: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let c = windows.channels();
    layout.merge_table(c).apply(windows)
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the bottom and right edges up to `(out_h, out_w)`.
pub fn reflect_pad_table(shape: (usize, usize, usize), out_h: usize, out_w: usize) -> Result<Gather> {
    let (h, w, c) = shape;
    ensure!(out_h >= h && out_w >= w, "reflect pad cannot shrink {h}x{w} to {out_h}x{out_w}");
    ensure!(h > 0 && w > 0, "cannot pad an empty image");
    let mut table = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = reflect_index(y, h);
        for x in 0..out_w {
            let sx = reflect_index(x, w);
            table.extend((0..c).map(|ci| (sy * w + sx) * c + ci));
        }
    }
    Ok(Gather { in_shape: vec![h, w, c], out_shape: vec![out_h, out_w, c], table: Rc::new(table) })
}

/// Keeps the top-left `out_h x out_w` region.
pub fn crop_table(shape: (usize, usize, usize), out_h: usize, out_w: usize) -> Result<Gather> {
    let (h, w, c) = shape;
    ensure!(out_h <= h && out_w <= w, "crop {out_h}x{out_w} larger than {h}x{w}");
    let mut table = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        for x in 0..out_w {
            table.extend((0..c).map(|ci| (y * w + x) * c + ci));
        }
    }
    Ok(Gather { in_shape: vec![h, w, c], out_shape: vec![out_h, out_w, c], table: Rc::new(table) })
}

/// Channel slice `[start, start + len)` of the trailing axis.
pub fn channel_slice_table(shape: &[usize], start: usize, len: usize) -> Result<Gather> {
    let c = *shape.last().unwrap_or(&0);
    ensure!(start + len <= c, "channel slice {start}+{len} exceeds {c}");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut table = Vec::with_capacity(rows * len);
    for r in 0..rows {
        table.extend((start..start + len).map(|ci| r * c + ci));
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = len;
    Ok(Gather { in_shape: shape.to_vec(), out_shape, table: Rc::new(table) })
}

impl<T: Real> Graph<T> {
    /// Differentiable gather; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, g: &Gather) -> Result<Var> {
        let out = g.apply(self.value(x))?;
        let table = Rc::clone(&g.table);
        let in_shape = g.in_shape.clone();
        Ok(self.push(
            "gather",
            out,
            vec![x],
            Box::new(move |grad, _, _| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for (&src, &gv) in table.iter().zip(grad.data()) {
                    d[src] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize, dir: ShuffleDirection) -> Result<Var> {
        let table = pixel_shuffle_table(self.value(x).hwc()?, r, dir)?;
        self.gather(x, &table)
    }

    /// Concatenates along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.channels()).collect();
        let out = Tensor::concat_channels(&values)?;
        Ok(self.push(
            "concat",
            out,
            parts.to_vec(),
            Box::new(move |grad, _, needs| {
                let pieces = grad.split_channels(&widths).expect("concat grad split");
                pieces.into_iter().zip(needs).map(|(p, &n)| n.then_some(p)).collect()
            }),
        ))
    }

    /// Splits the trailing axis into equal parts.
    pub fn split(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap_or(&0);
        ensure!(parts > 0 && c % parts == 0, "cannot split {c} channels into {parts} parts");
        let width = c / parts;
        (0..parts)
            .map(|i| {
                let t = channel_slice_table(&shape, i * width, width)?;
                self.gather(x, &t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshuffle_2x2_orders_subpositions() {
        let x = Tensor::<f32>::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2, ShuffleDirection::Down).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_rejects_bad_divisibility() {
        let x = Tensor::<f32>::zeros(&[3, 4, 2]);
        assert!(pixel_shuffle(&x, 2, ShuffleDirection::Down).is_err());
        assert!(pixel_shuffle(&x, 2, ShuffleDirection::Up).is_err());
    }

    #[test]
    fn unshifted_single_window_is_flattened_input() {
        let x = Tensor::<f32>::from_fn(&[8, 8, 3], |i| i as f32);
        let (win, layout) = window_partition(&x, 8, 0).unwrap();
        assert_eq!(layout.num_windows(), 1);
        assert_eq!(win.shape(), &[1, 64, 3]);
        assert_eq!(win.data(), x.data());
    }

    #[test]
    fn window_rejects_invalid_geometry() {
        let x = Tensor::<f32>::zeros(&[12, 8, 1]);
        assert!(window_partition(&x, 8, 0).is_err());
        let x = Tensor::<f32>::zeros(&[8, 8, 1]);
        assert!(window_partition(&x, 8, 8).is_err());
    }

    #[test]
    fn region_labels_separate_wrapped_pixels() {
        let layout = WindowLayout::new(16, 16, 8, 4).unwrap();
        let labels = layout.region_labels().unwrap();
        // First window (top-left, shifted frame) lies entirely in band 0.
        assert!(labels[..64].iter().all(|&l| l == 0));
        // Last window mixes all four bottom-right regions.
        let last: std::collections::BTreeSet<u32> = labels[3 * 64..].iter().copied().collect();
        assert_eq!(last.len(), 4);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::<f32>::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = reflect_pad_table((1, 3, 1), 1, 7).unwrap().apply(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
    }
}
