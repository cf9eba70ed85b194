//! Windowed multi-head self-attention core with relative position bias and
//! an optional shifted-window region mask.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::numerics::nn::softmax_in_place;
use crate::numerics::{gemm, Graph, MatMut, MatRef, Real, Tensor, Var};

/// Index into the `(2w-1)² x heads` bias table for every token pair of a
/// `w x w` window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / window, i % window);
        for j in 0..t {
            let (yj, xj) = (j / window, j % window);
            idx.push((yi + window - 1 - yj) * span + (xi + window - 1 - xj));
        }
    }
    idx
}

/// Static description of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub window: usize,
    /// Region label per token in window order; tokens attend only within the
    /// same label.
    pub labels: Option<Rc<Vec<u32>>>,
}

struct Dims {
    windows: usize,
    tokens: usize,
    channels: usize,
    head_dim: usize,
}

fn dims<T: Real>(qkv: &Tensor<T>, bias: &Tensor<T>, spec: &AttentionSpec) -> Result<Dims> {
    let tokens = spec.window * spec.window;
    let c3 = qkv.channels();
    ensure!(c3 % 3 == 0, "qkv width {c3} is not a multiple of 3");
    let channels = c3 / 3;
    ensure!(spec.heads > 0 && channels % spec.heads == 0, "{channels} channels not divisible by {} heads", spec.heads);
    let rows = qkv.rows();
    ensure!(rows % tokens == 0, "{rows} tokens do not fill windows of {tokens}");
    let span = 2 * spec.window - 1;
    ensure!(
        bias.shape() == [span * span, spec.heads],
        "relative bias must be [{}, {}], got {:?}",
        span * span,
        spec.heads,
        bias.shape()
    );
    if let Some(l) = &spec.labels {
        ensure!(l.len() == rows, "mask labels cover {} tokens, expected {rows}", l.len());
    }
    Ok(Dims { windows: rows / tokens, tokens, channels, head_dim: channels / spec.heads })
}

/// Forward pass; returns `[rows, C]` output and the attention probabilities
/// laid out `[window][head][i][j]`.
pub fn window_attention<T: Real>(
    qkv: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &AttentionSpec,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = dims(qkv, bias, spec)?;
    let (t, c, hd) = (d.tokens, d.channels, d.head_dim);
    let rel = relative_position_index(spec.window);
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let q = qkv.data();
    let bt = bias.data();
    let mut probs = vec![T::zero(); d.windows * spec.heads * t * t];
    let mut out = vec![T::zero(); d.windows * t * c];
    for n in 0..d.windows {
        let base = n * t * 3 * c;
        for h in 0..spec.heads {
            let p = &mut probs[(n * spec.heads + h) * t * t..][..t * t];
            gemm(
                MatRef::strided(&q[base + h * hd..], t, hd, 3 * c, 1),
                MatRef::strided(&q[base + c + h * hd..], t, hd, 3 * c, 1).t(),
                T::zero(),
                MatMut::new(p, t, t),
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                for j in 0..t {
                    row[j] = row[j] * scale + bt[rel[i * t + j] * spec.heads + h];
                }
                if let Some(labels) = &spec.labels {
                    let li = labels[n * t + i];
                    for j in 0..t {
                        if labels[n * t + j] != li {
                            row[j] = T::neg_infinity();
                        }
                    }
                }
                softmax_in_place(row);
            }
            gemm(
                MatRef::new(p, t, t),
                MatRef::strided(&q[base + 2 * c + h * hd..], t, hd, 3 * c, 1),
                T::zero(),
                MatMut::strided(&mut out[n * t * c + h * hd..], t, hd, c, 1),
            );
        }
    }
    let mut shape = qkv.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Ok((Tensor::new(&shape, out)?, probs))
}

impl<T: Real> Graph<T> {
    /// Differentiable [`window_attention`] w.r.t. `qkv` and the bias table.
    pub fn window_attention(&mut self, qkv: Var, bias: Var, spec: &AttentionSpec) -> Result<Var> {
        let d = dims(self.value(qkv), self.value(bias), spec)?;
        let (out, probs) = window_attention(self.value(qkv), self.value(bias), spec)?;
        let heads = spec.heads;
        let rel = relative_position_index(spec.window);
        Ok(self.push(
            "window_attention",
            out,
            vec![qkv, bias],
            Box::new(move |grad, p, _| {
                let (t, c, hd) = (d.tokens, d.channels, d.head_dim);
                let scale = T::lit(1.0 / (hd as f64).sqrt());
                let q = p[0].data();
                let g = grad.data();
                let mut dqkv = vec![T::zero(); q.len()];
                let mut dbias = vec![T::zero(); p[1].len()];
                let mut dp = vec![T::zero(); t * t];
                for n in 0..d.windows {
                    let base = n * t * 3 * c;
                    let gbase = n * t * c;
                    for h in 0..heads {
                        let pr = &probs[(n * heads + h) * t * t..][..t * t];
                        let dout = MatRef::strided(&g[gbase + h * hd..], t, hd, c, 1);
                        // dP = dO Vᵀ
                        gemm(
                            dout,
                            MatRef::strided(&q[base + 2 * c + h * hd..], t, hd, 3 * c, 1).t(),
                            T::zero(),
                            MatMut::new(&mut dp, t, t),
                        );
                        // dV = Pᵀ dO
                        gemm(
                            MatRef::new(pr, t, t).t(),
                            dout,
                            T::zero(),
                            MatMut::strided(&mut dqkv[base + 2 * c + h * hd..], t, hd, 3 * c, 1),
                        );
                        // dS = P ⊙ (dP - rowdot(dP, P)); masked entries have P = 0.
                        for i in 0..t {
                            let prow = &pr[i * t..(i + 1) * t];
                            let drow = &mut dp[i * t..(i + 1) * t];
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..t {
                                drow[j] = prow[j] * (drow[j] - dot);
                                dbias[rel[i * t + j] * heads + h] += drow[j];
                                drow[j] *= scale;
                            }
                        }
                        // dQ = dS K, dK = dSᵀ Q (scale folded into dS).
                        gemm(
                            MatRef::new(&dp, t, t),
                            MatRef::strided(&q[base + c + h * hd..], t, hd, 3 * c, 1),
                            T::zero(),
                            MatMut::strided(&mut dqkv[base + h * hd..], t, hd, 3 * c, 1),
                        );
                        gemm(
                            MatRef::new(&dp, t, t).t(),
                            MatRef::strided(&q[base + h * hd..], t, hd, 3 * c, 1),
                            T::zero(),
                            MatMut::strided(&mut dqkv[base + c + h * hd..], t, hd, 3 * c, 1),
                        );
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape(), dqkv).expect("attention dqkv")),
                    Some(Tensor::new(p[1].shape(), dbias).expect("attention dbias")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_is_centered() {
        let idx = relative_position_index(2);
        // Same token -> centre of the 3x3 table.
        assert_eq!(idx[0], 4);
        // Token 0 vs token 3 (dy=-1, dx=-1) -> (0, 0).
        assert_eq!(idx[3], 0);
        assert_eq!(idx[3 * 4], 8);
    }

    #[test]
    fn single_token_window_passes_values_through() {
        let qkv = Tensor::<f64>::from_fn(&[3, 1, 6], |i| i as f64);
        let bias = Tensor::<f64>::zeros(&[1, 2]);
        let spec = AttentionSpec { heads: 2, window: 1, labels: None };
        let (out, probs) = window_attention(&qkv, &bias, &spec).unwrap();
        assert!(probs.iter().all(|&p| p == 1.0));
        for n in 0..3 {
            for j in 0..2 {
                assert_eq!(out.at(&[n, 0, j]), qkv.at(&[n, 0, 4 + j]));
            }
        }
    }
}
