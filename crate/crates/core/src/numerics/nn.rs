//! Dense-layer primitives and elementwise ops on the tape. All row-wise ops
//! act on the trailing axis.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{ensure, Result};
use crate::numerics::{gemm, Graph, MatMut, MatRef, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `y = x Wᵀ + b` over the trailing axis; `W` is `Cout x Cin`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cin, cout) = linear_dims(x, w, b)?;
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(
        MatRef::new(x.data(), rows, cin),
        MatRef::new(w.data(), cout, cin).t(),
        T::one(),
        MatMut::new(&mut out, rows, cout),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(&shape, out)
}

fn linear_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [cout, cin] = w.shape()[..] else {
        return Err(crate::Error::Contract(format!("linear weight must be 2-D, got {:?}", w.shape())));
    };
    ensure!(x.channels() == cin, "linear expects {cin} input features, got {}", x.channels());
    ensure!(b.shape() == [cout], "linear bias must be [{cout}], got {:?}", b.shape());
    Ok((x.rows(), cin, cout))
}

/// Normalizes each row to zero mean / unit variance, then scales and shifts.
pub fn layer_norm<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(layer_norm_stats(x, scale, shift, eps)?.0)
}

fn layer_norm_stats<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = x.channels();
    ensure!(scale.shape() == [c] && shift.shape() == [c], "layer_norm affine params must be [{c}]");
    let n = T::lit(c as f64);
    let eps = T::lit(eps);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for (r, row) in x.data().chunks_exact(c).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[r * c + j] = h;
            out[r * c + j] = h * scale.data()[j] + shift.data()[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, xhat, inv_std))
}

/// Row-wise softmax over the trailing axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape(), out).expect("softmax shape")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Exact (erf) GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

impl<T: Real> Graph<T> {
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), self.value(b))?;
        let (rows, cin, cout) = linear_dims(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(
            "linear",
            out,
            vec![x, w, b],
            Box::new(move |grad, p, needs| {
                let g = grad.data();
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * cin];
                    gemm(
                        MatRef::new(g, rows, cout),
                        MatRef::new(p[1].data(), cout, cin),
                        T::zero(),
                        MatMut::new(&mut d, rows, cin),
                    );
                    Tensor::new(p[0].shape(), d).expect("linear dx")
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); cout * cin];
                    gemm(
                        MatRef::new(g, rows, cout).t(),
                        MatRef::new(p[0].data(), rows, cin),
                        T::zero(),
                        MatMut::new(&mut d, cout, cin),
                    );
                    Tensor::new(p[1].shape(), d).expect("linear dw")
                });
                let db = needs[2].then(|| {
                    let mut d = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[cout], d).expect("linear db")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (out, xhat, inv_std) =
            layer_norm_stats(self.value(x), self.value(scale), self.value(shift), LAYER_NORM_EPS)?;
        let c = out.channels();
        Ok(self.push(
            "layer_norm",
            out,
            vec![x, scale, shift],
            Box::new(move |grad, p, needs| {
                let g = grad.data();
                let gamma = p[1].data();
                let n = T::lit(c as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = needs[0].then(|| vec![T::zero(); g.len()]);
                for (r, grow) in g.chunks_exact(c).enumerate() {
                    let hrow = &xhat[r * c..(r + 1) * c];
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let gh = grow[j] * gamma[j];
                        s1 += gh;
                        s2 += gh * hrow[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let is = inv_std[r];
                        for j in 0..c {
                            let gh = grow[j] * gamma[j];
                            dx[r * c + j] = is * (gh - s1 / n - hrow[j] * s2 / n);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(p[0].shape(), d).expect("ln dx")),
                    Some(Tensor::new(&[c], dgamma).expect("ln dgamma")),
                    Some(Tensor::new(&[c], dbeta).expect("ln dbeta")),
                ]
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(self.value(x));
        let probs = out.clone();
        let c = out.channels();
        self.push(
            "softmax",
            out,
            vec![x],
            Box::new(move |grad, p, _| {
                let mut d = vec![T::zero(); grad.len()];
                for ((drow, grow), prow) in
                    d.chunks_exact_mut(c).zip(grad.data().chunks_exact(c)).zip(probs.data().chunks_exact(c))
                {
                    let dot: T = grow.iter().zip(prow).map(|(&g, &q)| g * q).sum();
                    for j in 0..c {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), d).expect("softmax dx"))]
            }),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = gelu(self.value(x));
        self.push(
            "gelu",
            out,
            vec![x],
            Box::new(|grad, p, _| {
                let d = p[0].zip_map(grad, |x, g| g * gelu_grad(x)).expect("gelu shapes");
                vec![Some(d)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push("add", out, vec![a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            "sub",
            out,
            vec![a, b],
            Box::new(|g, _, needs| vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, vec![x], Box::new(move |g, _, _| vec![Some(g.map(|v| v * f))]))
    }

    /// `max(x, 0)`; the gradient passes where `x > 0`.
    pub fn clamp_min_zero(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(
            "clamp_min_zero",
            out,
            vec![x],
            Box::new(|g, p, _| {
                vec![Some(p[0].zip_map(g, |x, g| if x > T::zero() { g } else { T::zero() }).expect("clamp"))]
            }),
        )
    }

    /// Sum of squares, as a `[1]` scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(
            "sum_squares",
            Tensor::scalar(s),
            vec![x],
            Box::new(|g, p, _| {
                let two_g = T::lit(2.0) * g.data()[0];
                vec![Some(p[0].map(|v| two_g * v))]
            }),
        )
    }

    /// Euclidean norm of all elements, as a `[1]` scalar. The gradient at
    /// the origin is taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        self.push(
            "l2_norm",
            Tensor::scalar(n),
            vec![x],
            Box::new(move |g, p, _| {
                let f = if n > T::zero() { g.data()[0] / n } else { T::zero() };
                vec![Some(p[0].map(|v| f * v))]
            }),
        )
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            "sum_all",
            Tensor::scalar(s),
            vec![x],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]),
        )
    }

    /// `Σ x ⊙ r` against a constant tensor, as a `[1]` scalar.
    pub fn dot_const(&mut self, x: Var, r: &Tensor<T>) -> Result<Var> {
        ensure!(self.value(x).shape() == r.shape(), "dot_const shape mismatch");
        let s: T = self.value(x).data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum();
        let r = r.clone();
        Ok(self.push(
            "dot_const",
            Tensor::scalar(s),
            vec![x],
            Box::new(move |g, _, _| {
                let gv = g.data()[0];
                vec![Some(r.map(|v| v * gv))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_single_element_is_one() {
        let s = softmax(&Tensor::new(&[1, 1], vec![-3.7f64]).unwrap());
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f32>::from_fn(&[5, 7], |i| ((i * 31) % 11) as f32 - 5.0);
        let s = softmax(&x);
        for row in s.data().chunks_exact(7) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // 0.5 * (1 + erf(1/sqrt 2)) = Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0f64) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu_scalar(-1.0f64) + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = Tensor::<f64>::from_fn(&[3, 6], |i| (i as f64 * 1.3).cos() * 4.0 + 2.0);
        let y = layer_norm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 1e-6).unwrap();
        for row in y.data().chunks_exact(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
