//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per input (chosen at random);
    /// `None` probes every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error. Raise it above the
    /// finite-difference round-off (about `ulp(f) / eps`) when some
    /// gradients are exactly zero.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_input: None, seed: 0, abs_floor: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` at the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub probes: usize,
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `Σ r ⊙ f(inputs)` (with `r` a fixed random
/// projection) against central differences over the input coordinates.
pub fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], projection: Option<&Tensor<f64>>| -> Result<(Graph<f64>, Vec<Var>, Var, Tensor<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite(format!("grad_check probe of {name}")));
        }
        let r = match projection {
            Some(r) => r.clone(),
            None => {
                let mut rng = rng::seeded(rng::derive_seed(opts.seed, 0x9a));
                Tensor::from_fn(g.value(out).shape(), |_| StandardNormal.sample(&mut rng))
            }
        };
        let s = g.dot_const(out, &r)?;
        Ok((g, vars, s, r))
    };

    let (g, vars, s, r) = eval(inputs, None)?;
    let grads = g.backward(s)?;
    let mut report = GradCheckReport { op: name.to_string(), max_rel_error: 0.0, worst: None, probes: 0 };
    let mut pick = rng::seeded(rng::derive_seed(opts.seed, 0x5e1));
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < input.len() => {
                let mut c = sample(&mut pick, input.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += opts.eps;
            let (gp, _, sp, _) = eval(&probe, Some(&r))?;
            let fp = gp.value(sp).data()[0];
            probe[i].data_mut()[j] = input.data()[j] - opts.eps;
            let (gm, _, sm, _) = eval(&probe, Some(&r))?;
            let fm = gm.value(sm).data()[0];
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, opts.abs_floor);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
