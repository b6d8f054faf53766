//! Central finite-difference checking of analytic gradients.
//!
//! The analytic side runs in the precision under test; the numeric side
//! always evaluates the same subgraph in `f64` so that the difference
//! quotient itself is not the limiting error term. Coordinates where the
//! quotient at `eps` and `eps / 2` disagree straddle a kink (ReLU, clamp)
//! and are skipped; elsewhere the two quotients are Richardson-extrapolated.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// A deterministic scalar-valued function of its leaf inputs.
pub trait Subgraph {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;

    /// Negate conv input gradients on the analytic side (sensitivity test).
    fn inject_fault(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, in `[1e-4, 1e-2]`.
    pub eps: f64,
    /// Coordinates sampled per input tensor (all of them if the tensor is smaller).
    pub samples_per_input: usize,
    /// Coordinates whose analytic gradient is at most this are not scored.
    pub min_grad: f64,
    /// Relative disagreement between the `eps` and `eps / 2` quotients above
    /// which a coordinate is treated as straddling a kink.
    pub kink_tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples_per_input: 50,
            min_grad: 1e-4,
            kink_tolerance: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates that entered the maximum.
    pub scored: usize,
    /// Coordinates below `min_grad`.
    pub small: usize,
    /// Coordinates straddling a non-differentiable point.
    pub kinks: usize,
    /// Any NaN on either side.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        !self.non_finite && self.scored > 0 && self.max_rel_error < tolerance
    }
}

fn evaluate<S: Subgraph>(sub: &S, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = sub.build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares analytic gradients in precision `T` against central differences.
pub fn grad_check<T: Real, S: Subgraph>(
    sub: &S,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut g = Graph::<T>::new();
    if sub.inject_fault() {
        g.inject_conv_sign_flip();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = sub.build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; input.len()],
        };
        let count = cfg.samples_per_input.min(input.len());
        for idx in sample(&mut rng, input.len(), count).into_iter() {
            let a = analytic[idx];
            let orig = input.data()[idx];
            let mut diff = |step: f64| -> Result<f64> {
                probe[k].data_mut()[idx] = orig + step;
                let plus = evaluate(sub, &probe)?;
                probe[k].data_mut()[idx] = orig - step;
                let minus = evaluate(sub, &probe)?;
                probe[k].data_mut()[idx] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = diff(cfg.eps)?;
            if !a.is_finite() || !numeric.is_finite() {
                report.non_finite = true;
                continue;
            }
            if a.abs() <= cfg.min_grad {
                report.small += 1;
                continue;
            }
            let half = diff(cfg.eps / 2.0)?;
            if relative_error(numeric, half) > cfg.kink_tolerance {
                report.kinks += 1;
                continue;
            }
            // Richardson extrapolation cancels the O(eps²) truncation term.
            let extrapolated = (4.0 * half - numeric) / 3.0;
            report.scored += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(a, extrapolated));
        }
    }
    Ok(report)
}
