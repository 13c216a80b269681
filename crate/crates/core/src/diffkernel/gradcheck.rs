//! Central finite-difference checking of tape gradients.

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub input: usize,
    /// `max|analytic - numeric| / max(max|numeric|, floor)`.
    pub rel_err: f64,
    pub max_abs_numeric: f64,
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` records a scalar loss from the given leaves. Every input is
/// treated as tracked. `step` is the finite-difference half-width.
pub fn check<R: Real>(
    inputs: &[Tensor<R>],
    step: f64,
    build: impl Fn(&mut Graph<R>, &[Var]) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let eval = |values: &[Tensor<R>], track: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                t.zero_grad();
                g.leaf(t)
            })
            .collect();
        let out = build(&mut g, &vars)?;
        let loss = g.value(out).item()?.as_f64();
        let mut grads = Vec::new();
        if track {
            g.backward(out)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(match g.grad(*v) {
                    Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                    None => vec![0.0; t.numel()],
                });
            }
        }
        Ok((loss, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.to_vec();
            let base = input.data()[j].as_f64();
            probe[i].data_mut()[j] = R::lit(base + step);
            let (plus, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = R::lit(base - step);
            let (minus, _) = eval(&probe, false)?;
            *slot = (plus - minus) / (2.0 * step);
        }
        let max_abs_numeric = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_diff = numeric
            .iter()
            .zip(&analytic[i])
            .fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
        report.push(GradCheck {
            input: i,
            rel_err: max_diff / max_abs_numeric.max(1e-8),
            max_abs_numeric,
        });
    }
    Ok(report)
}

/// Largest relative error across all inputs of a check.
pub fn worst(report: &[GradCheck]) -> f64 {
    report.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}
