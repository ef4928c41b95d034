//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! with [`Graph::backward`]. Relative error per entry is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, input: usize, entry: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((input, entry, analytic, numeric));
        }
    }
}

pub(crate) fn entries(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks `build`'s scalar output against finite differences w.r.t. every input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], opts: &GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in entries(inputs[i].numel(), opts.max_entries) {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(i, j, analytic.data()[j], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Checks a flat gradient against finite differences of `loss` at the chosen entries.
pub fn check_flat<F>(loss: F, theta: &[f64], analytic: &[f64], opts: &GradCheck) -> Result<GradReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut report = GradReport::default();
    let mut work = theta.to_vec();
    for j in entries(theta.len(), opts.max_entries) {
        work[j] = theta[j] + opts.step;
        let up = loss(&work)?;
        work[j] = theta[j] - opts.step;
        let down = loss(&work)?;
        work[j] = theta[j];
        report.record(0, j, analytic[j], (up - down) / (2.0 * opts.step), opts.floor);
    }
    Ok(report)
}
