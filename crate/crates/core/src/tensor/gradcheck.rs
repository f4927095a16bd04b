//! Central finite-difference oracle for tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Gradients below this magnitude are compared absolutely.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central differences of a scalar function of a flat vector.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares backward-pass gradients of `f` against central differences for
/// every element of every input. `f` must build a scalar loss.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    };

    let eval = |which: usize, data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    tape.constant(&Tensor::new(t.shape().to_vec(), data.to_vec()).expect("same shape"))
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (which, t) in inputs.iter().enumerate() {
        let mut probe = t.data().to_vec();
        for e in 0..probe.len() {
            let x0 = probe[e];
            probe[e] = x0 + h;
            let up = eval(which, &probe)?;
            probe[e] = x0 - h;
            let down = eval(which, &probe)?;
            probe[e] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
