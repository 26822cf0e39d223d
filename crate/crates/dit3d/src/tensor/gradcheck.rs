//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

/// Compares the tape gradient of a scalar loss against central differences
/// with the given step. `build` must construct the loss from leaves that
/// mirror `inputs` in order and shape; it is re-invoked on fresh tapes for
/// every probe, so it has to be deterministic.
pub fn grad_check(
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }

    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(data)
            .map(|((shape, _), d)| tape.leaf(shape, d.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        tape.scalar_value(loss)
    };

    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(shape, data.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract("grad_check loss must be scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, data))| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; data.len()])
        })
        .collect();

    let mut probe: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_entry: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries: 0,
    };
    for (ii, (_, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let orig = probe[ii][ei];
            probe[ii][ei] = orig + eps;
            let fp = eval(&probe)?;
            probe[ii][ei] = orig - eps;
            let fm = eval(&probe)?;
            probe[ii][ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ii][ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.entries += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ii;
                report.worst_entry = ei;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
