//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_entry: usize,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of a scalar-valued graph against central differences.
///
/// `f` rebuilds the graph from the registered parameter handles each time it is
/// called. Disagreement is reported, not raised; errors only come from `f`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad_data(v).map_or_else(|| vec![0.0; p.len()], |g| g.to_vec()))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let n = params[pi].len();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut rep = ParamCheck {
            param: pi,
            entries_checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_entry: 0,
            analytic_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        for e in (0..n).step_by(stride) {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let rel = relative_error(grad[e], numeric, opts.floor);
            let abs = (grad[e] - numeric).abs();
            rep.entries_checked += 1;
            rep.max_abs_err = rep.max_abs_err.max(abs);
            if !(rel <= rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_entry = e;
            }
        }
        reports.push(rep);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
    Ok(GradCheckReport { params: reports, max_rel_err, tolerance: opts.tolerance })
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.len() != 1 {
        return Err(Error::shape("grad_check", "objective must be scalar"));
    }
    Ok(value.data()[0])
}
