//! Central finite-difference check of tape gradients.

use super::params::{Bound, Gradients, ModelParams, ParamId};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
    pub loss: f64,
}

/// Relative errors use `max(|analytic|, |numeric|, 1e-7·max(1, |loss|))` as
/// the denominator, so entries whose true gradient sits at round-off level
/// do not dominate.
pub fn check_gradients<F>(params: &ModelParams, eps: f64, mut forward: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss_var = forward(&mut tape, &bound)?;
    let loss = tape.scalar(loss_var);
    let grads = Gradients::from_tape(tape.backward(loss_var, params.len())?, params);
    drop(tape);

    let floor = 1e-7 * loss.abs().max(1.0);
    let mut eval = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = forward(&mut tape, &bound)?;
        Ok(tape.scalar(out))
    };

    let mut work = params.clone();
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        n_checked: 0,
        loss,
    };
    for t in 0..params.len() {
        let id = ParamId(t);
        let n = params.get(id).value.len();
        for k in 0..n {
            let orig = params.get(id).value.as_slice().expect("standard layout")[k];
            work.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + eps;
            let up = eval(&work)?;
            work.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig - eps;
            let down = eval(&work)?;
            work.value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).as_slice().expect("standard layout")[k];
            let abs = (numeric - analytic).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
            report.n_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
