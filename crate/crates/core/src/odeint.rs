//! Dormand–Prince 5(4) integration with quartic dense output.
//!
//! The stepper is written once against [`Backend`], which supplies linear
//! combinations of states. [`Plain`] works on `Vec<f64>`; [`Tape`] records
//! every stage so gradients flow through the discretised solve. Step sizes
//! are chosen from values only and enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};

/// Storage for ODE states during a solve.
pub trait Backend {
    type State: Clone;

    /// `Σ cᵢ·sᵢ`.
    fn lincomb(&mut self, terms: &[(f64, &Self::State)]) -> Result<Self::State>;

    fn values<'a>(&'a self, s: &'a Self::State) -> &'a [f64];
}

/// A right-hand side `dy/dt = f(t, y)`.
pub trait VectorField<B: Backend> {
    fn eval(&self, be: &mut B, t: f64, y: &B::State) -> Result<B::State>;
}

/// Untaped `Vec<f64>` states.
#[derive(Clone, Copy, Debug, Default)]
pub struct Plain;

impl Backend for Plain {
    type State = Vec<f64>;

    fn lincomb(&mut self, terms: &[(f64, &Vec<f64>)]) -> Result<Vec<f64>> {
        let n = terms.first().map_or(0, |(_, s)| s.len());
        let mut out = vec![0.0; n];
        for (c, s) in terms {
            if s.len() != n {
                return Err(Error::Dimension(format!(
                    "state of length {} combined with length {n}",
                    s.len()
                )));
            }
            if *c != 0.0 {
                for (o, v) in out.iter_mut().zip(s.iter()) {
                    *o += c * v;
                }
            }
        }
        Ok(out)
    }

    fn values<'a>(&'a self, s: &'a Vec<f64>) -> &'a [f64] {
        s
    }
}

impl Backend for Tape {
    type State = Var;

    fn lincomb(&mut self, terms: &[(f64, &Var)]) -> Result<Var> {
        let t: Vec<(f64, Var)> = terms.iter().map(|&(c, &v)| (c, v)).collect();
        Tape::lincomb(self, &t)
    }

    fn values<'a>(&'a self, s: &'a Var) -> &'a [f64] {
        self.value(*s).as_slice().expect("tape values are contiguous")
    }
}

impl<F> VectorField<Plain> for F
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    fn eval(&self, _be: &mut Plain, t: f64, y: &Vec<f64>) -> Result<Vec<f64>> {
        let dy = self(t, y);
        if dy.len() != y.len() {
            return Err(Error::Dimension(format!(
                "vector field returned {} components for a state of {}",
                dy.len(),
                y.len()
            )));
        }
        Ok(dy)
    }
}

/// Wraps a closure that builds the derivative on a tape.
pub struct TapeField<F>(pub F);

impl<F> VectorField<Tape> for TapeField<F>
where
    F: Fn(&mut Tape, f64, Var) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, t: f64, y: &Var) -> Result<Var> {
        let dy = (self.0)(tape, t, *y)?;
        if tape.shape(dy) != tape.shape(*y) {
            return Err(Error::Dimension(format!(
                "vector field returned {:?} for a state of {:?}",
                tape.shape(dy),
                tape.shape(*y)
            )));
        }
        Ok(dy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub rtol: f64,
    pub atol: f64,
    /// Defaults to a tenth of the integration span.
    pub h_init: Option<f64>,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-3,
            atol: 1e-4,
            h_init: None,
            h_min: 1e-10,
            h_max: f64::MAX,
            max_steps: 10_000,
        }
    }
}

impl SolverSettings {
    /// Step of exactly `h` everywhere except a shorter final step; steps at
    /// `h_min` are always accepted.
    pub fn fixed(h: f64) -> Self {
        Self {
            h_init: Some(h),
            h_min: h,
            h_max: h,
            max_steps: usize::MAX,
            ..Self::default()
        }
    }

    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Validation("solver tolerances must be positive".into()));
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_max) {
            return Err(Error::Validation("need 0 < h_min <= h_max".into()));
        }
        if let Some(h) = self.h_init {
            if !(h > 0.0) {
                return Err(Error::Validation("h_init must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Initial value problem over a plain closure.
pub struct OdeProblem<F> {
    pub vector_field: F,
    pub t0: f64,
    pub y0: Vec<f64>,
    pub eval_times: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Solution<S> {
    /// One state per requested evaluation time.
    pub states: Vec<S>,
    /// End time and state of every accepted step.
    pub steps: Vec<(f64, S)>,
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_evals: usize,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
// Midpoint weights for the quartic interpolant.
const C_MID: [f64; 7] = [
    6025192743.0 / 30085553152.0 / 2.0,
    0.0,
    51252292925.0 / 65400821598.0 / 2.0,
    -2691868925.0 / 45128329728.0 / 2.0,
    187940372067.0 / 1594534317056.0 / 2.0,
    -1776094331.0 / 19743644256.0 / 2.0,
    11237099.0 / 235043384.0 / 2.0,
];

struct Stages<S> {
    k: Vec<S>,
    y5: S,
    err: Vec<f64>,
}

fn ensure_finite(vals: &[f64], t: f64, what: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            t,
            msg: format!("non-finite {what}"),
        })
    }
}

fn stages<B: Backend, F: VectorField<B>>(
    be: &mut B,
    field: &F,
    t: f64,
    y: &B::State,
    k1: &B::State,
    h: f64,
) -> Result<Stages<B::State>> {
    let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
    let mut k: Vec<B::State> = Vec::with_capacity(7);
    k.push(k1.clone());
    for (s, row) in rows.iter().enumerate() {
        let mut terms: Vec<(f64, &B::State)> = vec![(1.0, y)];
        terms.extend(row.iter().zip(&k).map(|(&a, ki)| (h * a, ki)));
        let ys = be.lincomb(&terms)?;
        let ts = t + C[s + 1] * h;
        let ks = field.eval(be, ts, &ys)?;
        ensure_finite(be.values(&ks), ts, "stage derivative")?;
        k.push(ks);
    }
    let mut terms: Vec<(f64, &B::State)> = vec![(1.0, y)];
    terms.extend(B5.iter().zip(&k).map(|(&b, ki)| (h * b, ki)));
    let y5 = be.lincomb(&terms)?;
    ensure_finite(be.values(&y5), t + h, "state")?;
    let k7 = field.eval(be, t + h, &y5)?;
    ensure_finite(be.values(&k7), t + h, "stage derivative")?;
    k.push(k7);

    let n = be.values(y).len();
    let mut err = vec![0.0; n];
    for (j, kj) in k.iter().enumerate() {
        let e = B5[j] - B4[j];
        if e != 0.0 {
            for (acc, v) in err.iter_mut().zip(be.values(kj)) {
                *acc += h * e * v;
            }
        }
    }
    Ok(Stages { k, y5, err })
}

/// One Dormand–Prince step: the fifth-order estimate and `y5 − y4`.
pub fn dopri5_step<F>(field: &F, t: f64, y: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let mut be = Plain;
    let y = y.to_vec();
    let k1 = field.eval(&mut be, t, &y)?;
    ensure_finite(&k1, t, "stage derivative")?;
    let st = stages(&mut be, field, t, &y, &k1, h)?;
    Ok((st.y5, st.err))
}

fn error_ratio(err: &[f64], y0: &[f64], y1: &[f64], s: &SolverSettings) -> f64 {
    err.iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| e.abs() / (s.atol + s.rtol * a.abs().max(b.abs())))
        .fold(0.0, f64::max)
}

/// Quartic through y0, y_mid, y1 with end slopes f0, f1; `x ∈ (0, 1)`.
fn interpolate<B: Backend>(
    be: &mut B,
    y0: &B::State,
    st: &Stages<B::State>,
    h: f64,
    x: f64,
    ymid: &B::State,
) -> Result<B::State> {
    let (x2, x3, x4) = (x * x, x * x * x, x * x * x * x);
    let c_y0 = -8.0 * x4 + 18.0 * x3 - 11.0 * x2 + 1.0;
    let c_y1 = -8.0 * x4 + 14.0 * x3 - 5.0 * x2;
    let c_ym = 16.0 * x4 - 32.0 * x3 + 16.0 * x2;
    let c_f0 = h * (-2.0 * x4 + 5.0 * x3 - 4.0 * x2 + x);
    let c_f1 = h * (2.0 * x4 - 3.0 * x3 + x2);
    debug_assert!((c_y0 + c_y1 + c_ym - 1.0).abs() < 1e-12);
    // written around y0 so that a stationary state is reproduced exactly
    let d1 = be.lincomb(&[(1.0, &st.y5), (-1.0, y0)])?;
    let dm = be.lincomb(&[(1.0, ymid), (-1.0, y0)])?;
    be.lincomb(&[
        (1.0, y0),
        (c_y1, &d1),
        (c_ym, &dm),
        (c_f0, &st.k[0]),
        (c_f1, &st.k[6]),
    ])
}

/// Integrate from `t0` and return states at each of `eval_times`.
pub fn integrate<B, F>(
    be: &mut B,
    field: &F,
    t0: f64,
    y0: B::State,
    eval_times: &[f64],
    settings: &SolverSettings,
) -> Result<Solution<B::State>>
where
    B: Backend,
    F: VectorField<B>,
{
    settings.validate()?;
    if eval_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract("eval_times must be nondecreasing".into()));
    }
    if let Some(&first) = eval_times.first() {
        if first < t0 {
            return Err(Error::Contract(format!(
                "first eval time {first} precedes integration start {t0}"
            )));
        }
    }
    ensure_finite(be.values(&y0), t0, "initial state")?;

    let n = eval_times.len();
    let mut sol = Solution {
        states: Vec::with_capacity(n),
        steps: Vec::new(),
        n_accepted: 0,
        n_rejected: 0,
        n_evals: 0,
    };
    let mut i = 0;
    while i < n && eval_times[i] == t0 {
        sol.states.push(y0.clone());
        i += 1;
    }
    if i == n {
        return Ok(sol);
    }

    let t_end = eval_times[n - 1];
    let mut h = settings
        .h_init
        .unwrap_or((t_end - t0) / 10.0)
        .clamp(settings.h_min, settings.h_max);
    let mut t = t0;
    let mut y = y0;
    let mut f0 = field.eval(be, t, &y)?;
    ensure_finite(be.values(&f0), t, "derivative")?;
    sol.n_evals += 1;
    let mut attempts = 0usize;

    while i < n {
        if attempts >= settings.max_steps {
            return Err(Error::Divergence {
                max_steps: settings.max_steps,
                t,
            });
        }
        attempts += 1;
        let last = t + h >= t_end;
        let hs = if last { t_end - t } else { h };
        let st = stages(be, field, t, &y, &f0, hs)?;
        sol.n_evals += 6;
        let ratio = error_ratio(&st.err, be.values(&y), be.values(&st.y5), settings);

        if ratio <= 1.0 || hs <= settings.h_min {
            sol.n_accepted += 1;
            let t_new = if last { t_end } else { t + hs };
            let mut ymid: Option<B::State> = None;
            while i < n && eval_times[i] <= t_new {
                let te = eval_times[i];
                let state = if i > 0 && te == eval_times[i - 1] && !sol.states.is_empty() {
                    sol.states[sol.states.len() - 1].clone()
                } else if te == t_new {
                    st.y5.clone()
                } else {
                    if ymid.is_none() {
                        let mut terms: Vec<(f64, &B::State)> = vec![(1.0, &y)];
                        terms.extend(C_MID.iter().zip(&st.k).map(|(&c, ki)| (hs * c, ki)));
                        ymid = Some(be.lincomb(&terms)?);
                    }
                    let x = (te - t) / hs;
                    interpolate(be, &y, &st, hs, x, ymid.as_ref().expect("set above"))?
                };
                sol.states.push(state);
                i += 1;
            }
            sol.steps.push((t_new, st.y5.clone()));
            t = t_new;
            let Stages { mut k, y5, .. } = st;
            y = y5;
            f0 = k.pop().expect("seven stages");
        } else {
            sol.n_rejected += 1;
        }

        let factor = if ratio == 0.0 {
            5.0
        } else {
            (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (hs * factor).clamp(settings.h_min, settings.h_max);
    }
    Ok(sol)
}

/// Solve a plain initial value problem.
pub fn solve<F>(problem: &OdeProblem<F>, settings: &SolverSettings) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let sol = integrate(
        &mut Plain,
        &problem.vector_field,
        problem.t0,
        problem.y0.clone(),
        &problem.eval_times,
        settings,
    )?;
    Ok(sol.states)
}

/// Solve on a tape; the returned states carry gradient linkage to `y0` and
/// to every parameter the field reads.
pub fn solve_with_grad<F>(
    tape: &mut Tape,
    field: &F,
    t0: f64,
    y0: Var,
    eval_times: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<Var>>
where
    F: VectorField<Tape>,
{
    Ok(integrate(tape, field, t0, y0, eval_times, settings)?.states)
}
