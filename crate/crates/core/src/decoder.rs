//! Latent trajectory, cause-specific hazard heads, reconstruction head and the
//! discrete survival algebra.
//!
//! Stacked tensors are time-major: row `t·B + i` holds subject `i` at bin `t`.

use std::io::Write;

use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::nn::{Activation, Bound, Dense, Mat, Mlp, ModelParams, ParamGroup, Tape, Var};
use crate::odeint::{solve_with_grad, SolverSettings, TapeField};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub field: Mlp,
    pub causes: Vec<Mlp>,
    pub head: Dense,
    pub recon: Dense,
    pub latent_dim: usize,
    pub n_events: usize,
}

/// Tape handles for one decoder pass.
#[derive(Clone, Debug)]
pub struct HazardVars {
    /// One `t_m·B × cause_width` embedding per event, bins `1..=t_m`.
    pub embeddings: Vec<Var>,
    /// `t_m·B × (b+1)` log-hazards; column 0 is "no event".
    pub log_lambda: Var,
}

impl Decoder {
    pub fn new<R: Rng>(params: &mut ModelParams, arch: &Architecture, rng: &mut R) -> Self {
        let l = arch.latent_dim;
        let cw = arch.cause_width;
        let field = Mlp::new(
            params,
            "dec.field",
            ParamGroup::DecoderField,
            &[l, arch.decoder_field_width, l],
            Activation::Tanh,
            Activation::Linear,
            rng,
        );
        let causes = (1..=arch.n_events)
            .map(|k| {
                Mlp::new(
                    params,
                    &format!("dec.cause{k}"),
                    ParamGroup::HazardDecoder,
                    &[l, cw, cw],
                    Activation::Relu,
                    Activation::Relu,
                    rng,
                )
            })
            .collect();
        let head = Dense::new(
            params,
            "dec.head",
            ParamGroup::HazardDecoder,
            arch.n_events * cw,
            arch.n_events + 1,
            Activation::Linear,
            rng,
        );
        let recon = Dense::new(
            params,
            "dec.recon",
            ParamGroup::DataDecoder,
            l,
            arch.n_features,
            Activation::Linear,
            rng,
        );
        Self {
            field,
            causes,
            head,
            recon,
            latent_dim: l,
            n_events: arch.n_events,
        }
    }

    /// `z(0), …, z(t_m)`, each `B × L`.
    pub fn trajectory_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z0: Var,
        t_m: usize,
        settings: &SolverSettings,
    ) -> Result<Vec<Var>> {
        flow(tape, |tape, z| self.field.forward(tape, p, z), z0, t_m, settings)
    }

    /// Hazards for bins `1..=t_m` from the states `z(1..=t_m)`.
    pub fn hazards_var(&self, tape: &mut Tape, p: &Bound, traj: &[Var]) -> Result<HazardVars> {
        if traj.len() < 2 {
            return Err(Error::Contract("hazards need t_m >= 1".into()));
        }
        let stacked = tape.concat_rows(&traj[1..])?;
        let embeddings = self
            .causes
            .iter()
            .map(|m| m.forward(tape, p, stacked))
            .collect::<Result<Vec<_>>>()?;
        let joined = tape.concat_cols(&embeddings)?;
        let logits = self.head.forward(tape, p, joined)?;
        let log_lambda = tape.log_softmax_rows(logits);
        Ok(HazardVars {
            embeddings,
            log_lambda,
        })
    }

    /// Feature means at bins `0..=t_m`, stacked `(t_m+1)·B × M`.
    pub fn reconstruct_var(&self, tape: &mut Tape, p: &Bound, traj: &[Var]) -> Result<Var> {
        let stacked = tape.concat_rows(traj)?;
        self.recon.forward(tape, p, stacked)
    }
}

/// Integrates an autonomous field from `z0` and returns the states at the
/// integer bins `0..=t_m`.
pub fn flow<F>(tape: &mut Tape, field: F, z0: Var, t_m: usize, settings: &SolverSettings) -> Result<Vec<Var>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if t_m == 0 {
        return Err(Error::Contract("t_m must be >= 1".into()));
    }
    let times: Vec<f64> = (1..=t_m).map(|t| t as f64).collect();
    let f = TapeField(|tape: &mut Tape, _t: f64, z: Var| field(tape, z));
    let mut out = vec![z0];
    out.extend(solve_with_grad(tape, &f, 0.0, z0, &times, settings)?);
    Ok(out)
}

/// Latent states per bin, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    /// `z[t]` is `B × L`.
    pub z: Vec<Mat>,
}

impl LatentTrajectory {
    pub fn t_m(&self) -> usize {
        self.z.len() - 1
    }

    pub fn n_subjects(&self) -> usize {
        self.z.first().map_or(0, |m| m.nrows())
    }

    /// `(t_m+1) × L` states of one subject.
    pub fn subject(&self, i: usize) -> Array2<f64> {
        let l = self.z.first().map_or(0, |m| m.ncols());
        Array2::from_shape_fn((self.z.len(), l), |(t, d)| self.z[t][[i, d]])
    }
}

pub fn latent_trajectory(z0: &Mat, model: &Model, t_m: usize, settings: &SolverSettings) -> Result<LatentTrajectory> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let z = tape.constant(z0.clone());
    let traj = model.decoder.trajectory_var(&mut tape, &p, z, t_m, settings)?;
    Ok(LatentTrajectory {
        z: traj.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

fn traj_on_tape(tape: &mut Tape, traj: &LatentTrajectory) -> Vec<Var> {
    traj.z.iter().map(|m| tape.constant(m.clone())).collect()
}

pub fn hazards(traj: &LatentTrajectory, model: &Model) -> Result<Vec<HazardGrid>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let vars = traj_on_tape(&mut tape, traj);
    let hv = model.decoder.hazards_var(&mut tape, &p, &vars)?;
    grids_from_log(tape.value(hv.log_lambda), traj.n_subjects())
}

/// Splits stacked log-hazards into per-subject grids.
pub fn grids_from_log(log_lambda: &Mat, n_subjects: usize) -> Result<Vec<HazardGrid>> {
    let (rows, cols) = log_lambda.dim();
    if n_subjects == 0 || rows % n_subjects != 0 {
        return Err(Error::Dimension(format!(
            "{rows} stacked rows for {n_subjects} subjects"
        )));
    }
    let t_m = rows / n_subjects;
    (0..n_subjects)
        .map(|i| {
            let lam = Array2::from_shape_fn((t_m, cols), |(t, k)| log_lambda[[t * n_subjects + i, k]].exp());
            HazardGrid::new(lam)
        })
        .collect()
}

/// Reconstructed means, `(B, t_m+1, M)`.
pub fn reconstruct(traj: &LatentTrajectory, model: &Model) -> Result<Array3<f64>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let vars = traj_on_tape(&mut tape, traj);
    let x = model.decoder.reconstruct_var(&mut tape, &p, &vars)?;
    let v = tape.value(x);
    let b = traj.n_subjects();
    let m = v.ncols();
    Ok(Array3::from_shape_fn((b, traj.z.len(), m), |(i, t, f)| v[[t * b + i, f]]))
}

/// Discrete hazards of one subject: `lambda[[t−1, k]]` for bins `1..=t_m`,
/// with `k = 0` meaning no event.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardGrid {
    lambda: Array2<f64>,
}

impl HazardGrid {
    pub fn new(lambda: Array2<f64>) -> Result<Self> {
        if lambda.ncols() < 2 {
            return Err(Error::Dimension("hazard grid needs at least one event".into()));
        }
        for (t, row) in lambda.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("bin {}: hazard outside [0, 1]", t + 1)));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("bin {}: hazards sum to {sum}", t + 1)));
            }
        }
        Ok(Self { lambda })
    }

    /// Builds the grid from cause hazards `[[t−1, k−1]]`, filling `λ₀`.
    pub fn from_cause_hazards(cause: &Array2<f64>) -> Result<Self> {
        let (t_m, b) = cause.dim();
        let lam = Array2::from_shape_fn((t_m, b + 1), |(t, k)| {
            if k == 0 {
                1.0 - cause.row(t).sum()
            } else {
                cause[[t, k - 1]]
            }
        });
        Self::new(lam)
    }

    pub fn t_m(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn n_events(&self) -> usize {
        self.lambda.ncols() - 1
    }

    /// `λ_k(t)` for `t ∈ 1..=t_m`.
    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.lambda[[t - 1, k]]
    }

    pub fn lambda(&self) -> &Array2<f64> {
        &self.lambda
    }
}

/// `S(0..=t_m)` with `S(t) = Π_{τ≤t} λ₀(τ)`.
pub fn event_free_survival(grid: &HazardGrid) -> Vec<f64> {
    let mut s = Vec::with_capacity(grid.t_m() + 1);
    s.push(1.0);
    let mut acc = 1.0;
    for t in 1..=grid.t_m() {
        acc *= grid.get(0, t);
        s.push(acc);
    }
    s
}

/// `F_k(0..=t_m)` with `F_k(t) = Σ_{τ≤t} λ_k(τ)·S(τ−1)`.
pub fn cif(grid: &HazardGrid, k: usize) -> Result<Vec<f64>> {
    if k < 1 || k > grid.n_events() {
        return Err(Error::Contract(format!(
            "event {k} outside 1..={}",
            grid.n_events()
        )));
    }
    let s = event_free_survival(grid);
    let mut f = Vec::with_capacity(grid.t_m() + 1);
    f.push(0.0);
    let mut acc = 0.0;
    for t in 1..=grid.t_m() {
        acc += grid.get(k, t) * s[t - 1];
        f.push(acc);
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalCurves {
    /// `S(0..=t_m)`.
    pub s: Vec<f64>,
    /// `f[k−1]` is `F_k(0..=t_m)`.
    pub f: Vec<Vec<f64>>,
}

impl SurvivalCurves {
    pub fn from_grid(grid: &HazardGrid) -> Self {
        let f = (1..=grid.n_events())
            .map(|k| cif(grid, k).expect("k in range"))
            .collect();
        Self {
            s: event_free_survival(grid),
            f,
        }
    }

    pub fn t_m(&self) -> usize {
        self.s.len() - 1
    }

    /// Largest `|S(t) + Σ F_k(t) − 1|` over all bins.
    pub fn identity_gap(&self) -> f64 {
        (0..self.s.len())
            .map(|t| (self.s[t] + self.f.iter().map(|f| f[t]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Writes `id,t,S,F_1..F_b` rows; refuses curves violating the sum identity.
pub fn write_predictions_csv<W: Write>(w: W, n_events: usize, ids: &[String], curves: &[SurvivalCurves]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "t".into(), "S".into()];
    header.extend((1..=n_events).map(|k| format!("F_{k}")));
    w.write_record(&header)?;
    for (id, c) in ids.iter().zip(curves) {
        let gap = c.identity_gap();
        if gap > 1e-9 {
            return Err(Error::Numerical {
                t: 0.0,
                msg: format!("subject {id}: S + ΣF deviates from 1 by {gap}"),
            });
        }
        for t in 0..c.s.len() {
            let mut rec = vec![id.clone(), t.to_string(), c.s[t].to_string()];
            rec.extend(c.f.iter().map(|f| f[t].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Column of `F_k(t)` per subject read back from a predictions file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionTable {
    pub n_events: usize,
    pub ids: Vec<String>,
    pub curves: Vec<SurvivalCurves>,
}

pub fn read_predictions_csv(path: &std::path::Path) -> Result<PredictionTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let n_events = headers.len().saturating_sub(3);
    let mut table = PredictionTable {
        n_events,
        ..Default::default()
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("column {i} is not a number"),
                })
        };
        let id = rec.get(0).unwrap_or("").to_string();
        let t = parse(1)? as usize;
        if table.ids.last() != Some(&id) {
            if t != 0 {
                return Err(Error::Parse {
                    line,
                    msg: format!("curve for {id} does not start at t=0"),
                });
            }
            table.ids.push(id);
            table.curves.push(SurvivalCurves {
                s: Vec::new(),
                f: vec![Vec::new(); n_events],
            });
        }
        let c = table.curves.last_mut().expect("pushed above");
        if t != c.s.len() {
            return Err(Error::Parse {
                line,
                msg: "bins must be consecutive".into(),
            });
        }
        c.s.push(parse(2)?);
        for k in 0..n_events {
            c.f[k].push(parse(3 + k)?);
        }
    }
    Ok(table)
}

/// Event-`k` embedding of one subject at bin `t`, from stacked embeddings.
pub fn embedding_row(emb: &Mat, n_subjects: usize, i: usize, t: usize) -> ndarray::ArrayView1<'_, f64> {
    emb.slice(s![(t - 1) * n_subjects + i, ..])
}
