//! ODE-RNN encoder producing the approximate posterior over `z₀`.
//!
//! The batch grid is walked from the latest time back to the earliest. Between
//! grid points the hidden state follows `dh/ds = −f_γ(h)` over the interval
//! length; at grid points where a subject has any observation a GRU update is
//! applied. A subject's state only moves while the walk is inside its own
//! observation span, so the result is its state at its earliest timestamp.

use ndarray::{s, Array2};
use rand::Rng;

use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::nn::{Activation, Bound, GruCell, Mat, Mlp, ModelParams, ParamGroup, Tape, Var};
use crate::odeint::{solve_with_grad, SolverSettings, TapeField};

/// Standard-deviation floor added after the softplus.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub field: Mlp,
    pub gru: GruCell,
    pub head: Mlp,
    pub latent_dim: usize,
}

/// Posterior mean and standard deviation, one row per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

impl Encoder {
    pub fn new<R: Rng>(params: &mut ModelParams, arch: &Architecture, rng: &mut R) -> Self {
        let h = arch.hidden_dim;
        let field = Mlp::new(
            params,
            "enc.field",
            ParamGroup::EncoderField,
            &[h, arch.encoder_field_width, h],
            Activation::Tanh,
            Activation::Linear,
            rng,
        );
        let gru = GruCell::new(params, "enc.gru", 3 * arch.n_features, h, rng);
        let head = Mlp::new(
            params,
            "enc.head",
            ParamGroup::PosteriorHead,
            &[h, arch.posterior_head_width, 2 * arch.latent_dim],
            Activation::Relu,
            Activation::Linear,
            rng,
        );
        Self {
            field,
            gru,
            head,
            latent_dim: arch.latent_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden
    }

    /// Final hidden state per subject, `batch × H`.
    pub fn hidden_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &EncodedBatch,
        settings: &SolverSettings,
    ) -> Result<Var> {
        let b = batch.len();
        let hd = self.hidden_dim();
        if 3 * batch.n_features() != self.gru.input {
            return Err(Error::Dimension(format!(
                "batch has {} features, encoder expects {}",
                batch.n_features(),
                self.gru.input / 3
            )));
        }
        let mut h = tape.constant(Mat::zeros((b, hd)));
        let n_grid = batch.grid.len();
        for g in (0..n_grid).rev() {
            if g + 1 < n_grid {
                let active: Vec<bool> = (0..b)
                    .map(|i| batch.per_subject_first[i] <= g && g < batch.per_subject_latest[i])
                    .collect();
                if active.iter().any(|&a| a) {
                    let span = batch.grid[g + 1] - batch.grid[g];
                    h = self.evolve(tape, p, h, &active, span, settings).map_err(|e| {
                        let ids: Vec<&str> = (0..b)
                            .filter(|&i| active[i])
                            .map(|i| batch.ids[i].as_str())
                            .collect();
                        Error::Subject {
                            id: ids.join(","),
                            source: Box::new(e),
                        }
                    })?;
                }
            }
            let obs: Vec<bool> = (0..b).map(|i| batch.observed_any(i, g)).collect();
            if obs.iter().any(|&o| o) {
                let x = tape.constant(batch.input_at(g));
                let upd = self.gru.forward(tape, p, x, h)?;
                if obs.iter().all(|&o| o) {
                    h = upd;
                } else {
                    let gate = row_mask(&obs, hd, 1.0);
                    let diff = tape.sub(upd, h)?;
                    let gated = tape.mul_const(diff, gate)?;
                    h = tape.add(h, gated)?;
                }
            }
        }
        Ok(h)
    }

    fn evolve(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        active: &[bool],
        span: f64,
        settings: &SolverSettings,
    ) -> Result<Var> {
        let neg_mask = row_mask(active, self.hidden_dim(), -1.0);
        let field = TapeField(|tape: &mut Tape, _t: f64, y: Var| {
            let f = self.field.forward(tape, p, y)?;
            tape.mul_const(f, neg_mask.clone())
        });
        let out = solve_with_grad(tape, &field, 0.0, h, &[span], settings)?;
        Ok(out[0])
    }

    /// Posterior `(mu, sigma)` on the tape.
    pub fn posterior_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &EncodedBatch,
        settings: &SolverSettings,
    ) -> Result<(Var, Var)> {
        let h = self.hidden_var(tape, p, batch, settings)?;
        let out = self.head.forward(tape, p, h)?;
        let l = self.latent_dim;
        let mu = tape.slice_cols(out, 0, l)?;
        let raw = tape.slice_cols(out, l, l)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }
}

fn row_mask(rows: &[bool], width: usize, value: f64) -> Mat {
    let mut m = Mat::zeros((rows.len(), width));
    for (i, &on) in rows.iter().enumerate() {
        if on {
            m.slice_mut(s![i, ..]).fill(value);
        }
    }
    m
}

pub fn encode(batch: &EncodedBatch, model: &Model, settings: &SolverSettings) -> Result<PosteriorParams> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let (mu, sigma) = model.encoder.posterior_var(&mut tape, &p, batch, settings)?;
    Ok(PosteriorParams {
        mu: tape.value(mu).clone(),
        sigma: tape.value(sigma).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_batch, IrregularSeries, SurvivalRecord};
    use crate::nn::ParamId;

    fn arch() -> Architecture {
        Architecture {
            n_features: 2,
            n_events: 2,
            hidden_dim: 4,
            latent_dim: 3,
            encoder_field_width: 5,
            decoder_field_width: 5,
            posterior_head_width: 6,
            cause_width: 4,
        }
    }

    fn rec(id: &str, ts: Vec<f64>) -> SurvivalRecord {
        let values = ts
            .iter()
            .map(|t| vec![Some(t.sin()), if *t > 0.5 { Some(0.3 * t) } else { None }])
            .collect();
        SurvivalRecord {
            id: id.into(),
            observed_time: 2,
            event_type: None,
            series: IrregularSeries::new(ts, values).unwrap(),
        }
    }

    fn zero_group(model: &mut Model, group: ParamGroup) {
        for i in 0..model.params.len() {
            if model.params.get(ParamId(i)).group == group {
                model.params.value_mut(ParamId(i)).fill(0.0);
            }
        }
    }

    #[test]
    fn single_observation_is_one_gru_step() {
        let mut model = Model::new(arch(), 1).unwrap();
        zero_group(&mut model, ParamGroup::EncoderField);
        let r = rec("a", vec![0.0]);
        let batch = build_batch(std::slice::from_ref(&r)).unwrap();
        let post = encode(&batch, &model, &SolverSettings::default()).unwrap();

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(batch.input_at(0));
        let h0 = tape.constant(Mat::zeros((1, 4)));
        let h = model.encoder.gru.forward(&mut tape, &p, x, h0).unwrap();
        let out = model.encoder.head.forward(&mut tape, &p, h).unwrap();
        let v = tape.value(out);
        for d in 0..3 {
            assert_eq!(post.mu[[0, d]], v[[0, d]]);
            let s = crate::nn::tape::softplus(v[[0, 3 + d]]) + SIGMA_FLOOR;
            assert_eq!(post.sigma[[0, d]], s);
        }
    }

    #[test]
    fn identical_subjects_get_identical_rows() {
        let model = Model::new(arch(), 2).unwrap();
        let batch = build_batch(&[rec("a", vec![0.0, 1.0, 2.5]), rec("b", vec![0.0, 1.0, 2.5])]).unwrap();
        let post = encode(&batch, &model, &SolverSettings::default()).unwrap();
        assert_eq!(post.mu.row(0), post.mu.row(1));
        assert_eq!(post.sigma.row(0), post.sigma.row(1));
        assert!(post.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn unobserved_grid_point_is_inert_under_zero_field() {
        let mut model = Model::new(arch(), 3).unwrap();
        zero_group(&mut model, ParamGroup::EncoderField);
        let a = rec("a", vec![0.0, 2.0]);
        let alone = encode(&build_batch(std::slice::from_ref(&a)).unwrap(), &model, &SolverSettings::default()).unwrap();
        let other = rec("b", vec![0.0, 1.0]);
        let both = encode(&build_batch(&[a, other]).unwrap(), &model, &SolverSettings::default()).unwrap();
        assert_eq!(alone.mu.row(0), both.mu.row(0));
        assert_eq!(alone.sigma.row(0), both.sigma.row(0));
    }

    #[test]
    fn batch_invariance_within_tolerance() {
        let model = Model::new(arch(), 4).unwrap();
        let settings = SolverSettings::with_tolerances(1e-6, 1e-8);
        let a = rec("a", vec![0.0, 1.5, 3.0]);
        let alone = encode(&build_batch(std::slice::from_ref(&a)).unwrap(), &model, &settings).unwrap();
        let batch = build_batch(&[rec("b", vec![0.0, 0.7, 2.2, 4.0]), a, rec("c", vec![0.0, 3.5])]).unwrap();
        let inside = encode(&batch, &model, &settings).unwrap();
        for d in 0..3 {
            assert!((alone.mu[[0, d]] - inside.mu[[1, d]]).abs() < 1e-5);
            assert!((alone.sigma[[0, d]] - inside.sigma[[1, d]]).abs() < 1e-5);
        }
    }

    #[test]
    fn feature_mismatch_is_dimension_error() {
        let model = Model::new(Architecture { n_features: 3, ..arch() }, 1).unwrap();
        let batch = build_batch(&[rec("a", vec![0.0])]).unwrap();
        assert!(matches!(
            encode(&batch, &model, &SolverSettings::default()),
            Err(Error::Dimension(_))
        ));
    }
}
