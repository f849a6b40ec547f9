//! Loss assembly, the optimisation loop, prediction and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{build_batch, Dataset, EncodedBatch, Outcome, SurvivalRecord};
use crate::decoder::{event_free_survival, grids_from_log, HazardGrid, SurvivalCurves};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::nn::checkpoint::{load_into, read_container, write_container};
use crate::nn::{gaussian_kl_var, reparam_sample, Adam, Bound, Gradients, Mat, Tape, Var};
use crate::odeint::SolverSettings;

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub encoder_field_width: usize,
    pub decoder_field_width: usize,
    pub posterior_head_width: usize,
    pub cause_width: usize,
    pub survival_loss_scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub t_m: usize,
    pub bin_width: f64,
    pub kl_warmup_epochs: usize,
    pub seed: u64,
    /// Train/valid/test fractions used when a command splits a dataset.
    pub split_fractions: [f64; 3],
    pub solver: SolverSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            latent_dim: 8,
            encoder_field_width: 16,
            decoder_field_width: 16,
            posterior_head_width: 16,
            cause_width: 10,
            survival_loss_scale: 100.0,
            learning_rate: 1e-2,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            t_m: 20,
            bin_width: 1.0,
            kl_warmup_epochs: 5,
            seed: 0,
            split_fractions: [0.55, 0.15, 0.30],
            solver: SolverSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("encoder_field_width", self.encoder_field_width),
            ("decoder_field_width", self.decoder_field_width),
            ("posterior_head_width", self.posterior_head_width),
            ("cause_width", self.cause_width),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("t_m", self.t_m),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("survival_loss_scale", self.survival_loss_scale),
            ("learning_rate", self.learning_rate),
            ("bin_width", self.bin_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        self.solver.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn architecture(&self, n_features: usize, n_events: usize) -> Architecture {
        Architecture {
            n_features,
            n_events,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            encoder_field_width: self.encoder_field_width,
            decoder_field_width: self.decoder_field_width,
            posterior_head_width: self.posterior_head_width,
            cause_width: self.cause_width,
        }
    }

    pub fn loss_settings(&self, kl_weight: f64) -> LossSettings {
        LossSettings {
            t_m: self.t_m,
            bin_width: self.bin_width,
            survival_loss_scale: self.survival_loss_scale,
            kl_weight,
            solver: self.solver.clone(),
        }
    }
}

/// Everything the loss needs besides data and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub t_m: usize,
    pub bin_width: f64,
    pub survival_loss_scale: f64,
    pub kl_weight: f64,
    pub solver: SolverSettings,
}

/// Survival NLL of one subject and whether its time was truncated to `t_m`.
pub fn survival_nll(grid: &HazardGrid, outcome: Outcome) -> (f64, bool) {
    let t_m = grid.t_m();
    let (t, event, truncated) = if outcome.time as usize > t_m {
        (t_m, None, true)
    } else {
        (outcome.time as usize, outcome.event, false)
    };
    let s = event_free_survival(grid);
    let nll = match event {
        Some(k) => -grid.get(k, t).max(PROB_FLOOR).ln() - s[t - 1].max(PROB_FLOOR).ln(),
        None => -s[t].max(PROB_FLOOR).ln(),
    };
    (nll, truncated)
}

/// Summed survival NLL over a stacked `t_m·B × (b+1)` log-hazard node, plus
/// the number of truncated records.
pub fn survival_nll_var(tape: &mut Tape, log_lambda: Var, outcomes: &[Outcome], t_m: usize) -> Result<(Var, usize)> {
    let b = outcomes.len();
    let mut event_cells = Vec::with_capacity(b);
    let mut surv_cells = Vec::with_capacity(b);
    let mut truncated = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.time == 0 {
            return Err(Error::Validation("observed_time must be >= 1".into()));
        }
        let (t, event) = if o.time as usize > t_m {
            truncated += 1;
            (t_m, None)
        } else {
            (o.time as usize, o.event)
        };
        let row = |tau: usize| (tau - 1) * b + i;
        match event {
            Some(k) => {
                event_cells.push(vec![(row(t), k)]);
                surv_cells.push((1..t).map(|tau| (row(tau), 0)).collect());
            }
            None => {
                event_cells.push(Vec::new());
                surv_cells.push((1..=t).map(|tau| (row(tau), 0)).collect());
            }
        }
    }
    let floor = PROB_FLOOR.ln();
    let ev = tape.gather_sum(log_lambda, event_cells)?;
    let ev = tape.clamp_min(ev, floor);
    let ls = tape.gather_sum(log_lambda, surv_cells)?;
    let ls = tape.clamp_min(ls, floor);
    let both = tape.add(ev, ls)?;
    let total = tape.sum(both);
    Ok((tape.mul_const(total, Mat::from_elem((1, 1), -1.0))?, truncated))
}

/// Observed entries aligned to the stacked `(t_m+1)·B × M` reconstruction.
#[derive(Clone, Debug)]
pub struct ReconTarget {
    pub counts: Mat,
    pub sums: Mat,
    /// `0.5·Σx² + 0.5·n·ln 2π`.
    pub constant: f64,
    pub n_observed: usize,
}

impl ReconTarget {
    /// Observation time `τ` maps to bin `floor(τ / bin_width)`; bins past
    /// `t_m` are dropped.
    pub fn new(batch: &EncodedBatch, t_m: usize, bin_width: f64) -> Self {
        let (b, g, m) = batch.x.dim();
        let mut counts = Mat::zeros(((t_m + 1) * b, m));
        let mut sums = Mat::zeros(((t_m + 1) * b, m));
        let mut sq = 0.0;
        let mut n = 0;
        for j in 0..g {
            let bin = (batch.grid[j] / bin_width).floor() as usize;
            if bin > t_m {
                continue;
            }
            for i in 0..b {
                for f in 0..m {
                    if batch.m[[i, j, f]] > 0.0 {
                        let v = batch.x[[i, j, f]];
                        counts[[bin * b + i, f]] += 1.0;
                        sums[[bin * b + i, f]] += v;
                        sq += v * v;
                        n += 1;
                    }
                }
            }
        }
        Self {
            counts,
            sums,
            constant: 0.5 * sq + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln(),
            n_observed: n,
        }
    }

    /// Negative unit-variance Gaussian log-likelihood of the observed entries.
    pub fn nll_var(&self, tape: &mut Tape, xhat: Var) -> Result<Var> {
        let sq = tape.square(xhat);
        let quad = tape.weighted_sum(sq, self.counts.mapv(|c| 0.5 * c))?;
        let lin = tape.weighted_sum(xhat, self.sums.clone())?;
        let diff = tape.sub(quad, lin)?;
        Ok(tape.add_scalar(diff, self.constant))
    }
}

/// Taped loss pieces of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon_nll: Var,
    pub kl: Var,
    /// Mean over the batch.
    pub surv_nll: Var,
    pub n_truncated: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon_nll: f64,
    pub kl: f64,
    pub surv_nll: f64,
}

/// Builds the full objective `−recon + w·KL + scale·mean NLL` on a tape.
/// `noise = None` uses the posterior mean.
#[allow(clippy::too_many_arguments)]
pub fn loss_var(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    batch: &EncodedBatch,
    outcomes: &[Outcome],
    noise: Option<Mat>,
    s: &LossSettings,
) -> Result<LossVars> {
    let (mu, sigma) = model.encoder.posterior_var(tape, p, batch, &s.solver)?;
    let z0 = match noise {
        Some(n) => reparam_sample(tape, mu, sigma, n)?,
        None => mu,
    };
    let traj = model.decoder.trajectory_var(tape, p, z0, s.t_m, &s.solver)?;
    let hv = model.decoder.hazards_var(tape, p, &traj)?;
    let xhat = model.decoder.reconstruct_var(tape, p, &traj)?;

    let recon_nll = ReconTarget::new(batch, s.t_m, s.bin_width).nll_var(tape, xhat)?;
    let kl = gaussian_kl_var(tape, mu, sigma)?;
    let (surv_sum, n_truncated) = survival_nll_var(tape, hv.log_lambda, outcomes, s.t_m)?;
    let inv_b = 1.0 / outcomes.len() as f64;
    let surv_nll = tape.lincomb(&[(inv_b, surv_sum)])?;
    let total = tape.lincomb(&[
        (1.0, recon_nll),
        (s.kl_weight, kl),
        (s.survival_loss_scale, surv_nll),
    ])?;
    Ok(LossVars {
        total,
        recon_nll,
        kl,
        surv_nll,
        n_truncated,
    })
}

fn parts(tape: &Tape, v: &LossVars) -> LossParts {
    LossParts {
        total: tape.scalar(v.total),
        recon_nll: tape.scalar(v.recon_nll),
        kl: tape.scalar(v.kl),
        surv_nll: tape.scalar(v.surv_nll),
    }
}

/// Negative ELBO from precomputed pieces: reconstruction NLL on observed
/// entries plus the KL of every posterior row.
pub fn elbo_loss(target: &ReconTarget, xhat: &Mat, mu: &Mat, sigma: &Mat) -> Result<f64> {
    if xhat.dim() != target.counts.dim() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} vs target {:?}",
            xhat.shape(),
            target.counts.shape()
        )));
    }
    let mut recon = target.constant;
    for ((x, c), s) in xhat.iter().zip(&target.counts).zip(&target.sums) {
        recon += 0.5 * c * x * x - s * x;
    }
    let kl = crate::nn::gaussian_kl(
        mu.as_slice().expect("standard layout"),
        sigma.as_slice().expect("standard layout"),
    )?;
    Ok(recon + kl)
}

/// Loss of one batch without gradients.
pub fn total_loss(
    records: &[SurvivalRecord],
    model: &Model,
    settings: &LossSettings,
    noise: Option<Mat>,
) -> Result<LossParts> {
    let batch = build_batch(records)?;
    let outcomes: Vec<Outcome> = records.iter().map(SurvivalRecord::outcome).collect();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let v = loss_var(&mut tape, &p, model, &batch, &outcomes, noise, settings)?;
    Ok(parts(&tape, &v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean per-subject loss over the training set, posterior-mean mode.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub kl: f64,
    pub recon: f64,
    pub surv_nll: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub n_truncated: usize,
}

/// Per-subject averages over a dataset evaluated in chunks.
fn evaluate(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<LossParts> {
    let settings = cfg.loss_settings(1.0);
    let n = data.len() as f64;
    let mut acc = LossParts::default();
    for chunk in data.records.chunks(cfg.batch_size) {
        let p = total_loss(chunk, model, &settings, None)?;
        let w = chunk.len() as f64;
        acc.recon_nll += p.recon_nll / n;
        acc.kl += p.kl / n;
        acc.surv_nll += p.surv_nll * w / n;
    }
    acc.total = acc.recon_nll + acc.kl + cfg.survival_loss_scale * acc.surv_nll;
    Ok(acc)
}

fn kl_weight(epoch: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (epoch as f64 / warmup as f64).min(1.0)
    }
}

/// Adam training with KL warm-up and early stopping on validation loss.
/// Epoch 0 in the history is the untrained model.
pub fn train(train_set: &Dataset, valid_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Validation("training and validation sets must be nonempty".into()));
    }
    if train_set.n_features() != valid_set.n_features() || train_set.n_events != valid_set.n_events {
        return Err(Error::Dimension("training and validation sets disagree in shape".into()));
    }
    let arch = cfg.architecture(train_set.n_features(), train_set.n_events);
    let mut model = Model::new(arch, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut history = Vec::new();
    let record = |epoch: usize, model: &Model| -> Result<HistoryRow> {
        let tr = evaluate(model, train_set, cfg)?;
        let va = evaluate(model, valid_set, cfg)?;
        if !va.total.is_finite() || !tr.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        Ok(HistoryRow {
            epoch,
            train_loss: tr.total,
            valid_loss: va.total,
            kl: tr.kl,
            recon: tr.recon_nll,
            surv_nll: tr.surv_nll,
        })
    };
    let row = record(0, &model)?;
    log::info!("epoch 0: train {:.4} valid {:.4}", row.train_loss, row.valid_loss);
    let mut best = (row.valid_loss, 0usize, model.params.clone());
    history.push(row);

    let mut since_best = 0;
    let mut n_truncated = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let settings = cfg.loss_settings(kl_weight(epoch, cfg.kl_warmup_epochs));
        order.shuffle(&mut rng);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<SurvivalRecord> = idx.iter().map(|&i| train_set.records[i].clone()).collect();
            let batch = build_batch(&records)?;
            let outcomes: Vec<Outcome> = records.iter().map(SurvivalRecord::outcome).collect();
            let noise = Array2::from_shape_fn((records.len(), cfg.latent_dim), |_| rng.sample(StandardNormal));

            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let v = loss_var(&mut tape, &p, &model, &batch, &outcomes, Some(noise), &settings)
                .map_err(|e| if e.is_numerical() { Error::NonFiniteLoss { epoch, batch: bi } } else { e })?;
            n_truncated += v.n_truncated;
            if !tape.scalar(v.total).is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = Gradients::from_tape(tape.backward(v.total, model.params.len())?, &model.params);
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            adam.update(&mut model.params, &grads);
        }

        let row = record(epoch, &model)?;
        log::info!(
            "epoch {epoch}: train {:.4} valid {:.4} (surv {:.4})",
            row.train_loss,
            row.valid_loss,
            row.surv_nll
        );
        if row.valid_loss < best.0 {
            best = (row.valid_loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(row);
        if since_best >= cfg.patience {
            break;
        }
    }
    if n_truncated > 0 {
        log::warn!("{n_truncated} record-steps had observed_time > t_m and were censored at t_m");
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.1,
        n_truncated,
    })
}

/// Runs `train` once per survival-loss scale and reports the best
/// validation loss of each run.
pub fn sweep_survival_scale(train_set: &Dataset, valid_set: &Dataset, base: &TrainConfig, scales: &[f64]) -> Result<Vec<(f64, f64)>> {
    scales
        .iter()
        .map(|&scale| {
            let cfg = TrainConfig {
                survival_loss_scale: scale,
                ..base.clone()
            };
            let out = train(train_set, valid_set, &cfg)?;
            Ok((scale, out.history[out.best_epoch].valid_loss))
        })
        .collect()
}

/// Hazard grids at the posterior mean, in dataset order.
pub fn predict_grids(model: &Model, data: &Dataset, t_m: usize, solver: &SolverSettings, batch_size: usize) -> Result<Vec<HazardGrid>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    if data.n_features() != model.arch.n_features {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            data.n_features(),
            model.arch.n_features
        )));
    }
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.records.chunks(batch_size.max(1)) {
        let batch = build_batch(chunk)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let (mu, _) = model.encoder.posterior_var(&mut tape, &p, &batch, solver)?;
        let traj = model.decoder.trajectory_var(&mut tape, &p, mu, t_m, solver)?;
        let hv = model.decoder.hazards_var(&mut tape, &p, &traj)?;
        out.extend(grids_from_log(tape.value(hv.log_lambda), chunk.len())?);
    }
    Ok(out)
}

pub fn predict(model: &Model, data: &Dataset, t_m: usize, solver: &SolverSettings, batch_size: usize) -> Result<Vec<SurvivalCurves>> {
    Ok(predict_grids(model, data, t_m, solver, batch_size)?
        .iter()
        .map(SurvivalCurves::from_grid)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub config: TrainConfig,
    pub seed: u64,
    pub best_epoch: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, config: &TrainConfig, best_epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        config: config.clone(),
        seed: config.seed,
        best_epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, &json, &model.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let (json, tensors) = read_container(&mut r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Validation("trailing bytes after checkpoint tensors".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut model = Model::new(header.arch.clone(), 0)?;
    load_into(&mut model.params, tensors)?;
    Ok((model, header))
}

pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid(cause: Array2<f64>) -> HazardGrid {
        HazardGrid::from_cause_hazards(&cause).unwrap()
    }

    #[test]
    fn nll_closed_forms() {
        // S(1) = 0.5
        let g = grid(array![[0.3, 0.2], [0.1, 0.1]]);
        let (l, tr) = survival_nll(&g, Outcome { time: 1, event: None });
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(!tr);
        let g = grid(array![[0.1], [0.2]]);
        let (l, _) = survival_nll(&g, Outcome { time: 1, event: Some(1) });
        assert!((l + 0.1f64.ln()).abs() < 1e-12);
        let g = grid(Array2::zeros((3, 2)));
        assert_eq!(survival_nll(&g, Outcome { time: 3, event: None }).0, 0.0);
        let (_, tr) = survival_nll(&g, Outcome { time: 9, event: Some(1) });
        assert!(tr);
    }

    #[test]
    fn taped_nll_matches_plain() {
        let cause = array![[0.1, 0.3], [0.2, 0.05], [0.4, 0.1]];
        let g = grid(cause);
        let outcomes = [
            Outcome { time: 2, event: Some(2) },
            Outcome { time: 3, event: None },
            Outcome { time: 5, event: Some(1) },
        ];
        // stack three copies of the grid time-major
        let lam = g.lambda();
        let stacked = Array2::from_shape_fn((9, 3), |(r, k)| lam[[r / 3, k]].ln());
        let mut tape = Tape::new();
        let v = tape.constant(stacked);
        let (sum, trunc) = survival_nll_var(&mut tape, v, &outcomes, 3).unwrap();
        let want: f64 = outcomes.iter().map(|&o| survival_nll(&g, o).0).sum();
        assert!((tape.scalar(sum) - want).abs() < 1e-12);
        assert_eq!(trunc, 1);
    }

    #[test]
    fn config_missing_field_is_named() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        v.as_object_mut().unwrap().remove("patience");
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("patience"), "{err}");
        assert!(err.is_validation());
    }
}
