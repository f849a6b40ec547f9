//! Synthetic competing-risks generator with known hazards.
//!
//! Each subject carries a scalar AR(1) covariate around a regime mean. The
//! covariate is measured (with unit noise, feature by feature) at the
//! integer times `0..obs_window`; the last window time is the landmark, and
//! bin `t` of the remaining-time grid uses the covariate at
//! `obs_window − 1 + t`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, IrregularSeries, SurvivalRecord};
use crate::error::{Error, Result};

pub const AR_COEF: f64 = 0.9;
/// Cap on the total event hazard of a bin after clamping.
pub const MAX_TOTAL_HAZARD: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_events: usize,
    pub n_features: usize,
    pub base_hazards: Vec<f64>,
    pub covariate_effect: Vec<f64>,
    pub censoring_hazard: f64,
    pub observation_rate: f64,
    pub t_m: usize,
    pub seed: u64,
    /// Number of integer measurement times before the landmark.
    pub obs_window: usize,
    /// Covariate means; subjects pick one uniformly. Empty means a single
    /// regime at 0.
    pub regime_offsets: Vec<f64>,
    pub bin_width: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            n_events: 2,
            n_features: 3,
            base_hazards: vec![0.02, 0.02],
            covariate_effect: vec![0.4, -0.3],
            censoring_hazard: 0.02,
            observation_rate: 0.5,
            t_m: 20,
            seed: 0,
            obs_window: 10,
            regime_offsets: vec![-4.0, 4.0],
            bin_width: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_events == 0 || self.n_features == 0 || self.t_m == 0 || self.obs_window == 0 {
            return bad("n_events, n_features, t_m and obs_window must be positive".into());
        }
        if self.base_hazards.len() != self.n_events || self.covariate_effect.len() != self.n_events {
            return bad(format!(
                "base_hazards and covariate_effect need {} entries",
                self.n_events
            ));
        }
        if self
            .base_hazards
            .iter()
            .chain([&self.censoring_hazard])
            .any(|h| !(0.0..1.0).contains(h))
        {
            return bad("hazards must lie in [0, 1)".into());
        }
        let total: f64 = self.base_hazards.iter().sum();
        if total >= 1.0 {
            return bad(format!("base hazards sum to {total}, must be < 1"));
        }
        if !(self.observation_rate > 0.0 && self.observation_rate <= 1.0) {
            return bad("observation_rate must lie in (0, 1]".into());
        }
        if self.covariate_effect.iter().chain(&self.regime_offsets).any(|v| !v.is_finite()) {
            return bad("covariate effects and offsets must be finite".into());
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return bad("bin_width must be positive".into());
        }
        Ok(())
    }
}

/// True per-bin hazards of one subject: `hazards[[t−1, k−1]] = λ_k(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRecord {
    pub id: String,
    pub regime: usize,
    pub hazards: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub oracle: Vec<OracleRecord>,
    pub clamped_fraction: f64,
    pub warnings: Vec<String>,
}

pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.n_events;
    let w = cfg.obs_window;
    let horizon = w + cfg.t_m;
    let stationary_sd = 1.0 / (1.0 - AR_COEF * AR_COEF).sqrt();
    let width = (cfg.n_subjects.max(1) - 1).to_string().len();

    let mut records = Vec::with_capacity(cfg.n_subjects);
    let mut oracle = Vec::with_capacity(cfg.n_subjects);
    let mut n_clamped = 0usize;

    for i in 0..cfg.n_subjects {
        let id = format!("s{i:0width$}");
        let (regime, mean) = if cfg.regime_offsets.is_empty() {
            (0, 0.0)
        } else {
            let r = rng.random_range(0..cfg.regime_offsets.len());
            (r, cfg.regime_offsets[r])
        };

        let mut cov = Vec::with_capacity(horizon);
        let mut dev = stationary_sd * rng.sample::<f64, _>(StandardNormal);
        cov.push(mean + dev);
        for _ in 1..horizon {
            dev = AR_COEF * dev + rng.sample::<f64, _>(StandardNormal);
            cov.push(mean + dev);
        }

        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (j, &c) in cov.iter().enumerate().take(w) {
            let mut row: Vec<Option<f64>> = (0..cfg.n_features)
                .map(|_| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let keep = rng.random::<f64>() < cfg.observation_rate;
                    keep.then_some(c + noise)
                })
                .collect();
            if (j == 0 || j == w - 1) && row.iter().all(Option::is_none) {
                let f = rng.random_range(0..cfg.n_features);
                row[f] = Some(c + rng.sample::<f64, _>(StandardNormal));
            }
            if row.iter().any(Option::is_some) {
                timestamps.push(j as f64 * cfg.bin_width);
                values.push(row);
            }
        }

        let mut hazards = Array2::zeros((cfg.t_m, b));
        for t in 1..=cfg.t_m {
            let c = cov[w - 1 + t];
            let mut total = 0.0;
            for k in 0..b {
                let h = cfg.base_hazards[k] * (cfg.covariate_effect[k] * c).exp();
                hazards[[t - 1, k]] = h;
                total += h;
            }
            if total > MAX_TOTAL_HAZARD {
                n_clamped += 1;
                let scale = MAX_TOTAL_HAZARD / total;
                hazards.row_mut(t - 1).mapv_inplace(|h| h * scale);
            }
        }

        let mut observed_time = cfg.t_m as u32;
        let mut event_type = None;
        'bins: for t in 1..=cfg.t_m {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            for k in 0..b {
                cum += hazards[[t - 1, k]];
                if u < cum {
                    observed_time = t as u32;
                    event_type = Some(k + 1);
                    break 'bins;
                }
            }
            if rng.random::<f64>() < cfg.censoring_hazard {
                observed_time = t as u32;
                break;
            }
        }

        records.push(SurvivalRecord {
            id: id.clone(),
            observed_time,
            event_type,
            series: IrregularSeries::new(timestamps, values)?,
        });
        oracle.push(OracleRecord { id, regime, hazards });
    }

    let cells = (cfg.n_subjects * cfg.t_m).max(1);
    let clamped_fraction = n_clamped as f64 / cells as f64;
    let mut warnings = Vec::new();
    if clamped_fraction > 0.01 {
        let msg = format!(
            "total hazard clamped to {MAX_TOTAL_HAZARD} in {:.2}% of subject-bins",
            100.0 * clamped_fraction
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let names = (0..cfg.n_features).map(|f| format!("x{f}")).collect();
    Ok(SimOutput {
        dataset: Dataset::new(names, b, records)?,
        oracle,
        clamped_fraction,
        warnings,
    })
}
