//! Competing-risks evaluation: censoring weights, time-dependent AUC and
//! Brier score, Aalen–Johansen curves and restricted mean failure time.
//!
//! The AUC follows the weighted pair formula with ties counted as
//! concordant (`F̂_j ≤ F̂_i`), and only the case weight `1/Ĝ(tᵢ⁻)` appears.
//! Toolkits that give ties half credit or also weight controls will report
//! different numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Outcome;
use crate::decoder::SurvivalCurves;
use crate::error::{Error, Result};

/// Right-continuous step function, `initial` left of the first breakpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
}

impl StepFunction {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>, initial: f64) -> Result<Self> {
        if breakpoints.len() != values.len() {
            return Err(Error::Dimension("breakpoints and values differ in length".into()));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("breakpoints must be strictly increasing".into()));
        }
        Ok(Self {
            breakpoints,
            values,
            initial,
        })
    }

    pub fn value(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b <= t) {
            0 => self.initial,
            j => self.values[j - 1],
        }
    }

    /// Limit from the left at `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b < t) {
            0 => self.initial,
            j => self.values[j - 1],
        }
    }
}

struct TimeCounts {
    time: f64,
    at_risk: usize,
    /// Events by type, index 0 unused.
    events: Vec<usize>,
    censored: usize,
}

fn tabulate(outcomes: &[Outcome], n_events: usize) -> Vec<TimeCounts> {
    let mut sorted: Vec<&Outcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.time);
    let n = sorted.len();
    let mut out: Vec<TimeCounts> = Vec::new();
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let mut row = TimeCounts {
            time: t as f64,
            at_risk: n - i,
            events: vec![0; n_events + 1],
            censored: 0,
        };
        while i < n && sorted[i].time == t {
            match sorted[i].event {
                Some(k) => row.events[k.min(n_events)] += 1,
                None => row.censored += 1,
            }
            i += 1;
        }
        out.push(row);
    }
    out
}

fn max_event(outcomes: &[Outcome]) -> usize {
    outcomes.iter().filter_map(|o| o.event).max().unwrap_or(1)
}

/// Kaplan–Meier of the censoring distribution. At tied times events leave
/// the risk set before censorings.
pub fn km_censoring(outcomes: &[Outcome]) -> StepFunction {
    let mut g = 1.0;
    let mut bps = Vec::new();
    let mut vals = Vec::new();
    for row in tabulate(outcomes, max_event(outcomes)) {
        let d: usize = row.events.iter().sum();
        let remaining = row.at_risk - d;
        if remaining > 0 && row.censored > 0 {
            g *= 1.0 - row.censored as f64 / remaining as f64;
        }
        bps.push(row.time);
        vals.push(g);
    }
    StepFunction::new(bps, vals, 1.0).expect("times are strictly increasing")
}

/// Kaplan–Meier of all-cause event-free survival.
pub fn km_survival(outcomes: &[Outcome]) -> StepFunction {
    let mut s = 1.0;
    let mut bps = Vec::new();
    let mut vals = Vec::new();
    for row in tabulate(outcomes, max_event(outcomes)) {
        let d: usize = row.events.iter().sum();
        s *= 1.0 - d as f64 / row.at_risk as f64;
        bps.push(row.time);
        vals.push(s);
    }
    StepFunction::new(bps, vals, 1.0).expect("times are strictly increasing")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AalenJohansen {
    pub survival: StepFunction,
    /// `cif[k−1]` is `F̂_k`.
    pub cif: Vec<StepFunction>,
}

pub fn aalen_johansen(outcomes: &[Outcome], n_events: usize) -> AalenJohansen {
    let mut s = 1.0;
    let mut f = vec![0.0; n_events];
    let mut bps = Vec::new();
    let mut s_vals = Vec::new();
    let mut f_vals = vec![Vec::new(); n_events];
    for row in tabulate(outcomes, n_events) {
        let n = row.at_risk as f64;
        for k in 1..=n_events {
            f[k - 1] += row.events[k] as f64 / n * s;
        }
        let d: usize = row.events.iter().sum();
        s *= 1.0 - d as f64 / n;
        bps.push(row.time);
        s_vals.push(s);
        for k in 0..n_events {
            f_vals[k].push(f[k]);
        }
    }
    AalenJohansen {
        survival: StepFunction::new(bps.clone(), s_vals, 1.0).expect("sorted"),
        cif: f_vals
            .into_iter()
            .map(|v| StepFunction::new(bps.clone(), v, 0.0).expect("sorted"))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AucResult {
    pub auc: f64,
    pub n_pairs: usize,
}

fn check_len(pred: &[f64], outcomes: &[Outcome]) -> Result<()> {
    if pred.len() != outcomes.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} subjects",
            pred.len(),
            outcomes.len()
        )));
    }
    Ok(())
}

/// Cumulative/dynamic AUC for event `k` at time `t`; `pred[i] = F̂_k(t | Xᵢ)`.
pub fn td_auc(pred: &[f64], outcomes: &[Outcome], k: usize, t: f64) -> Result<AucResult> {
    let g = km_censoring(outcomes);
    td_auc_weighted(pred, outcomes, k, t, |ti| 1.0 / g.left_limit(ti))
}

/// As [`td_auc`] with a caller-supplied case weight `w(tᵢ)`.
pub fn td_auc_weighted(
    pred: &[f64],
    outcomes: &[Outcome],
    k: usize,
    t: f64,
    weight: impl Fn(f64) -> f64,
) -> Result<AucResult> {
    check_len(pred, outcomes)?;
    let controls: Vec<f64> = outcomes
        .iter()
        .zip(pred)
        .filter(|(o, _)| o.time as f64 > t)
        .map(|(_, &p)| p)
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut n_pairs = 0;
    for (o, &pi) in outcomes.iter().zip(pred) {
        if o.time as f64 <= t && o.event == Some(k) && !controls.is_empty() {
            let w = weight(o.time as f64);
            let concordant = controls.iter().filter(|&&pj| pj <= pi).count();
            num += w * concordant as f64;
            den += w * controls.len() as f64;
            n_pairs += controls.len();
        }
    }
    if n_pairs == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(AucResult {
        auc: num / den,
        n_pairs,
    })
}

/// Time-dependent Brier score for event `k` at `t`, averaged over all
/// subjects. Subjects censored before `t` or with a competing event by `t`
/// add nothing but still count in the denominator.
pub fn td_brier(pred: &[f64], outcomes: &[Outcome], k: usize, t: f64) -> Result<f64> {
    check_len(pred, outcomes)?;
    let g = km_censoring(outcomes);
    let g_t = g.value(t);
    let mut total = 0.0;
    let mut degenerate = Vec::new();
    for (i, (o, &p)) in outcomes.iter().zip(pred).enumerate() {
        let ti = o.time as f64;
        if ti <= t && o.event == Some(k) {
            let gi = g.left_limit(ti);
            if gi <= 0.0 {
                degenerate.push(i.to_string());
            } else {
                total += (1.0 - p).powi(2) / gi;
            }
        } else if ti > t {
            if g_t <= 0.0 {
                degenerate.push(i.to_string());
            } else {
                total += p * p / g_t;
            }
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateWeight(degenerate));
    }
    Ok(total / outcomes.len() as f64)
}

/// `Σ_{t=1..horizon} F_k(t) · bin_width`; `f` covers bins `0..=t_m`.
pub fn rmft(f: &[f64], horizon: usize, bin_width: f64) -> Result<f64> {
    if horizon == 0 || horizon >= f.len() {
        return Err(Error::Contract(format!(
            "horizon {horizon} outside 1..={}",
            f.len().saturating_sub(1)
        )));
    }
    Ok(f[1..=horizon].iter().sum::<f64>() * bin_width)
}

/// Nearest-rank percentiles of the observed times of event `k`.
pub fn event_time_percentiles(outcomes: &[Outcome], k: usize, percentiles: &[f64]) -> Option<Vec<u32>> {
    let mut times: Vec<u32> = outcomes
        .iter()
        .filter(|o| o.event == Some(k))
        .map(|o| o.time)
        .collect();
    if times.is_empty() {
        return None;
    }
    times.sort_unstable();
    let n = times.len();
    Some(
        percentiles
            .iter()
            .map(|&p| {
                let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
                times[rank.min(n) - 1]
            })
            .collect(),
    )
}

/// Statistic recomputed on `n_boot` resamples with replacement; resamples
/// where the statistic is undefined are skipped.
pub fn bootstrap<F>(n: usize, n_boot: usize, seed: u64, mut statistic: F) -> Vec<f64>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_boot);
    let mut idx = vec![0; n];
    for _ in 0..n_boot {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n);
        }
        if let Ok(s) = statistic(&idx) {
            out.push(s);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub event: usize,
    pub percentile: f64,
    pub t: Option<u32>,
    pub auc: Option<f64>,
    pub brier: Option<f64>,
    pub n_pairs: usize,
    pub reason: String,
}

/// AUC and Brier per event at the given percentiles of its event times.
pub fn evaluate_curves(
    curves: &[SurvivalCurves],
    outcomes: &[Outcome],
    n_events: usize,
    percentiles: &[f64],
) -> Result<Vec<MetricsRow>> {
    if curves.len() != outcomes.len() {
        return Err(Error::Dimension(format!(
            "{} curves for {} subjects",
            curves.len(),
            outcomes.len()
        )));
    }
    let t_m = curves.iter().map(SurvivalCurves::t_m).min().unwrap_or(0);
    let mut rows = Vec::new();
    for k in 1..=n_events {
        let times = event_time_percentiles(outcomes, k, percentiles);
        for (j, &pct) in percentiles.iter().enumerate() {
            let mut row = MetricsRow {
                event: k,
                percentile: pct,
                t: None,
                auc: None,
                brier: None,
                n_pairs: 0,
                reason: String::new(),
            };
            let Some(times) = &times else {
                row.reason = "no comparable pairs".into();
                rows.push(row);
                continue;
            };
            let t = times[j];
            row.t = Some(t);
            if t as usize > t_m {
                row.reason = "beyond prediction horizon".into();
                rows.push(row);
                continue;
            }
            let pred: Vec<f64> = curves.iter().map(|c| c.f[k - 1][t as usize]).collect();
            let mut reasons = Vec::new();
            match td_auc(&pred, outcomes, k, t as f64) {
                Ok(a) => {
                    row.auc = Some(a.auc);
                    row.n_pairs = a.n_pairs;
                }
                Err(e) => reasons.push(e.to_string()),
            }
            match td_brier(&pred, outcomes, k, t as f64) {
                Ok(b) => row.brier = Some(b),
                Err(e) => reasons.push(e.to_string()),
            }
            row.reason = reasons.join("; ");
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(time: u32, event: Option<usize>) -> Outcome {
        Outcome { time, event }
    }

    #[test]
    fn km_examples() {
        let g = km_censoring(&[o(1, Some(1)), o(2, Some(1)), o(3, Some(2))]);
        assert!(g.values.iter().all(|&v| v == 1.0));
        let g = km_censoring(&[o(1, None), o(2, Some(1)), o(3, None)]);
        assert!((g.value(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.value(3.0), 0.0);
        assert_eq!(g.value(0.5), 1.0);
        assert!((g.left_limit(3.0) - 2.0 / 3.0).abs() < 1e-15);
        let g = km_censoring(&[o(4, None), o(4, None)]);
        assert_eq!(g.value(3.9), 1.0);
        assert_eq!(g.value(4.0), 0.0);
    }

    #[test]
    fn auc_examples() {
        let outs = [o(1, Some(1)), o(5, None), o(5, None)];
        assert_eq!(td_auc(&[0.9, 0.5, 0.2], &outs, 1, 2.0).unwrap().auc, 1.0);
        assert_eq!(td_auc(&[0.1, 0.5, 0.2], &outs, 1, 2.0).unwrap().auc, 0.0);
        assert_eq!(td_auc(&[0.3, 0.3, 0.3], &outs, 1, 2.0).unwrap().auc, 1.0);
        assert!(matches!(td_auc(&[0.3; 3], &outs, 2, 2.0), Err(Error::NoComparablePairs)));
    }

    #[test]
    fn brier_examples() {
        let outs = [o(1, Some(1)), o(5, None)];
        assert_eq!(td_brier(&[1.0, 0.0], &outs, 1, 2.0).unwrap(), 0.0);
        assert_eq!(td_brier(&[0.5], &[o(5, None)], 1, 2.0).unwrap(), 0.25);
        let outs = [o(1, Some(1)), o(1, Some(2)), o(5, None)];
        let b = td_brier(&[1.0, 0.7, 0.5], &outs, 1, 2.0).unwrap();
        assert!((b - 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aj_example() {
        let aj = aalen_johansen(&[o(1, Some(1)), o(2, Some(2)), o(3, None)], 2);
        assert!((aj.cif[0].value(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((aj.cif[1].value(2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((aj.survival.value(2.0) - 1.0 / 3.0).abs() < 1e-15);
        for &t in &aj.survival.breakpoints {
            let total = aj.survival.value(t) + aj.cif.iter().map(|f| f.value(t)).sum::<f64>();
            assert!((total - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn aj_without_censoring_is_ecdf() {
        let outs = [o(2, Some(1)), o(1, Some(1)), o(2, Some(1)), o(4, Some(1))];
        let aj = aalen_johansen(&outs, 1);
        assert!((aj.cif[0].value(1.0) - 0.25).abs() < 1e-15);
        assert!((aj.cif[0].value(2.0) - 0.75).abs() < 1e-15);
        assert!((aj.cif[0].value(4.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rmft_examples() {
        assert!((rmft(&[0.0, 0.1, 0.17, 0.219], 3, 1.0).unwrap() - 0.489).abs() < 1e-12);
        assert_eq!(rmft(&[0.0; 5], 4, 1.0).unwrap(), 0.0);
        assert!((rmft(&[0.2; 6], 5, 2.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(rmft(&[0.0; 3], 3, 1.0).is_err());
    }

    #[test]
    fn percentiles_nearest_rank() {
        let outs: Vec<Outcome> = (1..=10).map(|t| o(t, Some(1))).collect();
        assert_eq!(event_time_percentiles(&outs, 1, &[25.0, 50.0, 75.0]).unwrap(), vec![3, 5, 8]);
        assert!(event_time_percentiles(&outs, 2, &[50.0]).is_none());
    }
}
