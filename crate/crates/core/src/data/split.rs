use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition of `0..n`; train and valid sizes are rounded, test
/// takes the remainder.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(SplitIndices {
        train: idx,
        valid,
        test,
    })
}

pub fn split(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let s = split_indices(data.len(), fractions, seed)?;
    Ok((data.subset(&s.train), data.subset(&s.valid), data.subset(&s.test)))
}

/// Removes `round_half_down(rate·L)` timepoints per subject, at most `L−1`,
/// never the first one.
pub fn drop_measurements(data: &Dataset, missing_rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Validation(format!(
            "missing_rate must lie in [0, 1), got {missing_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    for r in &mut out.records {
        let l = r.series.len();
        if l < 2 {
            continue;
        }
        let n_drop = ((missing_rate * l as f64 - 0.5).ceil().max(0.0) as usize).min(l - 1);
        if n_drop == 0 {
            continue;
        }
        let mut dropped = vec![false; l];
        for j in index::sample(&mut rng, l - 1, n_drop) {
            dropped[j + 1] = true;
        }
        r.series = r.series.retain_indices(|j| !dropped[j]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IrregularSeries, SurvivalRecord};

    fn dataset(n: usize, l: usize) -> Dataset {
        let records = (0..n)
            .map(|i| SurvivalRecord {
                id: format!("s{i}"),
                observed_time: 2,
                event_type: Some(1),
                series: IrregularSeries::new(
                    (0..l).map(|t| t as f64).collect(),
                    (0..l).map(|t| vec![Some(t as f64)]).collect(),
                )
                .unwrap(),
            })
            .collect();
        Dataset::new(vec!["x".into()], 1, records).unwrap()
    }

    #[test]
    fn standard_ratios() {
        let s = split_indices(100, (0.55, 0.15, 0.30), 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (55, 15, 30));
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_indices(100, (0.55, 0.15, 0.30), 7).unwrap());
    }

    #[test]
    fn zero_fraction_rejected() {
        assert!(split_indices(10, (1.0, 0.0, 0.0), 1).is_err());
        assert!(split_indices(10, (0.5, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn drop_counts() {
        let d = dataset(3, 10);
        assert_eq!(drop_measurements(&d, 0.0, 1).unwrap(), d);
        let half = drop_measurements(&d, 0.5, 1).unwrap();
        for (r, orig) in half.records.iter().zip(&d.records) {
            assert_eq!(r.series.len(), 5);
            assert_eq!(r.series.timestamps()[0], 0.0);
            assert_eq!(r.outcome(), orig.outcome());
        }
        assert_eq!(half, drop_measurements(&d, 0.5, 1).unwrap());
        // 0.25 · 10 = 2.5 rounds down to 2
        let q = drop_measurements(&d, 0.25, 3).unwrap();
        assert!(q.records.iter().all(|r| r.series.len() == 8));
    }
}
