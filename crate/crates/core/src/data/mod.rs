//! Subjects, irregular series, batches and synthetic data.

mod batch;
mod io;
mod simulate;
mod split;

pub use batch::{build_batch, EncodedBatch};
pub use io::{
    ingest_long_csv, ingest_split_csv, read_dataset_dir, read_oracle_csv, write_dataset_dir,
    write_oracle_csv, CsvSchema, DatasetMeta,
};
pub use simulate::{simulate, OracleRecord, SimConfig, SimOutput, AR_COEF, MAX_TOTAL_HAZARD};
pub use split::{drop_measurements, split, split_indices, SplitIndices};

use crate::error::{Error, Result};

/// Feature observations at strictly increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct IrregularSeries {
    timestamps: Vec<f64>,
    /// `values[j][f]` is feature `f` at `timestamps[j]`, if recorded.
    values: Vec<Vec<Option<f64>>>,
}

impl IrregularSeries {
    pub fn new(timestamps: Vec<f64>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} timestamps but {} value rows",
                timestamps.len(),
                values.len()
            )));
        }
        if timestamps.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Validation("timestamps must be finite and nonnegative".into()));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("timestamps must be strictly increasing".into()));
        }
        if let Some(first) = values.first() {
            if values.iter().any(|row| row.len() != first.len()) {
                return Err(Error::Dimension("ragged feature rows".into()));
            }
        }
        if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("observed values must be finite".into()));
        }
        Ok(Self { timestamps, values })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> Option<usize> {
        self.values.first().map(Vec::len)
    }

    pub fn latest_time(&self) -> Option<f64> {
        self.timestamps.last().copied()
    }

    /// Keep only the timepoints whose index satisfies `keep`.
    pub fn retain_indices(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let (timestamps, values) = self
            .timestamps
            .iter()
            .zip(&self.values)
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, (t, v))| (*t, v.clone()))
            .unzip();
        Self { timestamps, values }
    }
}

/// Observed outcome: remaining-time bin and event type (`None` = censored).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub time: u32,
    pub event: Option<usize>,
}

impl Outcome {
    pub fn is_event(&self) -> bool {
        self.event.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub id: String,
    /// Bins from the latest measurement to event or censoring.
    pub observed_time: u32,
    /// Event type in `1..=b`; `None` when censored.
    pub event_type: Option<usize>,
    pub series: IrregularSeries,
}

impl SurvivalRecord {
    pub fn event_indicator(&self) -> bool {
        self.event_type.is_some()
    }

    pub fn outcome(&self) -> Outcome {
        Outcome {
            time: self.observed_time,
            event: self.event_type,
        }
    }

    pub fn validate(&self, n_events: usize) -> Result<()> {
        if self.observed_time < 1 {
            return Err(Error::Validation(format!(
                "subject {}: observed_time must be >= 1",
                self.id
            )));
        }
        if let Some(k) = self.event_type {
            if k < 1 || k > n_events {
                return Err(Error::Validation(format!(
                    "subject {}: event type {k} outside 1..={n_events}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub n_events: usize,
    pub records: Vec<SurvivalRecord>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        n_events: usize,
        records: Vec<SurvivalRecord>,
    ) -> Result<Self> {
        let m = feature_names.len();
        for r in &records {
            r.validate(n_events)?;
            if let Some(rm) = r.series.n_features() {
                if rm != m {
                    return Err(Error::Dimension(format!(
                        "subject {} has {rm} features, dataset declares {m}",
                        r.id
                    )));
                }
            }
        }
        Ok(Self {
            feature_names,
            n_events,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn outcomes(&self) -> Vec<Outcome> {
        self.records.iter().map(SurvivalRecord::outcome).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            n_events: self.n_events,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}
