use ndarray::{s, Array2, Array3};

use super::SurvivalRecord;
use crate::error::{Error, Result};

/// Grid-aligned values, masks and time-since-last-observation channels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub ids: Vec<String>,
    /// Sorted union of every subject's timestamps.
    pub grid: Vec<f64>,
    /// `(batch, grid, M)`, zero where unobserved.
    pub x: Array3<f64>,
    pub m: Array3<f64>,
    pub delta: Array3<f64>,
    pub per_subject_latest: Vec<usize>,
    pub per_subject_first: Vec<usize>,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.dim().2
    }

    /// GRU input `[x, m, Δ]` at grid index `g`, one row per subject.
    pub fn input_at(&self, g: usize) -> Array2<f64> {
        let (b, _, m) = self.x.dim();
        let mut out = Array2::zeros((b, 3 * m));
        out.slice_mut(s![.., 0..m]).assign(&self.x.slice(s![.., g, ..]));
        out.slice_mut(s![.., m..2 * m]).assign(&self.m.slice(s![.., g, ..]));
        out.slice_mut(s![.., 2 * m..]).assign(&self.delta.slice(s![.., g, ..]));
        out
    }

    /// Whether subject `i` has at least one observed feature at grid index `g`.
    pub fn observed_any(&self, i: usize, g: usize) -> bool {
        self.m.slice(s![i, g, ..]).iter().any(|&v| v > 0.0)
    }
}

pub fn build_batch(records: &[SurvivalRecord]) -> Result<EncodedBatch> {
    if records.is_empty() {
        return Err(Error::Contract("cannot build a batch from zero records".into()));
    }
    let mut n_feat: Option<usize> = None;
    for r in records {
        if r.series.is_empty() {
            return Err(Error::Subject {
                id: r.id.clone(),
                source: Box::new(Error::Contract("empty series".into())),
            });
        }
        let m = r.series.n_features().expect("nonempty series");
        match n_feat {
            None => n_feat = Some(m),
            Some(prev) if prev != m => {
                return Err(Error::Dimension(format!(
                    "subject {} has {m} features, batch has {prev}",
                    r.id
                )))
            }
            _ => {}
        }
    }
    let n_feat = n_feat.expect("nonempty batch");

    let mut grid: Vec<f64> = records
        .iter()
        .flat_map(|r| r.series.timestamps().iter().copied())
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let index_of = |t: f64| grid.binary_search_by(|g| g.total_cmp(&t)).expect("t on grid");

    let shape = (records.len(), grid.len(), n_feat);
    let mut x = Array3::zeros(shape);
    let mut m = Array3::zeros(shape);
    let mut delta = Array3::zeros(shape);
    let mut latest = Vec::with_capacity(records.len());
    let mut first = Vec::with_capacity(records.len());

    for (i, r) in records.iter().enumerate() {
        let ts = r.series.timestamps();
        for (t, row) in ts.iter().zip(r.series.values()) {
            let g = index_of(*t);
            for (f, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    x[[i, g, f]] = *v;
                    m[[i, g, f]] = 1.0;
                }
            }
        }
        first.push(index_of(ts[0]));
        latest.push(index_of(*ts.last().expect("nonempty")));

        for f in 0..n_feat {
            let mut last_seen: Option<f64> = None;
            for (g, &t) in grid.iter().enumerate() {
                if m[[i, g, f]] > 0.0 {
                    last_seen = Some(t);
                } else {
                    delta[[i, g, f]] = t - last_seen.unwrap_or(grid[0]);
                }
            }
        }
    }

    Ok(EncodedBatch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        grid,
        x,
        m,
        delta,
        per_subject_latest: latest,
        per_subject_first: first,
    })
}
