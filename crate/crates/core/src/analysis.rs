//! Latent summaries, k-means and per-cluster incidence curves.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_batch, Dataset, Outcome};
use crate::error::{Error, Result};
use crate::metrics::{aalen_johansen, AalenJohansen};
use crate::model::Model;
use crate::nn::Tape;
use crate::odeint::SolverSettings;

/// Event-`k` cause-module embedding summed over bins `1..=horizon`, one row
/// per subject (posterior mean input).
pub fn latent_summary(
    model: &Model,
    data: &Dataset,
    k: usize,
    horizon: usize,
    solver: &SolverSettings,
    batch_size: usize,
) -> Result<Array2<f64>> {
    if k < 1 || k > model.arch.n_events {
        return Err(Error::Contract(format!(
            "event {k} outside 1..={}",
            model.arch.n_events
        )));
    }
    if horizon == 0 {
        return Err(Error::Contract("horizon must be >= 1".into()));
    }
    let width = model.arch.cause_width;
    let mut out = Array2::zeros((data.len(), width));
    let mut offset = 0;
    for chunk in data.records.chunks(batch_size.max(1)) {
        let batch = build_batch(chunk)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let (mu, _) = model.encoder.posterior_var(&mut tape, &p, &batch, solver)?;
        let traj = model.decoder.trajectory_var(&mut tape, &p, mu, horizon, solver)?;
        let hv = model.decoder.hazards_var(&mut tape, &p, &traj)?;
        let emb = tape.value(hv.embeddings[k - 1]);
        let b = chunk.len();
        for i in 0..b {
            for t in 1..=horizon {
                let row = emb.row((t - 1) * b + i);
                let mut acc = out.row_mut(offset + i);
                acc += &row;
            }
        }
        offset += b;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from k-means++ seeds. An empty cluster is re-seeded
/// with the point farthest from its current centroid.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(Error::Contract(format!("k-means needs 1 <= k <= rows, got k={k}, rows={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = x.ncols();
    let mut centroids = Array2::zeros((k, dim));
    let mut chosen = vec![rng.random_range(0..n)];
    centroids.row_mut(0).assign(&x.row(chosen[0]));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // every point coincides with a centre: take an unused index
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(pick);
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(x.row(i), &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            inertia += d;
        }
        trace.push(inertia);
        if !changed {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut s = sums.row_mut(labels[i]);
            s += &x.row(i);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(x.row(a), centroids.row(labels[a]));
                        let db = sq_dist(x.row(b), centroids.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= k leaves a cluster with two points");
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
                let row: Array1<f64> = x.row(far).to_owned();
                centroids.row_mut(c).assign(&row);
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(labels[i]))).sum();
    Ok(KMeansResult {
        labels,
        centroids,
        inertia,
        trace,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCurves {
    pub cluster: usize,
    pub size: usize,
    /// `None` for an empty cluster.
    pub curves: Option<AalenJohansen>,
}

/// Aalen–Johansen curves within each cluster `0..n_clusters`.
pub fn cluster_incidence(labels: &[usize], outcomes: &[Outcome], n_clusters: usize, n_events: usize) -> Result<Vec<ClusterCurves>> {
    if labels.len() != outcomes.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} subjects",
            labels.len(),
            outcomes.len()
        )));
    }
    Ok((0..n_clusters)
        .map(|c| {
            let members: Vec<Outcome> = labels
                .iter()
                .zip(outcomes)
                .filter(|(l, _)| **l == c)
                .map(|(_, o)| *o)
                .collect();
            if members.is_empty() {
                log::warn!("cluster {c} is empty; its curves are omitted");
            }
            ClusterCurves {
                cluster: c,
                size: members.len(),
                curves: (!members.is_empty()).then(|| aalen_johansen(&members, n_events)),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((60, 2), |(i, _)| {
            let centre = if i < 30 { -10.0 } else { 10.0 };
            centre + rng.sample::<f64, _>(StandardNormal)
        });
        let r = kmeans(&x, 2, 4, 100).unwrap();
        assert!(r.labels[..30].iter().all(|&l| l == r.labels[0]));
        assert!(r.labels[30..].iter().all(|&l| l == r.labels[30]));
        assert_ne!(r.labels[0], r.labels[30]);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn k_equals_n() {
        let x = ndarray::array![[0.0, 1.0], [2.0, 3.0], [5.0, -1.0]];
        let r = kmeans(&x, 3, 0, 10).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut l = r.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2]);
        assert!(kmeans(&x, 4, 0, 10).is_err());
    }

    #[test]
    fn duplicates_share_cluster() {
        let x = ndarray::array![[1.0, 1.0], [1.0, 1.0], [8.0, 8.0], [9.0, 8.0]];
        let r = kmeans(&x, 2, 3, 10).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
    }

    #[test]
    fn single_cluster_is_whole_sample() {
        let outs = [
            Outcome { time: 1, event: Some(1) },
            Outcome { time: 3, event: None },
            Outcome { time: 2, event: Some(2) },
        ];
        let c = cluster_incidence(&[0, 0, 0], &outs, 1, 2).unwrap();
        assert_eq!(c[0].curves.as_ref().unwrap(), &aalen_johansen(&outs, 2));
        let c = cluster_incidence(&[0, 0, 0], &outs, 2, 2).unwrap();
        assert!(c[1].curves.is_none());
    }
}
