//! Long-format CSV ingestion and dataset directories.
//!
//! A dataset directory holds `features.csv` (`id,time,feature,value`),
//! `outcomes.csv` (`id,observed_time,event_type,event_indicator`) and an
//! optional `meta.json` declaring the event count and feature order.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, IrregularSeries, OracleRecord, SurvivalRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub feature: String,
    pub value: String,
    pub observed_time: String,
    pub event_type: String,
    pub event_indicator: String,
    /// Declared event count `b`.
    pub n_events: usize,
    /// Fixed feature order; inferred (sorted) when absent.
    pub feature_names: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn standard(n_events: usize) -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            feature: "feature".into(),
            value: "value".into(),
            observed_time: "observed_time".into(),
            event_type: "event_type".into(),
            event_indicator: "event_indicator".into(),
            n_events,
            feature_names: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_events: usize,
    pub feature_names: Vec<String>,
    pub bin_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RawOutcome {
    observed_time: u32,
    event_type: Option<usize>,
}

#[derive(Default)]
struct Collector {
    order: Vec<String>,
    outcomes: HashMap<String, RawOutcome>,
    obs: HashMap<String, Vec<(f64, String, f64)>>,
}

fn col(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Validation(format!("missing column `{name}`")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<&str> {
    rec.get(idx).map(str::trim).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field {idx}"),
    })
}

fn parse_f64(s: &str, what: &str, line: u64) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("{what}: cannot parse `{s}` as a number"),
    })
}

fn parse_outcome(
    rec: &csv::StringRecord,
    cols: (usize, usize, usize),
    line: u64,
) -> Result<RawOutcome> {
    let t = field(rec, cols.0, line)?;
    let observed = parse_f64(t, "observed_time", line)?;
    if observed.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            msg: format!("observed_time `{t}` is not an integer bin"),
        });
    }
    if observed < 1.0 {
        return Err(Error::Validation(format!(
            "line {line}: observed_time must be >= 1, got {t}"
        )));
    }
    let ind = match field(rec, cols.2, line)? {
        "1" | "true" | "True" | "TRUE" => true,
        "0" | "false" | "False" | "FALSE" => false,
        other => {
            return Err(Error::Parse {
                line,
                msg: format!("event_indicator `{other}` is not 0/1"),
            })
        }
    };
    let k = field(rec, cols.1, line)?;
    let event_type = if k.is_empty() {
        None
    } else {
        let v = parse_f64(k, "event_type", line)?;
        if v.fract() != 0.0 || v < 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("event_type `{k}` is not a nonnegative integer"),
            });
        }
        Some(v as usize)
    };
    let event_type = match (ind, event_type) {
        (true, Some(k)) => Some(k),
        (true, None) => {
            return Err(Error::Validation(format!(
                "line {line}: event_indicator=1 without event_type"
            )))
        }
        // a censored row may carry a placeholder 0
        (false, None) | (false, Some(0)) => None,
        (false, Some(k)) => {
            return Err(Error::Validation(format!(
                "line {line}: censored row carries event_type {k}"
            )))
        }
    };
    Ok(RawOutcome {
        observed_time: observed as u32,
        event_type,
    })
}

impl Collector {
    fn note_id(&mut self, id: &str) {
        if !self.outcomes.contains_key(id) && !self.obs.contains_key(id) {
            self.order.push(id.to_string());
        }
    }

    fn set_outcome(&mut self, id: &str, o: RawOutcome, line: u64) -> Result<()> {
        match self.outcomes.get(id) {
            Some(prev) if *prev != o => Err(Error::Validation(format!(
                "line {line}: conflicting outcome for subject {id}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.outcomes.insert(id.to_string(), o);
                Ok(())
            }
        }
    }

    fn push_obs(&mut self, id: &str, rec: &csv::StringRecord, cols: (usize, usize, usize)) -> Result<()> {
        let line = line_of(rec);
        let time = parse_f64(field(rec, cols.0, line)?, "time", line)?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::Validation(format!(
                "line {line}: time must be finite and nonnegative"
            )));
        }
        let feature = field(rec, cols.1, line)?.to_string();
        let raw = field(rec, cols.2, line)?;
        if raw.is_empty() {
            return Ok(());
        }
        let value = parse_f64(raw, "value", line)?;
        if !value.is_finite() {
            return Err(Error::Validation(format!("line {line}: non-finite value")));
        }
        self.obs
            .entry(id.to_string())
            .or_default()
            .push((time, feature, value));
        Ok(())
    }

    fn finish(mut self, schema: &CsvSchema) -> Result<Dataset> {
        let feature_names = match &schema.feature_names {
            Some(names) => names.clone(),
            None => {
                let set: BTreeSet<&str> = self
                    .obs
                    .values()
                    .flatten()
                    .map(|(_, f, _)| f.as_str())
                    .collect();
                set.into_iter().map(String::from).collect()
            }
        };
        let index: HashMap<&str, usize> = feature_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let m = feature_names.len();

        let mut records = Vec::with_capacity(self.order.len());
        for id in &self.order {
            let outcome = self.outcomes.get(id).copied().ok_or_else(|| {
                Error::Validation(format!("subject {id} has features but no outcome"))
            })?;
            let mut obs = self.obs.remove(id).unwrap_or_default();
            // stable sort keeps file order among duplicates; the last one wins below
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut timestamps: Vec<f64> = Vec::new();
            let mut values: Vec<Vec<Option<f64>>> = Vec::new();
            for (t, f, v) in obs {
                let fi = *index.get(f.as_str()).ok_or_else(|| {
                    Error::Validation(format!("subject {id}: unknown feature `{f}`"))
                })?;
                if timestamps.last() != Some(&t) {
                    timestamps.push(t);
                    values.push(vec![None; m]);
                }
                values.last_mut().expect("pushed above")[fi] = Some(v);
            }
            let record = SurvivalRecord {
                id: id.clone(),
                observed_time: outcome.observed_time,
                event_type: outcome.event_type,
                series: IrregularSeries::new(timestamps, values)?,
            };
            record.validate(schema.n_events)?;
            records.push(record);
        }
        Dataset::new(feature_names, schema.n_events, records)
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn map_csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Csv(e),
        _ => Error::Parse {
            line,
            msg: e.to_string(),
        },
    }
}

/// Single long file: one row per observation, outcome columns repeated
/// on every row of a subject.
pub fn ingest_long_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(map_csv_err)?.clone();
    let mut c = Collector::default();
    if headers.is_empty() {
        return c.finish(schema);
    }
    let id_c = col(&headers, &schema.id)?;
    let obs_cols = (
        col(&headers, &schema.time)?,
        col(&headers, &schema.feature)?,
        col(&headers, &schema.value)?,
    );
    let out_cols = (
        col(&headers, &schema.observed_time)?,
        col(&headers, &schema.event_type)?,
        col(&headers, &schema.event_indicator)?,
    );
    for rec in rdr.records() {
        let rec = rec.map_err(map_csv_err)?;
        let line = line_of(&rec);
        let id = field(&rec, id_c, line)?.to_string();
        c.note_id(&id);
        let outcome = parse_outcome(&rec, out_cols, line)?;
        c.set_outcome(&id, outcome, line)?;
        c.push_obs(&id, &rec, obs_cols)?;
    }
    c.finish(schema)
}

/// Features and outcomes in separate files; subject order follows the
/// outcomes file.
pub fn ingest_split_csv(features: &Path, outcomes: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut c = Collector::default();

    let mut rdr = reader(outcomes)?;
    let headers = rdr.headers().map_err(map_csv_err)?.clone();
    if !headers.is_empty() {
        let id_c = col(&headers, &schema.id)?;
        let out_cols = (
            col(&headers, &schema.observed_time)?,
            col(&headers, &schema.event_type)?,
            col(&headers, &schema.event_indicator)?,
        );
        for rec in rdr.records() {
            let rec = rec.map_err(map_csv_err)?;
            let line = line_of(&rec);
            let id = field(&rec, id_c, line)?.to_string();
            c.note_id(&id);
            let outcome = parse_outcome(&rec, out_cols, line)?;
            c.set_outcome(&id, outcome, line)?;
        }
    }

    let mut rdr = reader(features)?;
    let headers = rdr.headers().map_err(map_csv_err)?.clone();
    if !headers.is_empty() {
        let id_c = col(&headers, &schema.id)?;
        let obs_cols = (
            col(&headers, &schema.time)?,
            col(&headers, &schema.feature)?,
            col(&headers, &schema.value)?,
        );
        for rec in rdr.records() {
            let rec = rec.map_err(map_csv_err)?;
            let line = line_of(&rec);
            let id = field(&rec, id_c, line)?.to_string();
            if !c.outcomes.contains_key(&id) {
                return Err(Error::Validation(format!(
                    "line {line}: subject {id} has no outcome row"
                )));
            }
            c.push_obs(&id, &rec, obs_cols)?;
        }
    }
    c.finish(schema)
}

pub fn write_dataset_dir(dir: &Path, data: &Dataset, bin_width: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("features.csv"))?;
    w.write_record(["id", "time", "feature", "value"])?;
    for r in &data.records {
        for (t, row) in r.series.timestamps().iter().zip(r.series.values()) {
            for (f, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    w.write_record([
                        r.id.as_str(),
                        &t.to_string(),
                        &data.feature_names[f],
                        &v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("outcomes.csv"))?;
    w.write_record(["id", "observed_time", "event_type", "event_indicator"])?;
    for r in &data.records {
        let k = r.event_type.map(|k| k.to_string()).unwrap_or_default();
        let d = if r.event_indicator() { "1" } else { "0" };
        w.write_record([r.id.as_str(), &r.observed_time.to_string(), &k, d])?;
    }
    w.flush()?;

    let meta = DatasetMeta {
        n_events: data.n_events,
        feature_names: data.feature_names.clone(),
        bin_width,
    };
    let mut f = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Reads a dataset directory; without `meta.json` the event count is the
/// largest observed event type.
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let features = dir.join("features.csv");
    let outcomes = dir.join("outcomes.csv");
    if meta_path.exists() {
        let meta: DatasetMeta = serde_json::from_reader(File::open(&meta_path)?)?;
        let schema = CsvSchema {
            feature_names: Some(meta.feature_names.clone()),
            ..CsvSchema::standard(meta.n_events)
        };
        let data = ingest_split_csv(&features, &outcomes, &schema)?;
        Ok((data, meta))
    } else {
        let probe = ingest_split_csv(&features, &outcomes, &CsvSchema::standard(usize::MAX))?;
        let b = probe
            .records
            .iter()
            .filter_map(|r| r.event_type)
            .max()
            .unwrap_or(1);
        let meta = DatasetMeta {
            n_events: b,
            feature_names: probe.feature_names.clone(),
            bin_width: 1.0,
        };
        Ok((Dataset { n_events: b, ..probe }, meta))
    }
}

pub fn write_oracle_csv(path: &Path, oracle: &[OracleRecord]) -> Result<()> {
    let b = oracle.first().map_or(0, |o| o.hazards.ncols());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "regime".into(), "t".into()];
    header.extend((1..=b).map(|k| format!("lambda_{k}")));
    w.write_record(&header)?;
    for o in oracle {
        for (t, row) in o.hazards.rows().into_iter().enumerate() {
            let mut rec = vec![o.id.clone(), o.regime.to_string(), (t + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_oracle_csv(path: &Path) -> Result<Vec<OracleRecord>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(map_csv_err)?.clone();
    let b = headers.len().saturating_sub(3);
    let mut out: Vec<OracleRecord> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<(String, usize)> = None;
    let flush = |cur: &mut Option<(String, usize)>, rows: &mut Vec<Vec<f64>>, out: &mut Vec<OracleRecord>| {
        if let Some((id, regime)) = cur.take() {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let hazards = Array2::from_shape_vec((rows.len(), b), flat).expect("rectangular rows");
            out.push(OracleRecord { id, regime, hazards });
            rows.clear();
        }
    };
    for rec in rdr.records() {
        let rec = rec.map_err(map_csv_err)?;
        let line = line_of(&rec);
        let id = field(&rec, 0, line)?.to_string();
        let regime = parse_f64(field(&rec, 1, line)?, "regime", line)? as usize;
        if current.as_ref().map(|c| &c.0) != Some(&id) {
            flush(&mut current, &mut rows, &mut out);
            current = Some((id, regime));
        }
        let vals = (0..b)
            .map(|k| parse_f64(field(&rec, 3 + k, line)?, "lambda", line))
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    flush(&mut current, &mut rows, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const HEADER: &str = "id,time,feature,value,observed_time,event_type,event_indicator\n";

    #[test]
    fn two_rows_one_subject() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "long.csv",
            &format!("{HEADER}s1,0,hr,1.5,5,1,1\ns1,3,hr,2.0,5,1,1\n"),
        );
        let d = ingest_long_csv(&p, &CsvSchema::standard(2)).unwrap();
        assert_eq!(d.len(), 1);
        let r = &d.records[0];
        assert_eq!(r.series.latest_time(), Some(3.0));
        assert_eq!(r.observed_time, 5);
        assert_eq!(r.event_type, Some(1));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "empty.csv", "");
        let d = ingest_long_csv(&p, &CsvSchema::standard(2)).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn event_type_beyond_declared_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", &format!("{HEADER}s1,0,hr,1.5,5,3,1\n"));
        let err = ingest_long_csv(&p, &CsvSchema::standard(2)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn observed_time_zero_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", &format!("{HEADER}s1,0,hr,1.5,0,,0\n"));
        assert!(matches!(
            ingest_long_csv(&p, &CsvSchema::standard(2)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "bad.csv",
            &format!("{HEADER}s1,0,hr,1.5,5,1,1\ns1,abc,hr,1.0,5,1,1\n"),
        );
        match ingest_long_csv(&p, &CsvSchema::standard(2)).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicates_keep_last_and_times_sort() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "dup.csv",
            &format!(
                "{HEADER}s1,4,a,1.0,2,,0\ns1,1,b,7.0,2,,0\ns1,4,a,9.0,2,,0\ns2,0,a,3.0,1,2,1\n"
            ),
        );
        let d = ingest_long_csv(&p, &CsvSchema::standard(2)).unwrap();
        assert_eq!(d.feature_names, vec!["a", "b"]);
        let s = &d.records[0].series;
        assert_eq!(s.timestamps(), &[1.0, 4.0]);
        assert_eq!(s.values()[1][0], Some(9.0));
        assert_eq!(s.values()[0][1], Some(7.0));
        assert_eq!(d.records[1].id, "s2");
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let series =
            IrregularSeries::new(vec![0.0, 2.5], vec![vec![Some(0.1), None], vec![None, Some(-3.25)]])
                .unwrap();
        let data = Dataset::new(
            vec!["x0".into(), "x1".into()],
            2,
            vec![
                SurvivalRecord {
                    id: "a".into(),
                    observed_time: 4,
                    event_type: Some(2),
                    series: series.clone(),
                },
                SurvivalRecord {
                    id: "b".into(),
                    observed_time: 1,
                    event_type: None,
                    series,
                },
            ],
        )
        .unwrap();
        write_dataset_dir(dir.path(), &data, 1.0).unwrap();
        let (back, meta) = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(meta.n_events, 2);
    }
}
