//! Command-line front end: simulate, train, predict, evaluate and cluster.
//!
//! Every command returns a [`RunManifest`] that is also written next to its
//! outputs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use odesurv::analysis::{cluster_incidence, kmeans, latent_summary};
use odesurv::data::{read_dataset_dir, split_indices, write_dataset_dir, write_oracle_csv, Dataset, SimConfig, SplitIndices};
use odesurv::decoder::{read_predictions_csv, write_predictions_csv, SurvivalCurves};
use odesurv::metrics::{evaluate_curves, MetricsRow};
use odesurv::training::{load_checkpoint, predict, save_checkpoint, train, write_history_csv, TrainConfig};
use odesurv::{simulate, Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const KMEANS_MAX_ITER: usize = 300;
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "odesurv", version, about = "Latent-ODE competing-risks survival models")]
pub struct Cli {
    /// Log at debug level.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its true hazards.
    Simulate(SimulateArgs),
    /// Fit a model and save the best checkpoint.
    Train(TrainArgs),
    /// Write per-subject survival and incidence curves.
    Predict(PredictArgs),
    /// Time-dependent AUC and Brier score at event-time percentiles.
    Evaluate(EvaluateArgs),
    /// Cluster latent summaries and estimate per-cluster incidence.
    Cluster(ClusterArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// JSON generator config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory (features.csv, outcomes.csv, meta.json).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Restricts a command to one part of a split written by `train`.
#[derive(Debug, Clone, Default, Args)]
pub struct SubsetArgs {
    /// split.csv produced by `train`.
    #[arg(long, requires = "subset")]
    pub split: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, requires = "split")]
    pub subset: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV of (id, t, S, F_1..F_b).
    #[arg(long)]
    pub out: PathBuf,
    /// Horizon in bins; the trained horizon when absent.
    #[arg(long = "t_m", alias = "t-m")]
    pub t_m: Option<usize>,
    #[command(flatten)]
    pub subset: SubsetArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![25.0, 50.0, 75.0])]
    pub percentiles: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub subset: SubsetArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Event whose cause-module embeddings are clustered.
    #[arg(long, default_value_t = 1)]
    pub event: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Bins summed into the latent summary; the trained horizon when absent.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub subset: SubsetArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON config.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
    pub version: String,
}

impl RunManifest {
    fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let canonical = serde_json::to_string(&config)?;
        let hash = Sha256::digest(canonical.as_bytes());
        Ok(Self {
            command: command.into(),
            config_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_secs: 0.0,
            version: VERSION.into(),
        })
    }

    fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    /// Writes to a temporary sibling then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        let tmp = path.with_file_name(name);
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer_pretty(&mut f, self)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn finish(mut self, started: Instant, path: &Path) -> Result<Self> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        self.write_atomic(path)?;
        Ok(self)
    }
}

/// Exit status for a failed command: 2 validation, 3 numerical, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else if err.is_numerical() {
        3
    } else {
        1
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{what} config: {e}")))
}

/// Manifest file for a command whose output is a single file.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let cfg: SimConfig = match &args.config {
        Some(p) => read_json_config(p, "simulation")?,
        None => SimConfig::default(),
    };
    let out = simulate(&cfg)?;
    write_dataset_dir(&args.out, &out.dataset, cfg.bin_width)?;
    let oracle = args.out.join("oracle.csv");
    write_oracle_csv(&oracle, &out.oracle)?;

    let mut m = RunManifest::new("simulate", &cfg)?;
    if let Some(p) = &args.config {
        m = m.input(p);
    }
    m.seeds.insert("simulation".into(), cfg.seed);
    for f in ["features.csv", "outcomes.csv", "meta.json", "oracle.csv"] {
        m.output(&args.out.join(f));
    }
    m.finish(started, &args.out.join("manifest.json"))
}

fn check_bin_width(cfg_bw: f64, data_bw: f64) -> Result<()> {
    if (cfg_bw - data_bw).abs() > 1e-12 * data_bw.abs().max(1.0) {
        return Err(Error::Validation(format!(
            "bin_width {cfg_bw} in the config differs from {data_bw} in the dataset metadata"
        )));
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let cfg = match &args.config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let (data, meta) = read_dataset_dir(&args.data)?;
    check_bin_width(cfg.bin_width, meta.bin_width)?;
    let [a, b, c] = cfg.split_fractions;
    let idx = split_indices(data.len(), (a, b, c), cfg.seed)?;
    let (tr, va) = (data.subset(&idx.train), data.subset(&idx.valid));
    log::info!("training on {} subjects, validating on {}", tr.len(), va.len());
    let res = train(&tr, &va, &cfg)?;
    if res.n_truncated > 0 {
        log::warn!("{} outcomes beyond t_m were treated as censored at t_m", res.n_truncated);
    }

    std::fs::create_dir_all(&args.out)?;
    let split_path = args.out.join("split.csv");
    write_split_csv(&split_path, &data, &idx)?;
    let ckpt = args.out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &res.model, &cfg, res.best_epoch)?;
    let hist = args.out.join("history.csv");
    write_history_csv(&hist, &res.history)?;

    let mut m = RunManifest::new("train", &cfg)?.input(&args.data);
    if let Some(p) = &args.config {
        m = m.input(p);
    }
    m.seeds.insert("train".into(), cfg.seed);
    m.seeds.insert("split".into(), cfg.seed);
    for p in [&split_path, &ckpt, &hist] {
        m.output(p);
    }
    m.finish(started, &args.out.join("manifest.json"))
}

fn write_split_csv(path: &Path, data: &Dataset, idx: &SplitIndices) -> Result<()> {
    let mut label = vec![""; data.len()];
    for (name, part) in [("train", &idx.train), ("valid", &idx.valid), ("test", &idx.test)] {
        for &i in part {
            label[i] = name;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "set"])?;
    for (r, l) in data.records.iter().zip(label) {
        w.write_record([r.id.as_str(), l])?;
    }
    w.flush()?;
    Ok(())
}

/// Records of `data` whose id is assigned to `subset` in a split file, in
/// dataset order.
pub fn select_subset(data: &Dataset, split: &Path, subset: &str) -> Result<Dataset> {
    if !["train", "valid", "test"].contains(&subset) {
        return Err(Error::Validation(format!("unknown subset {subset:?}")));
    }
    let mut rdr = csv::Reader::from_path(split)?;
    let mut wanted = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(1) == Some(subset) {
            wanted.insert(rec.get(0).unwrap_or("").to_string());
        }
    }
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| wanted.contains(&data.records[i].id))
        .collect();
    if idx.len() != wanted.len() {
        return Err(Error::Validation(format!(
            "split file lists {} {subset} ids, dataset has {} of them",
            wanted.len(),
            idx.len()
        )));
    }
    Ok(data.subset(&idx))
}

fn load_data(dir: &Path, subset: &SubsetArgs) -> Result<(Dataset, f64)> {
    let (data, meta) = read_dataset_dir(dir)?;
    let data = match (&subset.split, &subset.subset) {
        (Some(p), Some(s)) => select_subset(&data, p, s)?,
        _ => data,
    };
    Ok((data, meta.bin_width))
}

fn record_split_input(m: &mut RunManifest, subset: &SubsetArgs) {
    if let Some(p) = &subset.split {
        m.inputs.push(p.display().to_string());
    }
}

pub fn cmd_predict(args: &PredictArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let (model, header) = load_checkpoint(&args.checkpoint)?;
    let (data, bw) = load_data(&args.data, &args.subset)?;
    check_bin_width(header.config.bin_width, bw)?;
    if !data.is_empty() && data.n_features() != model.arch.n_features {
        return Err(Error::Dimension(format!(
            "dataset has {} features, checkpoint expects {}",
            data.n_features(),
            model.arch.n_features
        )));
    }
    if data.n_events != model.arch.n_events {
        return Err(Error::Dimension(format!(
            "dataset declares {} events, checkpoint has {}",
            data.n_events, model.arch.n_events
        )));
    }
    let t_m = args.t_m.unwrap_or(header.config.t_m);
    if t_m == 0 {
        return Err(Error::Validation("t_m must be positive".into()));
    }
    let curves = predict(&model, &data, t_m, &header.config.solver, PREDICT_BATCH)?;
    let ids: Vec<String> = data.records.iter().map(|r| r.id.clone()).collect();
    ensure_parent(&args.out)?;
    let f = BufWriter::new(File::create(&args.out)?);
    write_predictions_csv(f, model.arch.n_events, &ids, &curves)?;

    #[derive(Serialize)]
    struct PredictConfig<'a> {
        t_m: usize,
        subset: &'a Option<String>,
        train_config: &'a TrainConfig,
    }
    let cfg = PredictConfig {
        t_m,
        subset: &args.subset.subset,
        train_config: &header.config,
    };
    let mut m = RunManifest::new("predict", &cfg)?
        .input(&args.data)
        .input(&args.checkpoint);
    record_split_input(&mut m, &args.subset);
    m.seeds.insert("train".into(), header.seed);
    m.output(&args.out);
    m.finish(started, &sidecar(&args.out))
}

/// Curves reordered to match `data`; every dataset id must be present.
pub fn align_predictions(ids: &[String], curves: Vec<SurvivalCurves>, data: &Dataset) -> Result<Vec<SurvivalCurves>> {
    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        by_id.insert(id.as_str(), i);
    }
    let missing: Vec<&str> = data
        .records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "predictions lack {} dataset ids: {}",
            missing.len(),
            missing.join(",")
        )));
    }
    Ok(data
        .records
        .iter()
        .map(|r| curves[by_id[r.id.as_str()]].clone())
        .collect())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<RunManifest> {
    let started = Instant::now();
    if args.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
        return Err(Error::Validation("percentiles must lie in [0, 100]".into()));
    }
    let table = read_predictions_csv(&args.predictions)?;
    let (data, _) = load_data(&args.data, &args.subset)?;
    if !table.ids.is_empty() && table.n_events != data.n_events {
        return Err(Error::Dimension(format!(
            "predictions carry {} events, dataset declares {}",
            table.n_events, data.n_events
        )));
    }
    let curves = align_predictions(&table.ids, table.curves, &data)?;
    let rows = evaluate_curves(&curves, &data.outcomes(), data.n_events, &args.percentiles)?;
    ensure_parent(&args.out)?;
    write_metrics_csv(&args.out, &rows)?;

    #[derive(Serialize)]
    struct EvaluateConfig<'a> {
        percentiles: &'a [f64],
        subset: &'a Option<String>,
    }
    let cfg = EvaluateConfig {
        percentiles: &args.percentiles,
        subset: &args.subset.subset,
    };
    let mut m = RunManifest::new("evaluate", &cfg)?
        .input(&args.predictions)
        .input(&args.data);
    record_split_input(&mut m, &args.subset);
    m.output(&args.out);
    m.finish(started, &sidecar(&args.out))
}

pub fn cmd_cluster(args: &ClusterArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let (model, header) = load_checkpoint(&args.checkpoint)?;
    let (data, _) = load_data(&args.data, &args.subset)?;
    if !data.is_empty() && data.n_features() != model.arch.n_features {
        return Err(Error::Dimension(format!(
            "dataset has {} features, checkpoint expects {}",
            data.n_features(),
            model.arch.n_features
        )));
    }
    let b = model.arch.n_events;
    let horizon = args.horizon.unwrap_or(header.config.t_m);
    let x = latent_summary(&model, &data, args.event, horizon, &header.config.solver, PREDICT_BATCH)?;
    let km = kmeans(&x, args.k, args.seed, KMEANS_MAX_ITER)?;
    log::info!("k-means converged after {} iterations, inertia {}", km.iterations, km.inertia);
    let clusters = cluster_incidence(&km.labels, &data.outcomes(), args.k, b)?;

    std::fs::create_dir_all(&args.out)?;
    let labels_path = args.out.join("clusters.csv");
    let mut w = csv::Writer::from_path(&labels_path)?;
    w.write_record(["id", "cluster"])?;
    for (r, l) in data.records.iter().zip(&km.labels) {
        w.write_record([r.id.as_str(), &l.to_string()])?;
    }
    w.flush()?;

    let curves_path = args.out.join("curves.csv");
    let mut w = csv::Writer::from_path(&curves_path)?;
    w.write_record(["cluster", "size", "event", "t", "F"])?;
    for c in &clusters {
        let Some(aj) = &c.curves else { continue };
        for k in 1..=b {
            for t in 0..=horizon {
                w.write_record([
                    c.cluster.to_string(),
                    c.size.to_string(),
                    k.to_string(),
                    t.to_string(),
                    aj.cif[k - 1].value(t as f64).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    #[derive(Serialize)]
    struct ClusterConfig<'a> {
        event: usize,
        k: usize,
        horizon: usize,
        seed: u64,
        subset: &'a Option<String>,
    }
    let cfg = ClusterConfig {
        event: args.event,
        k: args.k,
        horizon,
        seed: args.seed,
        subset: &args.subset.subset,
    };
    let mut m = RunManifest::new("cluster", &cfg)?
        .input(&args.data)
        .input(&args.checkpoint);
    record_split_input(&mut m, &args.subset);
    m.seeds.insert("kmeans".into(), args.seed);
    m.seeds.insert("train".into(), header.seed);
    m.output(&labels_path);
    m.output(&curves_path);
    m.finish(started, &args.out.join("manifest.json"))
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Cluster(a) => cmd_cluster(a),
    }
}
