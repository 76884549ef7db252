//! Run directories, summaries and ablation sweeps.
//!
//! A run directory holds `config.toml`, `seeds.json`, `summary.json` and a
//! seed-averaged `metrics.csv`, plus one `seed-<n>/` directory per seed with
//! that seed's `metrics.csv` and `checkpoints/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::parties::{self, RunOutput};
use crate::task::primary_metric;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "ROSFL_OUTPUT";
pub const METRICS_HEADER: [&str; 4] = ["round", "client", "name", "value"];

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    round: u32,
    client: String,
    name: String,
    value: f64,
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(CsvRow { round: r.round, client: r.client_label(), name: r.name.clone(), value: r.value })
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Corruption(format!("{}: header {header:?}", path.display())));
    }
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: CsvRow = row.map_err(csv_err)?;
        let client = match row.client.as_str() {
            "global" => None,
            c => Some(c.parse().map_err(|_| Error::Corruption(format!("bad client label {c:?}")))?),
        };
        out.push(MetricRecord::new(row.round, client, row.name, row.value)?);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corruption(format!("metrics csv: {e}"))
}

/// Headline numbers of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Client-mean primary metric averaged over the final evaluated rounds.
    pub final_metric: f64,
    pub per_client: Vec<f64>,
    /// `max - min` of `per_client`.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub task: TaskKind,
    pub metric: String,
    pub rounds: u32,
    pub local_epochs: u32,
    pub clients: usize,
    pub per_seed: Vec<SeedSummary>,
    /// Mean over seeds of `final_metric`.
    pub mean_final: f64,
    pub mean_spread: f64,
    pub per_client_mean: Vec<f64>,
    /// Client-mean PSNR of the noisy inputs (restoration only).
    pub input_psnr: Option<f64>,
    pub clamp_rate: f64,
    pub completed: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Summarises one seed's run over the last `cfg.eval.last` rounds.
pub fn summarize_seed(cfg: &ExperimentConfig, out: &RunOutput) -> Result<SeedSummary> {
    let name = primary_metric(cfg.task);
    let last = cfg.eval.last.max(1);
    let missing = || Error::misuse(format!("run has no {name} records in its final rounds"));
    let final_metric = out.tail_mean(None, name, cfg.rounds, last).ok_or_else(missing)?;
    let per_client = (0..cfg.clients as u32)
        .map(|c| out.tail_mean(Some(c), name, cfg.rounds, last).ok_or_else(missing))
        .collect::<Result<Vec<f64>>>()?;
    let spread = per_client.iter().copied().fold(f64::MIN, f64::max) - per_client.iter().copied().fold(f64::MAX, f64::min);
    Ok(SeedSummary { seed: out.seed, final_metric, per_client, spread })
}

fn seed_mean_records(outputs: &[RunOutput]) -> Result<Vec<MetricRecord>> {
    let mut acc: BTreeMap<(u32, Option<u32>, String), (f64, usize)> = BTreeMap::new();
    for out in outputs {
        for r in &out.metrics {
            let e = acc.entry((r.round, r.client, r.name.clone())).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|((round, client, name), (s, n))| MetricRecord::new(round, client, name, s / n as f64)).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn checkpoint_name(round: u32) -> String {
    format!("round-{round:04}.ck")
}

/// Runs every seed of `cfg`, writes the run directory, returns its summary.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    write_json(&dir.join("seeds.json"), &cfg.seeds)?;
    let mut outputs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let out = parties::run(cfg, seed)?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        fs::create_dir_all(seed_dir.join("checkpoints"))?;
        write_metrics_csv(&seed_dir.join("metrics.csv"), &out.metrics)?;
        for ck in &out.checkpoints {
            ck.save(&seed_dir.join("checkpoints").join(checkpoint_name(ck.round)))?;
        }
        outputs.push(out);
    }
    write_metrics_csv(&dir.join("metrics.csv"), &seed_mean_records(&outputs)?)?;
    let summary = summarize(cfg, &outputs)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Summary across seeds of already finished runs.
pub fn summarize(cfg: &ExperimentConfig, outputs: &[RunOutput]) -> Result<RunSummary> {
    let per_seed = outputs.iter().map(|o| summarize_seed(cfg, o)).collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = per_seed.iter().map(|s| s.final_metric).collect();
    let spreads: Vec<f64> = per_seed.iter().map(|s| s.spread).collect();
    let per_client_mean = (0..cfg.clients).map(|c| mean(&per_seed.iter().map(|s| s.per_client[c]).collect::<Vec<_>>())).collect();
    let input_psnr = (cfg.task == TaskKind::Restoration)
        .then(|| mean(&outputs.iter().filter_map(|o| o.metric(0, None, "input_psnr")).collect::<Vec<_>>()));
    let clamp_rate = mean(&outputs.iter().filter_map(|o| o.metric(0, None, "clamp_rate")).collect::<Vec<_>>());
    Ok(RunSummary {
        method: cfg.method.name().to_string(),
        task: cfg.task,
        metric: primary_metric(cfg.task).to_string(),
        rounds: cfg.rounds,
        local_epochs: cfg.local_epochs,
        clients: cfg.clients,
        per_seed,
        mean_final: mean(&finals),
        mean_spread: mean(&spreads),
        per_client_mean,
        input_psnr,
        clamp_rate,
        completed: true,
    })
}

/// Checks that `dir` is a complete run directory.
pub fn validate_run_dir(dir: &Path) -> Result<RunSummary> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::config(format!("{} is missing {name}", dir.display())))
        }
    };
    let cfg = ExperimentConfig::load(&need("config.toml")?)?;
    let seeds: Vec<u64> = serde_json::from_str(&fs::read_to_string(need("seeds.json")?)?)
        .map_err(|e| Error::Corruption(format!("seeds.json: {e}")))?;
    if seeds != cfg.seeds {
        return Err(Error::Corruption("seeds.json disagrees with config.toml".into()));
    }
    check_unique(&read_metrics_csv(&need("metrics.csv")?)?)?;
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(need("summary.json")?)?)
        .map_err(|e| Error::Corruption(format!("summary.json: {e}")))?;
    if !summary.completed || summary.per_seed.len() != seeds.len() {
        return Err(Error::Corruption("summary.json does not cover every seed".into()));
    }
    for seed in &seeds {
        let seed_dir = dir.join(format!("seed-{seed}"));
        let records = read_metrics_csv(&seed_dir.join("metrics.csv"))?;
        check_unique(&records)?;
        if !records.iter().any(|r| r.round == cfg.rounds) {
            return Err(Error::Corruption(format!("seed {seed} has no final-round metrics")));
        }
        let ck = Checkpoint::load(&seed_dir.join("checkpoints").join(checkpoint_name(cfg.rounds)))?;
        if ck.round != cfg.rounds {
            return Err(Error::Corruption(format!("seed {seed} final checkpoint is round {}", ck.round)));
        }
    }
    Ok(summary)
}

fn check_unique(records: &[MetricRecord]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert((r.round, r.client, r.name.as_str())) {
            return Err(Error::Corruption(format!("duplicate metric ({}, {}, {})", r.round, r.client_label(), r.name)));
        }
    }
    Ok(())
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub knob: String,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn all_completed(&self) -> bool {
        self.cells.iter().all(|c| c.summary.is_some())
    }

    pub fn cell(&self, label: &str) -> Option<&RunSummary> {
        self.cells.iter().find(|c| c.label == label).and_then(|c| c.summary.as_ref())
    }

    /// `label,mean_final,mean_spread,error` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "mean_final", "mean_spread", "error"]).map_err(csv_err)?;
        for c in &self.cells {
            let (f, s) = c.summary.as_ref().map_or((String::new(), String::new()), |s| {
                (s.mean_final.to_string(), s.mean_spread.to_string())
            });
            w.write_record([c.label.as_str(), &f, &s, c.error.as_deref().unwrap_or("")]).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::config(e.to_string()))?)
            .map_err(|e| Error::config(e.to_string()))
    }
}

fn run_sweep(knob: &str, cells: Vec<(String, ExperimentConfig)>, dir: &Path) -> Result<SweepTable> {
    if cells.is_empty() {
        return Err(Error::config(format!("{knob} sweep needs at least one setting")));
    }
    fs::create_dir_all(dir)?;
    let mut table = SweepTable { knob: knob.to_string(), cells: Vec::new() };
    for (label, cfg) in cells {
        let cell_dir = dir.join(format!("{knob}-{label}"));
        let (summary, error) = match run_experiment(&cfg, &cell_dir) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        table.cells.push(SweepCell { label, summary, error });
    }
    write_json(&dir.join("sweep.json"), &table)?;
    fs::write(dir.join("sweep.csv"), table.to_csv()?)?;
    Ok(table)
}

/// One run per correction strength, identical seeds and data otherwise.
pub fn run_mu_sweep(base: &ExperimentConfig, mus: &[f64], dir: &Path) -> Result<SweepTable> {
    let cells = mus
        .iter()
        .map(|&mu| {
            let mut cfg = base.clone();
            cfg.dwcs.enabled = true;
            cfg.dwcs.mu = mu;
            (format!("{mu:e}"), cfg)
        })
        .collect();
    run_sweep("mu", cells, dir)
}

/// One run per `(rounds, local_epochs)` pair; all pairs must share the same
/// total number of local epochs.
pub fn run_round_epoch_tradeoff(base: &ExperimentConfig, pairs: &[(u32, u32)], dir: &Path) -> Result<SweepTable> {
    if let Some(&(r0, e0)) = pairs.first() {
        if let Some(&(r, e)) = pairs.iter().find(|&&(r, e)| u64::from(r) * u64::from(e) != u64::from(r0) * u64::from(e0)) {
            return Err(Error::config(format!("pair {r}/{e} breaks the constant rounds x epochs budget of {}", r0 * e0)));
        }
    }
    let cells = pairs
        .iter()
        .map(|&(rounds, epochs)| {
            let mut cfg = base.clone();
            cfg.rounds = rounds;
            cfg.local_epochs = epochs;
            (format!("{rounds}x{epochs}"), cfg)
        })
        .collect();
    run_sweep("re", cells, dir)
}
