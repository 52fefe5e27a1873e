//! Run artifacts: `metrics.csv`, `summary.json`, `manifest.json`,
//! `landscape.csv` and the sweep comparison table.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! runs produce byte-identical files.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Algo, ExperimentConfig};
use crate::error::{Error, Result};
use crate::orchestrator::{self, Experiment, RoundRecord, RunOutput};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Column names for `h` clients: `4 + 4h + 1` entries.
pub fn metrics_header(h: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["round", "global_acc", "global_loss", "reward"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for block in ["loss", "acc", "mu", "alpha"] {
        cols.extend((0..h).map(|i| format!("{block}_{i}")));
    }
    cols.push("loss_variance".into());
    cols
}

pub fn metrics_row(r: &RoundRecord) -> Vec<String> {
    let mut row = vec![
        r.round.to_string(),
        r.global_acc.to_string(),
        r.global_loss.to_string(),
        r.reward.to_string(),
    ];
    for block in [&r.client_loss, &r.client_acc, &r.mu, &r.alpha] {
        row.extend(block.iter().map(f64::to_string));
    }
    row.push(r.loss_variance.to_string());
    row
}

/// Appends one CSV row per round and flushes after each.
pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
    clients: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, clients: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(metrics_header(clients))
            .map_err(|e| csv_err(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            writer,
            clients,
        })
    }

    pub fn write(&mut self, r: &RoundRecord) -> Result<()> {
        if r.client_loss.len() != self.clients {
            return Err(Error::config(format!(
                "record has {} clients, file has {}",
                r.client_loss.len(),
                self.clients
            )));
        }
        self.writer
            .write_record(metrics_row(r))
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_metrics(records: &[RoundRecord], path: &Path) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("no rounds to write".into()))?;
    let mut w = MetricsWriter::create(path, first.client_loss.len())?;
    records.iter().try_for_each(|r| w.write(r))
}

/// Header and numeric rows of a metrics file.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 2,
                    message: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Final-round metrics under the usual table names plus per-round traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algo: Algo,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "Pre")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    pub final_loss_variance: f64,
    /// Client-mean μ per round.
    pub mean_mu: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    /// SOM best matching units per round (empty lists for baselines).
    pub bmus: Vec<Vec<(usize, usize)>>,
}

impl Summary {
    pub fn from_records(cfg: &ExperimentConfig, records: &[RoundRecord]) -> Result<Self> {
        let last = records
            .last()
            .ok_or_else(|| Error::Input("no rounds to summarise".into()))?;
        Ok(Summary {
            algo: cfg.algo,
            seed: cfg.seed,
            rounds: records.len(),
            clients: last.client_loss.len(),
            acc: last.global_acc,
            precision: last.macro_precision(),
            recall: last.macro_recall(),
            f1: last.f1(),
            final_loss_variance: last.loss_variance,
            mean_mu: records
                .iter()
                .map(|r| r.mu.iter().sum::<f64>() / r.mu.len() as f64)
                .collect(),
            mu: records.iter().map(|r| r.mu.clone()).collect(),
            alpha: records.iter().map(|r| r.alpha.clone()).collect(),
            bmus: records.iter().map(|r| r.bmus.clone()).collect(),
        })
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_summary(cfg: &ExperimentConfig, records: &[RoundRecord], path: &Path) -> Result<()> {
    write_json(&Summary::from_records(cfg, records)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub version: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Runs `cfg` and writes metrics (per round), summary and manifest into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let started_at = now();
    let mut exp = Experiment::new(cfg.clone())?;
    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE), exp.clients().len())?;
    let out = exp.run(&mut |r| metrics.write(r))?;
    write_summary(exp.config(), &out.records, &dir.join(SUMMARY_FILE))?;
    let manifest = RunManifest {
        config: exp.config().clone(),
        config_hash: exp.config().content_hash()?,
        seed: cfg.seed,
        started_at,
        finished_at: now(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(out)
}

/// Two-column `f1,l_fair` CSV of [`orchestrator::fairness_landscape`].
pub fn emit_landscape(total_loss: f64, grid_n: usize, path: &Path) -> Result<Vec<(f64, f64)>> {
    let points = orchestrator::fairness_landscape(total_loss, grid_n)?;
    let mut out = String::from("f1,l_fair\n");
    for (f1, l) in &points {
        out.push_str(&format!("{f1},{l}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(points)
}

/// One line of the sweep comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub algo: Algo,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub loss_variance_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Runs every algorithm for seeds `base.seed .. base.seed + seeds`, each into
/// `out/<algo>/seed-<n>/`, then writes `comparison.csv` and `comparison.md`.
pub fn sweep(base: &ExperimentConfig, algos: &[Algo], seeds: usize, out: &Path) -> Result<Vec<SweepRow>> {
    if algos.is_empty() || seeds == 0 {
        return Err(Error::config("a sweep needs at least one algorithm and one seed"));
    }
    let mut rows = Vec::new();
    for &algo in algos {
        let mut acc = Vec::new();
        let mut f1 = Vec::new();
        let mut var = Vec::new();
        for i in 0..seeds {
            let cfg = ExperimentConfig {
                algo,
                seed: base.seed + i as u64,
                ..base.clone()
            };
            let dir = out.join(algo.name()).join(format!("seed-{}", cfg.seed));
            log::info!("sweep: {algo} seed {}", cfg.seed);
            let run = run_to_dir(&cfg, &dir)?;
            let last = run.records.last().expect("at least one round");
            acc.push(last.global_acc);
            f1.push(last.f1());
            var.push(last.loss_variance);
        }
        let (acc_mean, acc_std) = mean_std(&acc);
        rows.push(SweepRow {
            algo,
            seeds,
            acc_mean,
            acc_std,
            f1_mean: mean_std(&f1).0,
            loss_variance_mean: mean_std(&var).0,
        });
    }
    let csv_path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let md_path = out.join("comparison.md");
    let mut f = File::create(&md_path).map_err(|e| Error::io(&md_path, e))?;
    f.write_all(comparison_table(&rows).as_bytes())
        .map_err(|e| Error::io(&md_path, e))?;
    Ok(rows)
}

/// Markdown rendering of a sweep.
pub fn comparison_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("| algo | seeds | ACC (mean ± std) | F1 | client loss variance |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.4} ± {:.4} | {:.4} | {:.6} |\n",
            r.algo, r.seeds, r.acc_mean, r.acc_std, r.f1_mean, r.loss_variance_mean
        ));
    }
    s
}
