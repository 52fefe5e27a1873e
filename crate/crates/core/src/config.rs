//! Experiment configuration.
//!
//! Values are resolved in three layers: built-in defaults, then a flat TOML
//! file (`partition.eta = 1.0` style dotted keys or `[partition]` tables),
//! then `key=value` overrides from the command line. Later layers win.
//! Unknown keys and type mismatches are rejected with the offending key path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::client::ClientConfig;
use crate::data::PartitionPlan;
use crate::error::{Error, Result};
use crate::nn::{Activation, DEFAULT_SCALE_CLAMP};
use crate::qmix::{ActionGrid, RlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Fedmrl,
    Fedavg,
    Fedprox,
    Fednova,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Fedmrl, Algo::Fedavg, Algo::Fedprox, Algo::Fednova];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Fedmrl => "fedmrl",
            Algo::Fedavg => "fedavg",
            Algo::Fedprox => "fedprox",
            Algo::Fednova => "fednova",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::key("algo", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    /// Synthetic only.
    pub per_class: usize,
    /// Synthetic only; CSV files define their own width.
    pub dim: usize,
    pub separation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub eta: f64,
    pub shards_per_class: usize,
    /// Empty means `h mod M`.
    pub preferred: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub sigma0: f64,
    pub lr0: f64,
    /// Decay horizon in rounds; defaults to the number of rounds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algo: Algo,
    pub clients: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Share of every class held out at the server for evaluation.
    pub eval_fraction: f64,
    /// Fairness weight; only FedMRL clients use it.
    pub lambda_fair: f64,
    /// Fixed proximal coefficient used by FedProx.
    pub prox_mu: f64,
    /// Proximal levels available to the controller.
    pub mu_levels: Vec<f64>,
    /// Train clients on the rayon pool. Results do not depend on it.
    pub parallel: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub som: SomConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algo: Algo::Fedmrl,
            clients: 5,
            rounds: 30,
            seed: 0,
            eval_fraction: 0.2,
            lambda_fair: 1.0,
            prox_mu: 0.1,
            mu_levels: ActionGrid::default().levels().to_vec(),
            parallel: true,
            model: ModelConfig {
                hidden: vec![32],
                activation: Activation::Relu,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                classes: 3,
                per_class: 600,
                dim: 2,
                separation: 3.0,
                path: None,
            },
            partition: PartitionConfig {
                eta: 1.0,
                shards_per_class: 200,
                preferred: Vec::new(),
            },
            train: TrainConfig {
                lr: 0.05,
                batch_size: 32,
                local_epochs: 1,
                clamp_lo: DEFAULT_SCALE_CLAMP.0,
                clamp_hi: DEFAULT_SCALE_CLAMP.1,
            },
            rl: RlConfig::default(),
            som: SomConfig {
                rows: 5,
                cols: 5,
                dim: 32,
                sigma0: 2.5,
                lr0: 0.5,
                tau: None,
            },
        }
    }
}

/// Keys without a default value and the kind of value they take.
const OPTIONAL_KEYS: [(&str, &str); 2] = [("data.path", "string"), ("som.tau", "float")];

impl ExperimentConfig {
    /// Full validation, including the federation size and partition plan.
    pub fn validate(&self) -> Result<()> {
        self.partition_plan().validate(self.data.classes)?;
        self.validate_training()
    }

    /// Everything except the checks that depend on how data is split.
    pub fn validate_training(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::key("rounds", "must be at least 1"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::key("eval_fraction", "must lie in (0, 1)"));
        }
        non_negative("lambda_fair", self.lambda_fair)?;
        non_negative("prox_mu", self.prox_mu)?;
        ActionGrid::new(self.mu_levels.clone())?;
        if self.model.hidden.contains(&0) {
            return Err(Error::key("model.hidden", "layer widths must be positive"));
        }
        if self.data.classes < 2 {
            return Err(Error::key("data.classes", "need at least two classes"));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.per_class == 0 {
                    return Err(Error::key("data.per_class", "must be positive"));
                }
                if self.data.dim == 0 {
                    return Err(Error::key("data.dim", "must be positive"));
                }
                non_negative("data.separation", self.data.separation)?;
            }
            DataSource::Csv => {
                if self.data.path.is_none() {
                    return Err(Error::key("data.path", "required when data.source = \"csv\""));
                }
            }
        }
        self.client_config(0).validate()?;
        if !(self.train.clamp_lo > 0.0 && self.train.clamp_hi >= self.train.clamp_lo) {
            return Err(Error::key(
                "train.clamp_lo",
                "need 0 < clamp_lo <= clamp_hi",
            ));
        }
        self.rl.validate()?;
        let s = &self.som;
        if s.rows == 0 || s.cols == 0 || s.dim == 0 {
            return Err(Error::key("som", "rows, cols and dim must be positive"));
        }
        if !(s.sigma0 > 0.0) {
            return Err(Error::key("som.sigma0", "must be positive"));
        }
        if !(s.lr0 > 0.0) {
            return Err(Error::key("som.lr0", "must be positive"));
        }
        if let Some(tau) = s.tau {
            if !(tau > 0.0) {
                return Err(Error::key("som.tau", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan {
            eta: self.partition.eta,
            shards_per_class: self.partition.shards_per_class,
            client_count: self.clients,
            preferred_class: self.partition.preferred.clone(),
            rng_seed: self.seed,
        }
    }

    pub fn client_config(&self, client_id: usize) -> ClientConfig {
        ClientConfig {
            client_id,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            local_epochs: self.train.local_epochs,
        }
    }

    pub fn som_tau(&self) -> f64 {
        self.som.tau.unwrap_or(self.rounds as f64)
    }

    /// Canonical flat rendering: one `dotted.key = value` line per setting,
    /// sorted by key. Parsing the output gives back the same config.
    pub fn to_toml(&self) -> Result<String> {
        let mut out = String::new();
        for (key, value) in flatten(&to_table(self)?) {
            out.push_str(&format!("{key} = {value}\n"));
        }
        Ok(out)
    }

    /// Git-style blob hash of [`ExperimentConfig::to_toml`].
    pub fn content_hash(&self) -> Result<String> {
        Ok(blob_hash(self.to_toml()?.as_bytes()))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::key(key, format!("must be finite and >= 0, got {v}")))
    }
}

/// SHA-256 over `blob <len>\0<content>`, hex encoded.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn to_table(cfg: &ExperimentConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| Error::Serde(e.to_string()))
}

fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in table {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Checks `got` against the kind of `expected`, widening integers to floats.
fn coerce(key: &str, expected: &str, sample: Option<&Value>, got: Value) -> Result<Value> {
    let mismatch = |got: &Value| {
        Error::key(
            key,
            format!("expected {expected}, found {}", kind(got)),
        )
    };
    match (expected, got) {
        ("float", Value::Integer(i)) => Ok(Value::Float(i as f64)),
        ("array", Value::Array(items)) => match sample {
            Some(s) => {
                let inner = kind(s);
                let items = items
                    .into_iter()
                    .map(|v| coerce(key, inner, None, v))
                    .collect::<Result<_>>()?;
                Ok(Value::Array(items))
            }
            None => Ok(Value::Array(items)),
        },
        (e, got) if e == kind(&got) => Ok(got),
        (_, got) => Err(mismatch(&got)),
    }
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("sections are tables");
    }
    cur.insert(last.to_string(), value);
}

/// Layered config resolution.
#[derive(Debug, Clone)]
pub struct ConfigLoader {
    merged: Table,
    known: BTreeMap<String, Value>,
}

impl Default for ConfigLoader {
    fn default() -> Self {
        let merged = to_table(&ExperimentConfig::default()).expect("defaults serialize");
        let known = flatten(&merged);
        ConfigLoader { merged, known }
    }
}

impl ConfigLoader {
    pub fn new() -> Self {
        Self::default()
    }

    fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let value = if let Some(default) = self.known.get(key) {
            let sample = default.as_array().and_then(|a| a.first());
            coerce(key, kind(default), sample, value)?
        } else if let Some((_, expected)) = OPTIONAL_KEYS.iter().find(|(k, _)| *k == key) {
            coerce(key, expected, None, value)?
        } else {
            return Err(Error::key(key, "unknown key"));
        };
        insert_dotted(&mut self.merged, key, value);
        Ok(())
    }

    /// Layers the keys of a TOML document on top of the current values.
    pub fn file_str(mut self, text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid config file: {e}")))?;
        for (key, value) in flatten(&table) {
            self.set(&key, value)?;
        }
        Ok(self)
    }

    pub fn file(self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.file_str(&text)
    }

    /// Applies one `key=value` override. The value is read as a TOML value,
    /// falling back to a bare string (so `algo=fedavg` works unquoted).
    pub fn set_str(mut self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key, value)?;
        Ok(self)
    }

    /// Deserializes and fully validates the merged settings.
    pub fn build(self) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = Value::Table(self.merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Defaults, then the optional file, then overrides in order.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut loader = ConfigLoader::new();
    if let Some(p) = path {
        loader = loader.file(p)?;
    }
    for o in overrides {
        loader = loader.set_str(o)?;
    }
    loader.build()
}
