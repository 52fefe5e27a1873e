//! Datasets, the shard-based non-IID partitioner, per-client statistics, a
//! synthetic Gaussian-mixture generator and a CSV loader.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{self, Stream, StreamRng};

/// Feature rows with class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        if class_count == 0 || dim == 0 {
            return Err(Error::config("class count and feature width must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::config(format!(
                "{} feature values for {} samples of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Input(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("features must be finite".into()));
        }
        Ok(LabeledDataset {
            features,
            dim,
            labels,
            class_count,
        })
    }

    /// Builds a dataset from `(features, label)` pairs.
    pub fn from_samples(samples: &[(Vec<f64>, usize)], class_count: usize) -> Result<Self> {
        let dim = samples
            .first()
            .map(|(f, _)| f.len())
            .ok_or_else(|| Error::Input("dataset is empty".into()))?;
        if samples.iter().any(|(f, _)| f.len() != dim) {
            return Err(Error::Input("all feature vectors must have the same length".into()));
        }
        let features = samples.iter().flat_map(|(f, _)| f.iter().copied()).collect();
        let labels = samples.iter().map(|(_, y)| *y).collect();
        Self::new(features, dim, labels, class_count)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.class_count)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.dim, labels)
    }

    /// The whole dataset as one batch.
    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.dim, self.labels.clone())
    }
}

/// Splits off a held-out set containing `fraction` of every class.
pub fn stratified_split(
    data: &LabeledDataset,
    fraction: f64,
    rng: &mut StreamRng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::key(
            "eval_fraction",
            format!("must lie in (0, 1), got {fraction}"),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for mut idx in by_class {
        idx.shuffle(rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    if train.is_empty() || held.is_empty() {
        return Err(Error::Input("dataset too small for the evaluation split".into()));
    }
    Ok((data.subset(&train)?, data.subset(&held)?))
}

/// Parameters of the shard partitioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// Concentration on each client's preferred class, in `[0, 1]`.
    pub eta: f64,
    pub shards_per_class: usize,
    pub client_count: usize,
    /// Preferred class per client; empty means `h mod M`.
    pub preferred_class: Vec<usize>,
    pub rng_seed: u64,
}

impl PartitionPlan {
    pub fn new(eta: f64, client_count: usize, rng_seed: u64) -> Self {
        PartitionPlan {
            eta,
            shards_per_class: 200,
            client_count,
            preferred_class: Vec::new(),
            rng_seed,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.client_count < 2 {
            return Err(Error::key(
                "clients",
                format!("need at least 2 clients, got {}", self.client_count),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::key(
                "partition.eta",
                format!("must lie in [0, 1], got {}", self.eta),
            ));
        }
        if self.shards_per_class == 0 {
            return Err(Error::key("partition.shards_per_class", "must be positive"));
        }
        if !self.preferred_class.is_empty() {
            if self.preferred_class.len() != self.client_count {
                return Err(Error::key(
                    "partition.preferred_class",
                    format!(
                        "expected {} entries, got {}",
                        self.client_count,
                        self.preferred_class.len()
                    ),
                ));
            }
            if let Some(&j) = self.preferred_class.iter().find(|&&j| j >= class_count) {
                return Err(Error::key(
                    "partition.preferred_class",
                    format!("class {j} out of range for {class_count} classes"),
                ));
            }
        }
        Ok(())
    }

    pub fn preferred(&self, client: usize, class_count: usize) -> usize {
        self.preferred_class
            .get(client)
            .copied()
            .unwrap_or(client % class_count)
    }
}

/// Per-client class weights: mass `eta` on the preferred class, the rest
/// spread according to clipped `N(0.5, 1)` draws over all classes.
pub fn class_weights(
    class_count: usize,
    preferred: usize,
    eta: f64,
    rng: &mut StreamRng,
    sampler: &mut dyn FnMut(&mut StreamRng) -> f64,
) -> Vec<f64> {
    let mut g: Vec<f64> = (0..class_count)
        .map(|_| sampler(rng).clamp(0.0, 1.0))
        .collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 {
        g.iter_mut().for_each(|v| *v /= total);
    } else {
        g.iter_mut().for_each(|v| *v = 1.0 / class_count as f64);
    }
    let mut q: Vec<f64> = g.iter().map(|v| (1.0 - eta) * v).collect();
    q[preferred] += eta;
    q
}

fn gaussian_draw(rng: &mut StreamRng) -> f64 {
    Normal::new(0.5, 1.0).expect("valid normal").sample(rng)
}

/// Splits `data` into `plan.client_count` disjoint client datasets.
pub fn partition(data: &LabeledDataset, plan: &PartitionPlan) -> Result<Vec<LabeledDataset>> {
    partition_with_sampler(data, plan, &mut gaussian_draw)
}

/// [`partition`] with the source of non-preferred class weights injected.
///
/// Samples are grouped by label and each class is cut into contiguous shards.
/// Clients then take turns: each draws a class from its weight vector
/// (restricted to classes that still have shards) and claims that class's next
/// shard, until every shard is owned.
pub fn partition_with_sampler(
    data: &LabeledDataset,
    plan: &PartitionPlan,
    sampler: &mut dyn FnMut(&mut StreamRng) -> f64,
) -> Result<Vec<LabeledDataset>> {
    let m = data.class_count();
    plan.validate(m)?;
    let mut rng = rng::stream(plan.rng_seed, Stream::Partition);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut shards: Vec<VecDeque<Vec<usize>>> = Vec::with_capacity(m);
    for (class, idx) in by_class.iter().enumerate() {
        let n = idx.len();
        let s = plan.shards_per_class.min(n);
        if n > 0 && s < plan.shards_per_class {
            log::warn!(
                "class {class} has {n} samples; using {s} shards instead of {}",
                plan.shards_per_class
            );
        }
        let mut q = VecDeque::with_capacity(s);
        for k in 0..s {
            q.push_back(idx[k * n / s..(k + 1) * n / s].to_vec());
        }
        shards.push(q);
    }

    let weights: Vec<Vec<f64>> = (0..plan.client_count)
        .map(|h| class_weights(m, plan.preferred(h, m), plan.eta, &mut rng, sampler))
        .collect();

    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); plan.client_count];
    let mut remaining: usize = shards.iter().map(|q| q.len()).sum();
    'claim: while remaining > 0 {
        for h in 0..plan.client_count {
            if remaining == 0 {
                break 'claim;
            }
            let class = draw_class(&weights[h], &shards, &mut rng);
            let shard = shards[class].pop_front().expect("drawn class is nonempty");
            owned[h].extend(shard);
            remaining -= 1;
        }
    }

    owned
        .into_iter()
        .enumerate()
        .map(|(h, mut idx)| {
            if idx.is_empty() {
                return Err(Error::Input(format!(
                    "client {h} received no samples; dataset too small for {} clients",
                    plan.client_count
                )));
            }
            idx.sort_unstable();
            data.subset(&idx)
        })
        .collect()
}

fn draw_class(q: &[f64], shards: &[VecDeque<Vec<usize>>], rng: &mut StreamRng) -> usize {
    let live: Vec<f64> = q
        .iter()
        .zip(shards)
        .map(|(w, s)| if s.is_empty() { 0.0 } else { *w })
        .collect();
    let total: f64 = live.iter().sum();
    let u: f64 = rng.random();
    if total > 0.0 {
        let target = u * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (c, w) in live.iter().enumerate() {
            if *w > 0.0 {
                acc += w;
                last = c;
                if target < acc {
                    return c;
                }
            }
        }
        return last;
    }
    // No weight left on any nonempty class: fall back to uniform.
    let nonempty: Vec<usize> = (0..shards.len()).filter(|&c| !shards[c].is_empty()).collect();
    let k = ((u * nonempty.len() as f64) as usize).min(nonempty.len() - 1);
    nonempty[k]
}

/// Shannon entropy (nats) of a dataset's label distribution, `0 ln 0 := 0`.
pub fn client_entropy(d: &LabeledDataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Input("entropy of an empty dataset".into()));
    }
    let n = d.len() as f64;
    Ok(d.class_counts()
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Share of all federated samples held by this client.
pub fn client_proportion(d: &LabeledDataset, total_n: usize) -> Result<f64> {
    if total_n == 0 {
        return Err(Error::Input("total sample count is zero".into()));
    }
    if d.len() > total_n {
        return Err(Error::Input(format!(
            "client holds {} samples but the total is {total_n}",
            d.len()
        )));
    }
    Ok(d.len() as f64 / total_n as f64)
}

/// Static description of a client's local data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub entropy: f64,
    pub proportion: f64,
}

pub fn client_stats(clients: &[LabeledDataset]) -> Result<Vec<ClientStats>> {
    let total: usize = clients.iter().map(|c| c.len()).sum();
    clients
        .iter()
        .map(|c| {
            Ok(ClientStats {
                entropy: client_entropy(c)?,
                proportion: client_proportion(c, total)?,
            })
        })
        .collect()
}

/// Isotropic unit-variance Gaussian blobs, one per class.
///
/// Neighbouring class means are `separation` apart. With `dim >= 2` the
/// means sit at evenly spaced angles on a circle in the first two
/// coordinates (for three classes every pair is `separation` apart); with
/// `dim == 1` they are evenly spaced on the line.
pub fn synth_gaussian_mixture(
    class_count: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || per_class == 0 || dim == 0 {
        return Err(Error::config(
            "class count, samples per class and dimension must be positive",
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("separation must be a finite non-negative number"));
    }
    let mut rng = rng::stream(seed, Stream::Dataset);
    let mut features = Vec::with_capacity(class_count * per_class * dim);
    let mut labels = Vec::with_capacity(class_count * per_class);
    let radius = if class_count > 1 {
        separation / (2.0 * (PI / class_count as f64).sin())
    } else {
        0.0
    };
    for m in 0..class_count {
        let mut center = vec![0.0; dim];
        if dim == 1 {
            center[0] = separation * (m as f64 - (class_count as f64 - 1.0) / 2.0);
        } else {
            let angle = 2.0 * PI * m as f64 / class_count as f64;
            center[0] = radius * angle.cos();
            center[1] = radius * angle.sin();
        }
        for _ in 0..per_class {
            for c in &center {
                let z: f64 = rng.sample(StandardNormal);
                features.push(c + z);
            }
            labels.push(m);
        }
    }
    LabeledDataset::new(features, dim, labels, class_count)
}

/// Reads `label,f1,f2,…` rows (no header).
pub fn load_csv_dataset(path: &Path, class_count: usize) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        if record.len() < 2 {
            return Err(parse_err(format!(
                "expected a label and at least one feature, got {} field(s)",
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid label `{}`", &record[0])))?;
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(parse_err(format!("row has {width} features, expected {d}")));
            }
            _ => {}
        }
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("invalid feature `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("feature `{field}` is not finite")));
            }
            features.push(v);
        }
        if label >= class_count {
            return Err(Error::Validation {
                path: path.to_owned(),
                line,
                message: format!("label {label} out of range for {class_count} classes"),
            });
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::Input(format!("{} contains no rows", path.display())))?;
    LabeledDataset::new(features, dim, labels, class_count)
}

/// Writes a dataset in the format read by [`load_csv_dataset`].
pub fn write_csv_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for i in 0..data.len() {
        let mut line = data.labels()[i].to_string();
        for v in data.row(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
