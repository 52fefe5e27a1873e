//! A simulated participant: local minibatch SGD on the augmented objective
//! and evaluation of a parameter vector on local data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, DenseNet, ObjectiveSpec, ParamVector, DEFAULT_SCALE_CLAMP};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub client_id: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl ClientConfig {
    pub fn new(client_id: usize) -> Self {
        ClientConfig {
            client_id,
            lr: 0.05,
            batch_size: 32,
            local_epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::key("train.lr", format!("must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::key("train.batch_size", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::key("train.local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Extra terms a client adds to its cross-entropy for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalObjective {
    pub mu: f64,
    pub lambda_fair: f64,
    /// Server-broadcast reference loss; `None` disables the fairness term.
    pub f_bar: Option<f64>,
    pub scale_clamp: (f64, f64),
}

impl LocalObjective {
    pub fn plain() -> Self {
        Self::proximal(0.0)
    }

    pub fn proximal(mu: f64) -> Self {
        LocalObjective {
            mu,
            lambda_fair: 0.0,
            f_bar: None,
            scale_clamp: DEFAULT_SCALE_CLAMP,
        }
    }
}

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub local_params: ParamVector,
    /// Sample-weighted mean cross-entropy over the last local epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub sample_count: usize,
    pub steps_taken: usize,
}

/// Runs `cfg.local_epochs` epochs of minibatch SGD starting from `global`.
///
/// The global parameters double as the proximal anchor and are never
/// modified. Minibatch order is reshuffled every epoch from `rng`.
pub fn local_train(
    global: &DenseNet,
    data: &LabeledDataset,
    cfg: &ClientConfig,
    objective: &LocalObjective,
    round: usize,
    rng: &mut StreamRng,
) -> Result<ClientReport> {
    cfg.validate()?;
    let spec = ObjectiveSpec {
        mu: objective.mu,
        anchor: global.params().clone(),
        lambda_fair: objective.lambda_fair,
        f_bar: objective.f_bar,
        scale_clamp: objective.scale_clamp,
    };
    spec.validate()?;

    let mut net = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut epoch_loss = 0.0;
    let mut epoch_correct = 0.0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        epoch_loss = 0.0;
        epoch_correct = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk)?;
            let step = nn::loss_and_grad(&net, &batch, &spec)
                .and_then(|obj| {
                    let params = nn::sgd_step(net.params(), &obj.grad, cfg.lr)?;
                    net.set_params(params)?;
                    Ok(obj)
                })
                .map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!(
                        "client {} round {round} step {steps}: {msg}",
                        cfg.client_id
                    )),
                    other => other,
                })?;
            epoch_loss += step.base_loss * chunk.len() as f64;
            epoch_correct += step.accuracy * chunk.len() as f64;
            steps += 1;
        }
    }
    let n = data.len() as f64;
    Ok(ClientReport {
        local_params: net.params().clone(),
        train_loss: epoch_loss / n,
        train_acc: epoch_correct / n,
        sample_count: data.len(),
        steps_taken: steps,
    })
}

/// Full-dataset metrics of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn macro_recall(&self) -> f64 {
        mean(&self.per_class_recall)
    }

    pub fn macro_precision(&self) -> f64 {
        mean(&self.per_class_precision)
    }

    /// Harmonic mean of macro precision and macro recall.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.macro_precision(), self.macro_recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates `net` on all of `data`. Classes absent from `data` get recall 0;
/// classes never predicted get precision 0.
pub fn evaluate(net: &DenseNet, data: &LabeledDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let batch = data.to_batch()?;
    let pass = nn::forward(net, &batch)?;
    let m = net.output_dim();
    let mut confusion = vec![vec![0usize; m]; m];
    for (&y, &p) in data.labels().iter().zip(&pass.predictions) {
        confusion[y][p] += 1;
    }
    let per_class_recall = (0..m)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    let per_class_precision = (0..m)
        .map(|c| {
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            if predicted == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / predicted as f64
            }
        })
        .collect();
    Ok(Evaluation {
        loss: pass.loss,
        accuracy: pass.accuracy,
        per_class_recall,
        per_class_precision,
        confusion,
    })
}
