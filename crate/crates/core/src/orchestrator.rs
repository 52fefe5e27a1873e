//! The federated training loop: FedMRL and the FedAvg, FedProx and FedNova
//! baselines, plus the two-client fairness landscape helpers.
//!
//! One [`Experiment`] owns the partitioned data, the global model and the
//! server-side state (controller, SOM, broadcast reference loss). Each call
//! to [`Experiment::step`] runs one communication round.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{self, ClientReport, Evaluation, LocalObjective};
use crate::config::{Algo, DataSource, ExperimentConfig};
use crate::data::{self, ClientStats, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{DenseNet, ParamVector};
use crate::qmix::{
    self, ActionGrid, ClientState, ControllerCheckpoint, GlobalState, JointAction, QmixController,
};
use crate::rng::{stream, Stream};
use crate::som::{self, AlphaVector, Projector, SomGrid};

/// Where the per-client proximal coefficients come from in FedMRL rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuPolicy {
    Controller,
    /// Bypasses the controller; used for ablations and equivalence checks.
    Fixed(f64),
}

/// Where the FedMRL aggregation weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaPolicy {
    Som,
    /// `α ≡ 1`, i.e. the plain mean of client models.
    Uniform,
}

/// Metrics of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Accuracy of the newly aggregated model on the server's held-out split.
    pub global_acc: f64,
    pub global_loss: f64,
    pub reward: f64,
    pub client_loss: Vec<f64>,
    pub client_acc: Vec<f64>,
    pub mu: Vec<f64>,
    /// Aggregation weights on the `Σα = H` scale for every algorithm.
    pub alpha: Vec<f64>,
    /// Population variance of `client_loss`.
    pub loss_variance: f64,
    /// Reference loss broadcast at the start of the round.
    pub f_bar: Option<f64>,
    /// Best matching units of the client deltas (SOM rounds only).
    pub bmus: Vec<(usize, usize)>,
    pub per_class_recall: Vec<f64>,
    pub per_class_precision: Vec<f64>,
}

impl RoundRecord {
    pub fn macro_precision(&self) -> f64 {
        mean(&self.per_class_precision)
    }

    pub fn macro_recall(&self) -> f64 {
        mean(&self.per_class_recall)
    }

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

/// Mean computed around the first element, so equal inputs give exactly
/// zero deviations.
fn shifted_mean(v: &[f64]) -> f64 {
    match v.first() {
        Some(&x0) => x0 + mean(&v.iter().map(|x| x - x0).collect::<Vec<_>>()),
        None => 0.0,
    }
}

/// Population variance (divides by `n`).
pub fn loss_variance(losses: &[f64]) -> f64 {
    let m = shifted_mean(losses);
    mean(&losses.iter().map(|l| (l - m) * (l - m)).collect::<Vec<_>>())
}

/// `N_h / N` for each client.
pub fn sample_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Normalised averaging: `w − τ_eff · Σ p_h (w − w_h) / steps_h` with
/// `p_h = N_h / N` and `τ_eff = Σ p_h · steps_h`.
pub fn fednova_update(
    global: &ParamVector,
    locals: &[ParamVector],
    sizes: &[usize],
    steps: &[usize],
) -> Result<ParamVector> {
    if locals.len() != sizes.len() || locals.len() != steps.len() || locals.is_empty() {
        return Err(Error::config("one size and step count per client is required"));
    }
    if let Some(h) = steps.iter().position(|&s| s == 0) {
        return Err(Error::config(format!("client {h} took no local steps")));
    }
    let p = sample_weights(sizes);
    let tau_eff: f64 = p.iter().zip(steps).map(|(p, &s)| p * s as f64).sum();
    let mut direction = vec![0.0; global.len()];
    for ((w, &ph), &s) in locals.iter().zip(&p).zip(steps) {
        let delta = global.sub(w)?;
        let c = ph / s as f64;
        for (d, v) in direction.iter_mut().zip(delta.as_slice()) {
            *d += c * v;
        }
    }
    ParamVector::new(
        global
            .as_slice()
            .iter()
            .zip(&direction)
            .map(|(w, d)| w - tau_eff * d)
            .collect(),
    )
}

/// Builds the dataset described by `cfg` and splits it into the server's
/// held-out set and one partition per client.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Vec<LabeledDataset>, LabeledDataset)> {
    let full = match cfg.data.source {
        DataSource::Synthetic => data::synth_gaussian_mixture(
            cfg.data.classes,
            cfg.data.per_class,
            cfg.data.dim,
            cfg.data.separation,
            cfg.seed,
        )?,
        DataSource::Csv => {
            let path = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::key("data.path", "required for CSV data"))?;
            data::load_csv_dataset(path, cfg.data.classes)?
        }
    };
    let (train, eval) = data::stratified_split(&full, cfg.eval_fraction, &mut stream(cfg.seed, Stream::Split))?;
    let clients = data::partition(&train, &cfg.partition_plan())?;
    Ok((clients, eval))
}

/// Serializable server state between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCheckpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub round: usize,
    pub global: ParamVector,
    pub f_bar: Option<f64>,
    pub mus: Vec<f64>,
    pub action_indices: Vec<usize>,
    pub prev_state: GlobalState,
    pub controller: Option<ControllerCheckpoint>,
    pub som: Option<SomGrid>,
}

pub const EXPERIMENT_CHECKPOINT_VERSION: u32 = 1;

/// Records plus the final global parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
}

pub struct Experiment {
    cfg: ExperimentConfig,
    clients: Vec<LabeledDataset>,
    eval: LabeledDataset,
    stats: Vec<ClientStats>,
    global: DenseNet,
    round: usize,
    f_bar: Option<f64>,
    mu_policy: MuPolicy,
    alpha_policy: AlphaPolicy,
    controller: Option<QmixController>,
    som: Option<SomGrid>,
    projector: Option<Projector>,
    /// μ per client for the next round, and the controller's action indices.
    mus: Vec<f64>,
    action_indices: Vec<usize>,
    prev_state: GlobalState,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (clients, eval) = prepare_data(&cfg)?;
        Self::with_data(cfg, clients, eval)
    }

    /// Uses caller-supplied client partitions. `cfg.clients` is set to their
    /// number; the partition settings are ignored.
    pub fn with_data(
        mut cfg: ExperimentConfig,
        clients: Vec<LabeledDataset>,
        eval: LabeledDataset,
    ) -> Result<Self> {
        cfg.validate_training()?;
        if clients.is_empty() {
            return Err(Error::key("clients", "need at least one client"));
        }
        if let Some(h) = clients.iter().position(|c| c.is_empty()) {
            return Err(Error::Input(format!("client {h} received no samples")));
        }
        let m = eval.class_count();
        let dim = eval.dim();
        if clients.iter().any(|c| c.dim() != dim || c.class_count() != m) {
            return Err(Error::config("client and evaluation data shapes differ"));
        }
        cfg.clients = clients.len();
        let h = clients.len();

        let mut sizes = vec![dim];
        sizes.extend(&cfg.model.hidden);
        sizes.push(m);
        let global = DenseNet::init(&sizes, cfg.model.activation, &mut stream(cfg.seed, Stream::ModelInit))?;
        let stats = data::client_stats(&clients)?;

        let grid = ActionGrid::new(cfg.mu_levels.clone())?;
        let (controller, som, projector) = if cfg.algo == Algo::Fedmrl {
            let horizon = ((cfg.rl.epsilon_decay_fraction * cfg.rounds as f64).round() as usize).max(1);
            let controller = QmixController::new(
                h,
                m,
                grid,
                cfg.rl.clone(),
                horizon,
                stream(cfg.seed, Stream::Controller),
            )?;
            let s = &cfg.som;
            let som = SomGrid::new(
                s.rows,
                s.cols,
                s.dim,
                s.sigma0,
                s.lr0,
                cfg.som_tau(),
                &mut stream(cfg.seed, Stream::Som),
            )?;
            let projector =
                Projector::new(s.dim, global.param_count(), &mut stream(cfg.seed, Stream::Projector))?;
            (Some(controller), Some(som), Some(projector))
        } else {
            (None, None, None)
        };
        let initial = match &controller {
            Some(c) => c.initial_actions(),
            None => JointAction {
                indices: vec![0; h],
                mus: vec![0.0; h],
            },
        };

        let mut exp = Experiment {
            cfg,
            clients,
            eval,
            stats,
            global,
            round: 0,
            f_bar: None,
            mu_policy: MuPolicy::Controller,
            alpha_policy: AlphaPolicy::Som,
            controller,
            som,
            projector,
            mus: initial.mus,
            action_indices: initial.indices,
            prev_state: GlobalState::new(Vec::new()),
        };
        exp.prev_state = exp.initial_state()?;
        Ok(exp)
    }

    /// Replaces the FedMRL μ and α sources. Only meaningful for `fedmrl`.
    pub fn with_policies(mut self, mu: MuPolicy, alpha: AlphaPolicy) -> Self {
        if let MuPolicy::Fixed(v) = mu {
            self.mus = vec![v; self.clients.len()];
        }
        self.mu_policy = mu;
        self.alpha_policy = alpha;
        self
    }

    /// State observed before any training: the initial model on each client.
    fn initial_state(&self) -> Result<GlobalState> {
        let per_client = self
            .clients
            .iter()
            .zip(&self.stats)
            .map(|(d, s)| {
                let ev = client::evaluate(&self.global, d)?;
                Ok(ClientState {
                    entropy: s.entropy,
                    proportion: s.proportion,
                    accuracy: ev.accuracy,
                    loss: ev.loss,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GlobalState::new(per_client))
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    pub fn global(&self) -> &DenseNet {
        &self.global
    }

    pub fn clients(&self) -> &[LabeledDataset] {
        &self.clients
    }

    pub fn eval_set(&self) -> &LabeledDataset {
        &self.eval
    }

    pub fn client_stats(&self) -> &[ClientStats] {
        &self.stats
    }

    pub fn f_bar(&self) -> Option<f64> {
        self.f_bar
    }

    pub fn controller(&self) -> Option<&QmixController> {
        self.controller.as_ref()
    }

    /// Evaluates the current global model on the held-out split.
    pub fn evaluate_global(&self) -> Result<Evaluation> {
        client::evaluate(&self.global, &self.eval)
    }

    fn objectives(&self) -> Vec<LocalObjective> {
        let clamp = (self.cfg.train.clamp_lo, self.cfg.train.clamp_hi);
        (0..self.clients.len())
            .map(|h| {
                let mut o = match self.cfg.algo {
                    Algo::Fedavg | Algo::Fednova => LocalObjective::plain(),
                    Algo::Fedprox => LocalObjective::proximal(self.cfg.prox_mu),
                    Algo::Fedmrl => LocalObjective {
                        mu: self.mus[h],
                        lambda_fair: self.cfg.lambda_fair,
                        f_bar: self.f_bar,
                        scale_clamp: clamp,
                    },
                };
                o.scale_clamp = clamp;
                o
            })
            .collect()
    }

    fn train_clients(&self, objectives: &[LocalObjective]) -> Result<Vec<ClientReport>> {
        let t = self.round;
        let run = |h: usize| {
            let mut rng = stream(self.cfg.seed, Stream::Client { client: h, round: t });
            client::local_train(
                &self.global,
                &self.clients[h],
                &self.cfg.client_config(h),
                &objectives[h],
                t,
                &mut rng,
            )
        };
        let h = self.clients.len();
        let results: Vec<Result<ClientReport>> = if self.cfg.parallel {
            (0..h).into_par_iter().map(run).collect()
        } else {
            (0..h).map(run).collect()
        };
        results.into_iter().collect()
    }

    /// Runs one communication round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        self.step_with_reports().map(|(r, _)| r)
    }

    /// [`Experiment::step`], also returning what each client uploaded.
    pub fn step_with_reports(&mut self) -> Result<(RoundRecord, Vec<ClientReport>)> {
        if self.is_finished() {
            return Err(Error::config(format!(
                "all {} rounds have already run",
                self.cfg.rounds
            )));
        }
        let t = self.round;
        let h = self.clients.len();
        let objectives = self.objectives();
        let reports = self.train_clients(&objectives)?;
        let locals: Vec<ParamVector> = reports.iter().map(|r| r.local_params.clone()).collect();
        let sizes: Vec<usize> = reports.iter().map(|r| r.sample_count).collect();

        let mut bmus = Vec::new();
        let (next, alpha) = match self.cfg.algo {
            Algo::Fedavg | Algo::Fedprox => {
                let p = sample_weights(&sizes);
                let alpha = p.iter().map(|p| p * h as f64).collect();
                (som::weighted_combination(&locals, &p)?, alpha)
            }
            Algo::Fednova => {
                let steps: Vec<usize> = reports.iter().map(|r| r.steps_taken).collect();
                let alpha = sample_weights(&sizes).iter().map(|p| p * h as f64).collect();
                (fednova_update(self.global.params(), &locals, &sizes, &steps)?, alpha)
            }
            Algo::Fedmrl => {
                let alphas = match self.alpha_policy {
                    AlphaPolicy::Uniform => AlphaVector::uniform(h),
                    AlphaPolicy::Som => {
                        let (som, projector) = self
                            .som
                            .as_mut()
                            .zip(self.projector.as_ref())
                            .expect("fedmrl experiments own a SOM");
                        let report =
                            som::compute_alphas(som, &locals, self.global.params(), projector, t)?;
                        bmus = report.bmus;
                        report.alphas
                    }
                };
                (som::aggregate(&locals, &alphas)?, alphas.as_slice().to_vec())
            }
        };
        self.global.set_params(next)?;
        let ev = self.evaluate_global()?;
        let reward = qmix::reward(ev.accuracy, self.cfg.rl.zeta);

        let state = GlobalState::new(
            reports
                .iter()
                .zip(&self.stats)
                .map(|(r, s)| ClientState {
                    entropy: s.entropy,
                    proportion: s.proportion,
                    accuracy: r.train_acc,
                    loss: r.train_loss,
                })
                .collect(),
        );
        let used_mu: Vec<f64> = objectives.iter().map(|o| o.mu).collect();
        if self.cfg.algo == Algo::Fedmrl && self.mu_policy == MuPolicy::Controller {
            let ctl = self.controller.as_mut().expect("fedmrl experiments own a controller");
            let prev = JointAction {
                indices: self.action_indices.clone(),
                mus: self.mus.clone(),
            };
            let done = t + 1 == self.cfg.rounds;
            let next = ctl.controller_round(&self.prev_state, &prev, reward, &state, done)?;
            self.mus = next.mus;
            self.action_indices = next.indices;
        }
        self.prev_state = state;

        let client_loss: Vec<f64> = reports.iter().map(|r| r.train_loss).collect();
        let record = RoundRecord {
            round: t,
            global_acc: ev.accuracy,
            global_loss: ev.loss,
            reward,
            client_acc: reports.iter().map(|r| r.train_acc).collect(),
            mu: used_mu,
            alpha,
            loss_variance: loss_variance(&client_loss),
            f_bar: self.f_bar,
            bmus,
            per_class_recall: ev.per_class_recall.clone(),
            per_class_precision: ev.per_class_precision.clone(),
            client_loss,
        };
        self.f_bar = Some(mean(&record.client_loss));
        self.round += 1;
        Ok((record, reports))
    }

    /// Runs the remaining rounds, handing each record to `sink` as soon as it
    /// exists so that a failing round leaves the earlier ones persisted.
    pub fn run(&mut self, sink: &mut dyn FnMut(&RoundRecord) -> Result<()>) -> Result<RunOutput> {
        let mut records = Vec::with_capacity(self.cfg.rounds - self.round);
        while !self.is_finished() {
            let r = self.step()?;
            sink(&r)?;
            records.push(r);
        }
        Ok(RunOutput {
            records,
            final_params: self.global.params().clone(),
        })
    }

    pub fn checkpoint(&self) -> ExperimentCheckpoint {
        ExperimentCheckpoint {
            version: EXPERIMENT_CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            round: self.round,
            global: self.global.params().clone(),
            f_bar: self.f_bar,
            mus: self.mus.clone(),
            action_indices: self.action_indices.clone(),
            prev_state: self.prev_state.clone(),
            controller: self.controller.as_ref().map(|c| c.checkpoint()),
            som: self.som.clone(),
        }
    }

    /// Rebuilds the data from the stored config and resumes the server state.
    pub fn restore(ckpt: ExperimentCheckpoint) -> Result<Self> {
        if ckpt.version != EXPERIMENT_CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported experiment checkpoint version {}",
                ckpt.version
            )));
        }
        let mut exp = Experiment::new(ckpt.config)?;
        exp.global.set_params(ckpt.global)?;
        exp.round = ckpt.round;
        exp.f_bar = ckpt.f_bar;
        exp.mus = ckpt.mus;
        exp.action_indices = ckpt.action_indices;
        exp.prev_state = ckpt.prev_state;
        exp.controller = ckpt.controller.map(QmixController::restore).transpose()?;
        if ckpt.som.is_some() {
            exp.som = ckpt.som;
        }
        Ok(exp)
    }
}

/// Builds and runs the experiment described by `cfg`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    Experiment::new(cfg.clone())?.run(sink)
}

/// `Σ_j (F_j − F̄)²` with `F̄` the mean of `losses`.
pub fn fairness_loss(losses: &[f64]) -> f64 {
    let m = shifted_mean(losses);
    losses.iter().map(|f| (f - m) * (f - m)).sum()
}

/// Two-client fairness penalty over `F1 ∈ [0, total]` with `F2 = total − F1`,
/// sampled at `grid_n` evenly spaced points. Returns `(F1, L_fair)` pairs.
pub fn fairness_landscape(total_loss: f64, grid_n: usize) -> Result<Vec<(f64, f64)>> {
    if grid_n < 3 {
        return Err(Error::key("n", format!("need at least 3 grid points, got {grid_n}")));
    }
    if !(total_loss.is_finite() && total_loss >= 0.0) {
        return Err(Error::key("total", "must be finite and non-negative"));
    }
    let f_bar = total_loss / 2.0;
    Ok((0..grid_n)
        .map(|i| {
            let f1 = total_loss * i as f64 / (grid_n - 1) as f64;
            let f2 = total_loss - f1;
            (f1, (f1 - f_bar).powi(2) + (f2 - f_bar).powi(2))
        })
        .collect())
}

/// Plain gradient descent on [`fairness_loss`] treating every loss as a free
/// variable. Since the deviations sum to zero, the gradient with respect to
/// `F_j` is `2 (F_j − F̄)` and the mean is preserved.
pub fn fairness_descent_check(initial_losses: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>> {
    if initial_losses.len() < 2 {
        return Err(Error::config("need at least two losses"));
    }
    let mut f = initial_losses.to_vec();
    for _ in 0..steps {
        let m = mean(&f);
        for v in &mut f {
            *v -= lr * 2.0 * (*v - m);
        }
    }
    Ok(f)
}
