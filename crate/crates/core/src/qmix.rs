//! Multi-agent controller that picks a proximal coefficient per client.
//!
//! One agent per client scores a discrete grid of μ levels from that client's
//! state. A monotonic mixing network, whose weights are produced by
//! hypernetworks conditioned on the global state, combines the chosen agent
//! values into a team value `Q_tot`. All nets are trained jointly from the
//! shared reward with one-step TD targets, a replay buffer and periodically
//! synchronised target copies.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Activation, DenseNet, ParamVector};
use crate::rng::{RngState, StreamRng};

/// Team reward for a round: `e^(acc − ζ) − 1`.
pub fn reward(acc: f64, zeta: f64) -> f64 {
    (acc - zeta).exp_m1()
}

/// `Σ_t γ^(t−1) r_t` over the given reward sequence.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Additive value decomposition: the team value is the sum of agent values.
pub fn vdn_qtot(agent_qs: &[f64]) -> f64 {
    agent_qs.iter().sum()
}

/// Observation of one client, in the fixed order `(E_c, P_c, acc_c, loss_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub entropy: f64,
    pub proportion: f64,
    pub accuracy: f64,
    pub loss: f64,
}

impl ClientState {
    pub fn to_array(&self) -> [f64; 4] {
        [self.entropy, self.proportion, self.accuracy, self.loss]
    }

    /// Network input: entropy divided by `entropy_scale` (ln M) and loss
    /// squashed by `x / (1 + x)`.
    pub fn features(&self, entropy_scale: f64) -> [f64; 4] {
        let e = if entropy_scale > 0.0 {
            self.entropy / entropy_scale
        } else {
            self.entropy
        };
        let loss = self.loss.max(0.0);
        [e, self.proportion, self.accuracy, loss / (1.0 + loss)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub per_client: Vec<ClientState>,
}

impl GlobalState {
    pub fn new(per_client: Vec<ClientState>) -> Self {
        GlobalState { per_client }
    }

    pub fn agents(&self) -> usize {
        self.per_client.len()
    }

    /// Raw concatenation, length `4H`.
    pub fn flatten(&self) -> Vec<f64> {
        self.per_client.iter().flat_map(|c| c.to_array()).collect()
    }

    fn features(&self, entropy_scale: f64) -> Vec<f64> {
        self.per_client
            .iter()
            .flat_map(|c| c.features(entropy_scale))
            .collect()
    }

    fn validate(&self, agents: usize) -> Result<()> {
        if self.agents() != agents {
            return Err(Error::config(format!(
                "state has {} clients, controller has {agents} agents",
                self.agents()
            )));
        }
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("state contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Ascending μ levels an agent may choose from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    levels: Vec<f64>,
}

impl Default for ActionGrid {
    fn default() -> Self {
        ActionGrid {
            levels: vec![1e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0],
        }
    }
}

impl ActionGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::key("mu_levels", "need at least one level"));
        }
        if levels.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::key("mu_levels", "levels must lie in [0, 1]"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::key("mu_levels", "levels must be strictly ascending"));
        }
        Ok(ActionGrid { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Level indices and the corresponding μ values, one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAction {
    pub indices: Vec<usize>,
    pub mus: Vec<f64>,
}

impl JointAction {
    pub fn from_indices(indices: Vec<usize>, grid: &ActionGrid) -> Result<Self> {
        let mus = indices
            .iter()
            .map(|&i| {
                grid.levels.get(i).copied().ok_or_else(|| {
                    Error::config(format!("action index {i} outside a grid of {}", grid.len()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(JointAction { indices, mus })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: GlobalState,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_state: GlobalState,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    /// Target accuracy inside the reward.
    pub zeta: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the run over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Transitions buffered before TD training starts; until the buffer
    /// holds `batch_size` entries the whole buffer is one minibatch.
    pub warmup: usize,
    /// Number of TD updates between target-network copies.
    pub target_sync: usize,
    pub lr: f64,
    /// Global gradient-norm clip applied to each TD step.
    pub grad_clip: f64,
    pub agent_hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 0.99,
            zeta: 0.7,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            replay_capacity: 500,
            batch_size: 32,
            warmup: 8,
            target_sync: 20,
            lr: 0.01,
            grad_clip: 10.0,
            agent_hidden: vec![64, 64],
            embed_dim: 32,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::key("rl.gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::key("rl.zeta", format!("must lie in [0, 1], got {}", self.zeta)));
        }
        for (key, v) in [
            ("rl.epsilon_start", self.epsilon_start),
            ("rl.epsilon_end", self.epsilon_end),
            ("rl.epsilon_decay_fraction", self.epsilon_decay_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::key(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.replay_capacity == 0 || self.batch_size == 0 || self.target_sync == 0 {
            return Err(Error::key(
                "rl",
                "replay_capacity, batch_size and target_sync must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::key("rl.lr", "must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::key("rl.grad_clip", "must be positive"));
        }
        if self.embed_dim == 0 || self.agent_hidden.iter().any(|&h| h == 0) {
            return Err(Error::key("rl.agent_hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Nonlinearity between the two mixing layers; both are increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerActivation {
    Tanh,
    /// Used by the additive diagnostic configuration.
    Linear,
}

impl MixerActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            MixerActivation::Tanh => x.tanh(),
            MixerActivation::Linear => x,
        }
    }

    fn derivative(self, y: f64) -> f64 {
        match self {
            MixerActivation::Tanh => 1.0 - y * y,
            MixerActivation::Linear => 1.0,
        }
    }
}

/// State-conditioned monotonic mixer.
///
/// `Q_tot = |W2(s)| · act(|W1(s)|ᵀ q + b1(s)) + b2(s)`, where the four
/// right-hand-side factors come from hypernetworks applied to the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixer {
    agents: usize,
    embed: usize,
    activation: MixerActivation,
    hyper_w1: DenseNet,
    hyper_b1: DenseNet,
    hyper_w2: DenseNet,
    hyper_b2: DenseNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerGrads {
    pub w1: ParamVector,
    pub b1: ParamVector,
    pub w2: ParamVector,
    pub b2: ParamVector,
}

struct MixerPass {
    q_tot: f64,
    qs: Vec<f64>,
    w1_raw: Vec<f64>,
    w2_raw: Vec<f64>,
    hidden: Vec<f64>,
    caches: [crate::nn::Activations; 4],
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(
        agents: usize,
        state_dim: usize,
        embed: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mixer {
            agents,
            embed,
            activation: MixerActivation::Tanh,
            hyper_w1: DenseNet::init(&[state_dim, agents * embed], Activation::Relu, rng)?,
            hyper_b1: DenseNet::init(&[state_dim, embed], Activation::Relu, rng)?,
            hyper_w2: DenseNet::init(&[state_dim, embed], Activation::Relu, rng)?,
            hyper_b2: DenseNet::init(&[state_dim, embed, 1], Activation::Relu, rng)?,
        })
    }

    /// A mixer that reduces to the plain sum of agent values: linear hidden
    /// layer, first embedding unit wired to every agent with weight 1, all
    /// other produced weights and every bias zero.
    pub fn additive(agents: usize, state_dim: usize, embed: usize) -> Result<Self> {
        let mut hyper_w1 = DenseNet::zeros(&[state_dim, agents * embed], Activation::Relu)?;
        // Bias block of the single hypernet layer starts after the weights.
        let bias = state_dim * agents * embed;
        for i in 0..agents {
            hyper_w1.params_mut()[bias + i * embed] = 1.0;
        }
        let mut hyper_w2 = DenseNet::zeros(&[state_dim, embed], Activation::Relu)?;
        hyper_w2.params_mut()[state_dim * embed] = 1.0;
        Ok(Mixer {
            agents,
            embed,
            activation: MixerActivation::Linear,
            hyper_w1,
            hyper_b1: DenseNet::zeros(&[state_dim, embed], Activation::Relu)?,
            hyper_w2,
            hyper_b2: DenseNet::zeros(&[state_dim, embed, 1], Activation::Relu)?,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Zeroes the hypernetworks that produce mixing weights, leaving only the
    /// state-dependent bias path.
    pub fn zero_weight_hypernets(&mut self) {
        self.hyper_w1.params_mut().iter_mut().for_each(|p| *p = 0.0);
        self.hyper_w2.params_mut().iter_mut().for_each(|p| *p = 0.0);
    }

    fn pass(&self, state: &[f64], qs: &[f64]) -> Result<MixerPass> {
        if qs.len() != self.agents {
            return Err(Error::config(format!(
                "mixer expects {} agent values, got {}",
                self.agents,
                qs.len()
            )));
        }
        let c_w1 = self.hyper_w1.forward_rows(state, 1)?;
        let c_b1 = self.hyper_b1.forward_rows(state, 1)?;
        let c_w2 = self.hyper_w2.forward_rows(state, 1)?;
        let c_b2 = self.hyper_b2.forward_rows(state, 1)?;
        let w1_raw = c_w1.outputs().to_vec();
        let w2_raw = c_w2.outputs().to_vec();
        let b1 = c_b1.outputs();
        let e = self.embed;
        let hidden: Vec<f64> = (0..e)
            .map(|k| {
                let pre: f64 = qs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| q * w1_raw[i * e + k].abs())
                    .sum::<f64>()
                    + b1[k];
                self.activation.apply(pre)
            })
            .collect();
        let q_tot = hidden
            .iter()
            .zip(&w2_raw)
            .map(|(h, w)| h * w.abs())
            .sum::<f64>()
            + c_b2.outputs()[0];
        if !q_tot.is_finite() {
            return Err(Error::Divergence("mixer produced a non-finite value".into()));
        }
        Ok(MixerPass {
            q_tot,
            qs: qs.to_vec(),
            w1_raw,
            w2_raw,
            hidden,
            caches: [c_w1, c_b1, c_w2, c_b2],
        })
    }

    /// Mixed team value for state features `state` and agent values `qs`.
    pub fn forward(&self, state: &[f64], qs: &[f64]) -> Result<f64> {
        Ok(self.pass(state, qs)?.q_tot)
    }

    /// Analytic `∂Q_tot/∂q_i`.
    pub fn agent_sensitivities(&self, state: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
        let pass = self.pass(state, qs)?;
        Ok(self.backward(&pass, 1.0)?.1)
    }

    fn backward(&self, pass: &MixerPass, d_qtot: f64) -> Result<(MixerGrads, Vec<f64>)> {
        let e = self.embed;
        let mut d_w2_raw = vec![0.0; e];
        let mut d_pre = vec![0.0; e];
        for k in 0..e {
            d_w2_raw[k] = d_qtot * pass.hidden[k] * sign(pass.w2_raw[k]);
            d_pre[k] = d_qtot * pass.w2_raw[k].abs() * self.activation.derivative(pass.hidden[k]);
        }
        let mut d_w1_raw = vec![0.0; self.agents * e];
        let mut d_qs = vec![0.0; self.agents];
        for i in 0..self.agents {
            for k in 0..e {
                let w = pass.w1_raw[i * e + k];
                d_w1_raw[i * e + k] = d_pre[k] * pass.qs[i] * sign(w);
                d_qs[i] += d_pre[k] * w.abs();
            }
        }
        let grads = MixerGrads {
            w1: self.hyper_w1.backward(&pass.caches[0], &d_w1_raw)?,
            b1: self.hyper_b1.backward(&pass.caches[1], &d_pre)?,
            w2: self.hyper_w2.backward(&pass.caches[2], &d_w2_raw)?,
            b2: self.hyper_b2.backward(&pass.caches[3], &[d_qtot])?,
        };
        Ok((grads, d_qs))
    }

    fn nets_mut(&mut self) -> [&mut DenseNet; 4] {
        [
            &mut self.hyper_w1,
            &mut self.hyper_b1,
            &mut self.hyper_w2,
            &mut self.hyper_b2,
        ]
    }
}

/// Agent networks, mixer and their target copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmixNets {
    pub agents: Vec<DenseNet>,
    pub mixer: Mixer,
    pub target_agents: Vec<DenseNet>,
    pub target_mixer: Mixer,
    /// Divisor applied to entropy features (ln M).
    pub entropy_scale: f64,
    updates: usize,
}

impl QmixNets {
    pub fn new<R: Rng + ?Sized>(
        agents: usize,
        actions: usize,
        entropy_scale: f64,
        cfg: &RlConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if agents == 0 || actions == 0 {
            return Err(Error::config("need at least one agent and one action"));
        }
        let mut sizes = vec![4];
        sizes.extend_from_slice(&cfg.agent_hidden);
        sizes.push(actions);
        let nets = (0..agents)
            .map(|_| DenseNet::init(&sizes, Activation::Relu, rng))
            .collect::<Result<Vec<_>>>()?;
        let mixer = Mixer::new(agents, 4 * agents, cfg.embed_dim, rng)?;
        Ok(QmixNets {
            target_agents: nets.clone(),
            target_mixer: mixer.clone(),
            agents: nets,
            mixer,
            entropy_scale,
            updates: 0,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Per-agent Q-values over the action grid.
    pub fn agent_q_values(&self, state: &GlobalState) -> Result<Vec<Vec<f64>>> {
        state.validate(self.agent_count())?;
        self.agents
            .iter()
            .zip(&state.per_client)
            .map(|(net, c)| Ok(net.forward_rows(&c.features(self.entropy_scale), 1)?.outputs().to_vec()))
            .collect()
    }

    /// Mixed team value of the chosen agent values in `state`.
    pub fn qmix_qtot(&self, state: &GlobalState, chosen_qs: &[f64]) -> Result<f64> {
        state.validate(self.agent_count())?;
        self.mixer.forward(&state.features(self.entropy_scale), chosen_qs)
    }

    /// `∂Q_tot/∂q_i` for each agent.
    pub fn qtot_sensitivities(&self, state: &GlobalState, chosen_qs: &[f64]) -> Result<Vec<f64>> {
        state.validate(self.agent_count())?;
        self.mixer
            .agent_sensitivities(&state.features(self.entropy_scale), chosen_qs)
    }

    /// ε-greedy action per agent; greedy ties go to the lowest index.
    pub fn select_actions(
        &self,
        state: &GlobalState,
        epsilon: f64,
        grid: &ActionGrid,
        rng: &mut StreamRng,
    ) -> Result<JointAction> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        let qs = self.agent_q_values(state)?;
        let indices = qs
            .iter()
            .map(|q| {
                let explore = rng.random::<f64>() < epsilon;
                if explore {
                    rng.random_range(0..grid.len())
                } else {
                    argmax(q)
                }
            })
            .collect();
        JointAction::from_indices(indices, grid)
    }

    pub fn sync_targets(&mut self) {
        self.target_agents = self.agents.clone();
        self.target_mixer = self.mixer.clone();
    }

    fn target_value(&self, next: &GlobalState) -> Result<f64> {
        let features = next.features(self.entropy_scale);
        let chosen: Vec<f64> = self
            .target_agents
            .iter()
            .zip(&next.per_client)
            .map(|(net, c)| {
                let out = net.forward_rows(&c.features(self.entropy_scale), 1)?;
                let q = out.outputs();
                Ok(q[argmax(q)])
            })
            .collect::<Result<_>>()?;
        self.target_mixer.forward(&features, &chosen)
    }

    /// Mean squared TD error of `batch` under the current nets.
    pub fn td_loss(&self, batch: &[Transition], cfg: &RlConfig) -> Result<f64> {
        let mut total = 0.0;
        for tr in batch {
            let qs = self.agent_q_values(&tr.state)?;
            let chosen = chosen_values(&qs, &tr.actions)?;
            let q_tot = self.qmix_qtot(&tr.state, &chosen)?;
            let y = self.td_target(tr, cfg)?;
            total += (q_tot - y).powi(2);
        }
        Ok(total / batch.len() as f64)
    }

    fn td_target(&self, tr: &Transition, cfg: &RlConfig) -> Result<f64> {
        if tr.done {
            Ok(tr.reward)
        } else {
            Ok(tr.reward + cfg.gamma * self.target_value(&tr.next_state)?)
        }
    }

    /// One gradient step on the mean squared TD error; returns the loss
    /// measured before the step. Targets are re-synchronised every
    /// `cfg.target_sync` updates.
    pub fn td_update(&mut self, batch: &[Transition], cfg: &RlConfig) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("TD update on an empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut agent_grads: Vec<Vec<f64>> =
            self.agents.iter().map(|a| vec![0.0; a.param_count()]).collect();
        let mut mixer_grads: Vec<Vec<f64>> = [
            &self.mixer.hyper_w1,
            &self.mixer.hyper_b1,
            &self.mixer.hyper_w2,
            &self.mixer.hyper_b2,
        ]
        .iter()
        .map(|m| vec![0.0; m.param_count()])
        .collect();
        let mut loss = 0.0;

        for tr in batch {
            tr.state.validate(self.agent_count())?;
            if tr.actions.len() != self.agent_count() {
                return Err(Error::config("transition action count does not match agents"));
            }
            let features = tr.state.features(self.entropy_scale);
            let mut caches = Vec::with_capacity(self.agent_count());
            let mut chosen = Vec::with_capacity(self.agent_count());
            for ((net, c), &a) in self.agents.iter().zip(&tr.state.per_client).zip(&tr.actions) {
                let cache = net.forward_rows(&c.features(self.entropy_scale), 1)?;
                let q = cache.outputs();
                if a >= q.len() {
                    return Err(Error::config(format!("action index {a} outside the grid")));
                }
                chosen.push(q[a]);
                caches.push(cache);
            }
            let pass = self.mixer.pass(&features, &chosen)?;
            let y = self.td_target(tr, cfg)?;
            let err = pass.q_tot - y;
            loss += err * err;
            let (mg, d_qs) = self.mixer.backward(&pass, 2.0 * err / n)?;
            for (acc, g) in mixer_grads.iter_mut().zip([&mg.w1, &mg.b1, &mg.w2, &mg.b2]) {
                add_into(acc, g.as_slice());
            }
            for (i, net) in self.agents.iter().enumerate() {
                let mut d_out = vec![0.0; net.output_dim()];
                d_out[tr.actions[i]] = d_qs[i];
                let g = net.backward(&caches[i], &d_out)?;
                add_into(&mut agent_grads[i], g.as_slice());
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::Divergence("non-finite TD loss".into()));
        }

        let norm = agent_grads
            .iter()
            .chain(&mixer_grads)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > cfg.grad_clip {
            cfg.lr * cfg.grad_clip / norm
        } else {
            cfg.lr
        };
        for (net, g) in self.agents.iter_mut().zip(&agent_grads) {
            apply_step(net, g, scale)?;
        }
        for (net, g) in self.mixer.nets_mut().into_iter().zip(&mixer_grads) {
            apply_step(net, g, scale)?;
        }
        self.updates += 1;
        if self.updates % cfg.target_sync == 0 {
            self.sync_targets();
        }
        Ok(loss)
    }
}

fn chosen_values(qs: &[Vec<f64>], actions: &[usize]) -> Result<Vec<f64>> {
    if qs.len() != actions.len() {
        return Err(Error::config("transition action count does not match agents"));
    }
    qs.iter()
        .zip(actions)
        .map(|(q, &a)| {
            q.get(a)
                .copied()
                .ok_or_else(|| Error::config(format!("action index {a} outside the grid")))
        })
        .collect()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

fn apply_step(net: &mut DenseNet, grad: &[f64], scale: f64) -> Result<()> {
    for (p, g) in net.params_mut().iter_mut().zip(grad) {
        *p -= scale * g;
    }
    if net.params().as_slice().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("controller parameters became non-finite".into()));
    }
    Ok(())
}

/// Linear ε schedule from `start` to `end` over `horizon` decays.
pub fn epsilon_at(cfg: &RlConfig, decays: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return cfg.epsilon_end;
    }
    let frac = (decays as f64 / horizon as f64).min(1.0);
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
}

/// Online controller: replay buffer, ε schedule and the nets.
#[derive(Debug, Clone)]
pub struct QmixController {
    nets: QmixNets,
    grid: ActionGrid,
    cfg: RlConfig,
    buffer: VecDeque<Transition>,
    rng: StreamRng,
    decays: usize,
    horizon: usize,
    last_td_loss: Option<f64>,
}

/// Serializable snapshot of a [`QmixController`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerCheckpoint {
    pub version: u32,
    pub nets: QmixNets,
    pub grid: ActionGrid,
    pub cfg: RlConfig,
    pub buffer: Vec<Transition>,
    pub rng: RngState,
    pub decays: usize,
    pub horizon: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl QmixController {
    /// `horizon` is the number of rounds over which ε decays.
    pub fn new(
        agents: usize,
        class_count: usize,
        grid: ActionGrid,
        cfg: RlConfig,
        horizon: usize,
        mut rng: StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let nets = QmixNets::new(agents, grid.len(), (class_count as f64).ln(), &cfg, &mut rng)?;
        Ok(QmixController {
            nets,
            grid,
            cfg,
            buffer: VecDeque::new(),
            rng,
            decays: 0,
            horizon,
            last_td_loss: None,
        })
    }

    pub fn nets(&self) -> &QmixNets {
        &self.nets
    }

    pub fn grid(&self) -> &ActionGrid {
        &self.grid
    }

    pub fn config(&self) -> &RlConfig {
        &self.cfg
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(&self.cfg, self.decays, self.horizon)
    }

    pub fn last_td_loss(&self) -> Option<f64> {
        self.last_td_loss
    }

    /// Actions for the first round: every agent at the smallest level.
    pub fn initial_actions(&self) -> JointAction {
        JointAction::from_indices(vec![0; self.nets.agent_count()], &self.grid)
            .expect("grid is nonempty")
    }

    pub fn select(&mut self, state: &GlobalState, epsilon: f64) -> Result<JointAction> {
        self.nets.select_actions(state, epsilon, &self.grid, &mut self.rng)
    }

    /// Records the finished round's transition, trains once when the buffer
    /// holds a full batch, decays ε and picks the actions for the next round.
    pub fn controller_round(
        &mut self,
        prev_state: &GlobalState,
        prev_actions: &JointAction,
        reward: f64,
        new_state: &GlobalState,
        done: bool,
    ) -> Result<JointAction> {
        self.push(Transition {
            state: prev_state.clone(),
            actions: prev_actions.indices.clone(),
            reward,
            next_state: new_state.clone(),
            done,
        });
        self.train_step()?;
        self.decays += 1;
        let eps = self.epsilon();
        self.select(new_state, eps)
    }

    pub fn push(&mut self, tr: Transition) {
        if self.buffer.len() == self.cfg.replay_capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(tr);
    }

    /// One TD update on a uniformly sampled minibatch, if enough data exists.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        let len = self.buffer.len();
        if len == 0 || len < self.cfg.warmup.min(self.cfg.batch_size) {
            return Ok(None);
        }
        let picks = index::sample(&mut self.rng, len, self.cfg.batch_size.min(len));
        let batch: Vec<Transition> = picks.iter().map(|i| self.buffer[i].clone()).collect();
        let loss = self.nets.td_update(&batch, &self.cfg)?;
        self.last_td_loss = Some(loss);
        Ok(Some(loss))
    }

    pub fn checkpoint(&self) -> ControllerCheckpoint {
        ControllerCheckpoint {
            version: CHECKPOINT_VERSION,
            nets: self.nets.clone(),
            grid: self.grid.clone(),
            cfg: self.cfg.clone(),
            buffer: self.buffer.iter().cloned().collect(),
            rng: RngState::capture(&self.rng),
            decays: self.decays,
            horizon: self.horizon,
        }
    }

    pub fn restore(ckpt: ControllerCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported controller checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(QmixController {
            nets: ckpt.nets,
            grid: ckpt.grid,
            cfg: ckpt.cfg,
            buffer: ckpt.buffer.into(),
            rng: ckpt.rng.restore(),
            decays: ckpt.decays,
            horizon: ckpt.horizon,
            last_td_loss: None,
        })
    }
}
