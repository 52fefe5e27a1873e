//! Dense feed-forward classifiers with hand-written backpropagation.
//!
//! Parameters of a [`DenseNet`] live in one flat [`ParamVector`]; layer `l`
//! occupies a `fan_out × fan_in` row-major weight block followed by its
//! `fan_out` biases. The flat layout is what clients and the server exchange.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of model parameters. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self.len(), other.len(), "sub")?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ParamVector(values)
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::config(format!(
            "{what}: length mismatch ({a} vs {b})"
        )));
    }
    Ok(())
}

/// Squared Euclidean distance `Σ (a_i - b_i)²`.
pub fn l2_distance_sq(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a.len(), b.len(), "l2_distance_sq")?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// One plain gradient-descent step, `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    check_len(params.len(), grad.len(), "sgd_step")?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
    }
    ParamVector::new(
        params
            .0
            .iter()
            .zip(&grad.0)
            .map(|(p, g)| p - lr * g)
            .collect(),
    )
}

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// A fully connected network mapping `layer_sizes[0]` inputs to
/// `layer_sizes.last()` outputs (logits or Q-values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: ParamVector,
}

impl DenseNet {
    /// Number of parameters for the given layer sizes: `Σ (fan_in + 1) · fan_out`.
    pub fn param_count_for(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(
                "a network needs at least an input and an output layer",
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params: ParamVector::zeros(Self::param_count_for(layer_sizes)),
        })
    }

    /// Scaled Gaussian initialisation: weights `N(0, gain / fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        let gain = activation.init_gain();
        for span in net.spans() {
            let std = (gain / span.fan_in as f64).sqrt();
            for w in &mut net.params.0[span.w..span.b] {
                let z: f64 = rng.sample(StandardNormal);
                *w = std * z;
            }
        }
        Ok(net)
    }

    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        params: ParamVector,
    ) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        check_len(
            params.len(),
            Self::param_count_for(layer_sizes),
            "network parameters",
        )?;
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        check_len(params.len(), self.param_count(), "network parameters")?;
        Ok(DenseNet {
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_len(params.len(), self.param_count(), "network parameters")?;
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        self.params.as_mut_slice()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let span = LayerSpan {
                    w: off,
                    b: off + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                off += (fan_in + 1) * fan_out;
                span
            })
            .collect()
    }

    /// Forward pass over `rows` inputs stored row-major in `inputs`.
    pub fn forward_rows(&self, inputs: &[f64], rows: usize) -> Result<Activations> {
        if rows == 0 || inputs.len() != rows * self.input_dim() {
            return Err(Error::config(format!(
                "input has {} values, expected {} rows of width {}",
                inputs.len(),
                rows,
                self.input_dim()
            )));
        }
        let spans = self.spans();
        let p = self.params.as_slice();
        let mut layers = Vec::with_capacity(spans.len() + 1);
        let mut pre = Vec::with_capacity(spans.len());
        layers.push(inputs.to_vec());
        for (l, span) in spans.iter().enumerate() {
            let input = &layers[l];
            let mut z = vec![0.0; rows * span.fan_out];
            for r in 0..rows {
                let x = &input[r * span.fan_in..(r + 1) * span.fan_in];
                for o in 0..span.fan_out {
                    let wrow = &p[span.w + o * span.fan_in..span.w + (o + 1) * span.fan_in];
                    let dot: f64 = wrow.iter().zip(x).map(|(w, v)| w * v).sum();
                    z[r * span.fan_out + o] = dot + p[span.b + o];
                }
            }
            let last = l + 1 == spans.len();
            let a = if last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite activation in layer {l}"
                )));
            }
            pre.push(z);
            layers.push(a);
        }
        Ok(Activations { rows, layers, pre })
    }

    /// Backpropagates `d_out` (gradient of a scalar w.r.t. the outputs of
    /// [`forward_rows`](Self::forward_rows)) to a parameter gradient.
    pub fn backward(&self, acts: &Activations, d_out: &[f64]) -> Result<ParamVector> {
        let spans = self.spans();
        let rows = acts.rows;
        check_len(d_out.len(), rows * self.output_dim(), "output gradient")?;
        let p = self.params.as_slice();
        let mut grad = vec![0.0; self.param_count()];
        let mut delta = d_out.to_vec();
        for (l, span) in spans.iter().enumerate().rev() {
            let input = &acts.layers[l];
            for r in 0..rows {
                let x = &input[r * span.fan_in..(r + 1) * span.fan_in];
                for o in 0..span.fan_out {
                    let d = delta[r * span.fan_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    let g = &mut grad[span.w + o * span.fan_in..span.w + (o + 1) * span.fan_in];
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += d * xi;
                    }
                    grad[span.b + o] += d;
                }
            }
            if l == 0 {
                break;
            }
            // Propagate into the previous layer's pre-activations.
            let z_prev = &acts.pre[l - 1];
            let a_prev = &acts.layers[l];
            let mut next = vec![0.0; rows * span.fan_in];
            for r in 0..rows {
                for o in 0..span.fan_out {
                    let d = delta[r * span.fan_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &p[span.w + o * span.fan_in..span.w + (o + 1) * span.fan_in];
                    for (i, w) in wrow.iter().enumerate() {
                        next[r * span.fan_in + i] += d * w;
                    }
                }
                for i in 0..span.fan_in {
                    let k = r * span.fan_in + i;
                    next[k] *= self.activation.derivative(z_prev[k], a_prev[k]);
                }
            }
            delta = next;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        Ok(ParamVector::from_raw(grad))
    }
}

/// Cached intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    rows: usize,
    /// `layers[0]` is the input, `layers[L]` the raw outputs.
    layers: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Activations {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Network outputs, row-major.
    pub fn outputs(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }
}

/// A minibatch of labelled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("batch must contain at least one sample".into()));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::config(format!(
                "batch has {} feature values for {} labels of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("batch features must be finite".into()));
        }
        Ok(Batch {
            features,
            dim,
            labels,
        })
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

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Result of [`forward`]: mean cross-entropy, accuracy and the cache needed
/// by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    probs: Vec<f64>,
    cache: Activations,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward(net: &DenseNet, batch: &Batch) -> Result<ForwardPass> {
    if batch.dim() != net.input_dim() {
        return Err(Error::config(format!(
            "batch width {} does not match network input {}",
            batch.dim(),
            net.input_dim()
        )));
    }
    let m = net.output_dim();
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= m) {
        return Err(Error::config(format!(
            "label {bad} out of range for {m} classes"
        )));
    }
    let cache = net.forward_rows(batch.features(), batch.len())?;
    let logits = cache.outputs();
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(batch.len());
    for (r, &y) in batch.labels().iter().enumerate() {
        let row = &logits[r * m..(r + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[y];
        for (k, z) in row.iter().enumerate() {
            probs[r * m + k] = (z - lse).exp();
        }
        let pred = argmax(row);
        if pred == y {
            correct += 1;
        }
        predictions.push(pred);
    }
    let n = batch.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite loss".into()));
    }
    Ok(ForwardPass {
        loss,
        accuracy: correct as f64 / n,
        predictions,
        probs,
        cache,
    })
}

/// Gradient of the mean cross-entropy with respect to the network parameters.
pub fn cross_entropy_grad(net: &DenseNet, batch: &Batch, pass: &ForwardPass) -> Result<ParamVector> {
    let m = net.output_dim();
    let n = batch.len() as f64;
    let mut d = pass.probs.clone();
    for (r, &y) in batch.labels().iter().enumerate() {
        d[r * m + y] -= 1.0;
    }
    for v in &mut d {
        *v /= n;
    }
    net.backward(&pass.cache, &d)
}

/// The augmented local objective: cross-entropy, proximal pull toward an
/// anchor and a squared deviation from a reference loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub mu: f64,
    pub anchor: ParamVector,
    pub lambda_fair: f64,
    pub f_bar: Option<f64>,
    pub scale_clamp: (f64, f64),
}

pub const DEFAULT_SCALE_CLAMP: (f64, f64) = (0.1, 10.0);

impl ObjectiveSpec {
    /// Plain cross-entropy (no proximal or fairness terms).
    pub fn plain(anchor: ParamVector) -> Self {
        ObjectiveSpec {
            mu: 0.0,
            anchor,
            lambda_fair: 0.0,
            f_bar: None,
            scale_clamp: DEFAULT_SCALE_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_clamp;
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.lambda_fair >= 0.0 && self.lambda_fair.is_finite()) {
            return Err(Error::config(format!(
                "lambda_fair must be >= 0, got {}",
                self.lambda_fair
            )));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!(
                "scale clamp ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if let Some(f) = self.f_bar {
            if !f.is_finite() {
                return Err(Error::config("reference loss must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub objective: f64,
    pub grad: ParamVector,
    pub base_loss: f64,
    pub accuracy: f64,
}

/// Evaluates the augmented objective and its gradient.
///
/// `objective = L + (μ/2)‖w − w_anchor‖² + λ (L − F̄)²`. The cross-entropy
/// gradient is scaled by `1 + 2λ(L − F̄)` clamped to `scale_clamp`, which keeps
/// the step a descent direction when a client's loss sits far below `F̄`. With
/// no `f_bar` the fairness term is absent.
pub fn loss_and_grad(net: &DenseNet, batch: &Batch, spec: &ObjectiveSpec) -> Result<Objective> {
    spec.validate()?;
    check_len(spec.anchor.len(), net.param_count(), "objective anchor")?;
    let pass = forward(net, batch)?;
    let base_grad = cross_entropy_grad(net, batch, &pass)?;
    let base_loss = pass.loss;

    let (fair_value, scale) = match spec.f_bar {
        Some(f_bar) => {
            let gap = base_loss - f_bar;
            let (lo, hi) = spec.scale_clamp;
            (
                spec.lambda_fair * gap * gap,
                (1.0 + 2.0 * spec.lambda_fair * gap).clamp(lo, hi),
            )
        }
        None => (0.0, 1.0),
    };

    let w = net.params().as_slice();
    let anchor = spec.anchor.as_slice();
    let prox = 0.5 * spec.mu * l2_distance_sq(net.params(), &spec.anchor)?;
    let grad: Vec<f64> = base_grad
        .as_slice()
        .iter()
        .zip(w.iter().zip(anchor))
        .map(|(g, (wi, ai))| scale * g + spec.mu * (wi - ai))
        .collect();
    let objective = base_loss + prox + fair_value;
    if !objective.is_finite() {
        return Err(Error::Divergence("non-finite objective".into()));
    }
    Ok(Objective {
        objective,
        grad: ParamVector::new(grad)?,
        base_loss,
        accuracy: pass.accuracy,
    })
}
