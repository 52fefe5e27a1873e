//! Self-organising-map weighting of client models for server aggregation.
//!
//! Client deltas (`w_h − w_global`) are projected to a low-dimensional space
//! by a fixed Gaussian matrix and fed to a small online SOM that persists
//! across rounds. A client's weight grows with its cosine similarity to the
//! global model and shrinks with its distance to its best matching unit.

use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Fixed random linear map from parameter space to SOM feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    out_dim: usize,
    in_dim: usize,
    matrix: Vec<f64>,
}

impl Projector {
    /// Entries drawn i.i.d. from `N(0, 1/out_dim)`.
    pub fn new<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let scale = 1.0 / (out_dim as f64).sqrt();
        let matrix = (0..out_dim * in_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Projector {
            out_dim,
            in_dim,
            matrix,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn project(&self, delta: &ParamVector) -> Result<Vec<f64>> {
        if delta.len() != self.in_dim {
            return Err(Error::config(format!(
                "projector expects {} parameters, got {}",
                self.in_dim,
                delta.len()
            )));
        }
        let x = delta.as_slice();
        Ok(self
            .matrix
            .chunks(self.in_dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Rectangular Kohonen map with exponentially decaying rate and radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    weights: Vec<f64>,
    pub sigma0: f64,
    pub lr0: f64,
    /// Decay horizon τ in rounds.
    pub tau: f64,
}

impl SomGrid {
    /// Neuron weights drawn from `N(0, 0.1)`.
    pub fn new<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        dim: usize,
        sigma0: f64,
        lr0: f64,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let weights = (0..rows * cols * dim).map(|_| rng.sample(normal)).collect();
        Self::from_weights(rows, cols, dim, weights, sigma0, lr0, tau)
    }

    pub fn from_weights(
        rows: usize,
        cols: usize,
        dim: usize,
        weights: Vec<f64>,
        sigma0: f64,
        lr0: f64,
        tau: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::config("SOM grid and feature dimensions must be positive"));
        }
        if weights.len() != rows * cols * dim || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("SOM weights have the wrong shape or are not finite"));
        }
        if !(sigma0 > 0.0 && lr0 >= 0.0 && tau > 0.0) {
            return Err(Error::key(
                "som",
                "sigma0 and tau must be positive and lr0 non-negative",
            ));
        }
        Ok(SomGrid {
            rows,
            cols,
            dim,
            weights,
            sigma0,
            lr0,
            tau,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn neuron(&self, row: usize, col: usize) -> &[f64] {
        let k = (row * self.cols + col) * self.dim;
        &self.weights[k..k + self.dim]
    }

    pub fn learning_rate(&self, round: usize) -> f64 {
        self.lr0 * (-(round as f64) / self.tau).exp()
    }

    pub fn sigma(&self, round: usize) -> f64 {
        self.sigma0 * (-(round as f64) / self.tau).exp()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::config(format!(
                "SOM input has {} features, expected {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Grid coordinate of the neuron closest to `x`; ties go to the smallest
    /// `(row, col)`.
    pub fn bmu(&self, x: &[f64]) -> Result<(usize, usize)> {
        self.check_dim(x)?;
        let mut best = (0, 0);
        let mut best_d = f64::INFINITY;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let d = dist_sq(self.neuron(r, c), x);
                if d < best_d {
                    best_d = d;
                    best = (r, c);
                }
            }
        }
        Ok(best)
    }

    /// Euclidean distance from `x` to its best matching unit.
    pub fn bmu_distance(&self, x: &[f64]) -> Result<((usize, usize), f64)> {
        let (r, c) = self.bmu(x)?;
        Ok(((r, c), dist_sq(self.neuron(r, c), x).sqrt()))
    }

    /// Scheduled Kohonen update for round `round`.
    pub fn update(&mut self, x: &[f64], round: usize) -> Result<()> {
        let (lr, sigma) = (self.learning_rate(round), self.sigma(round));
        self.update_with(x, lr, sigma)
    }

    /// `w_n += lr · exp(−d²(n, bmu) / 2σ²) · (x − w_n)` for every neuron `n`,
    /// with `d` the grid distance.
    pub fn update_with(&mut self, x: &[f64], lr: f64, sigma: f64) -> Result<()> {
        let (br, bc) = self.bmu(x)?;
        let two_sigma_sq = 2.0 * sigma * sigma;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let grid_d2 = (r as f64 - br as f64).powi(2) + (c as f64 - bc as f64).powi(2);
                let influence = lr * (-grid_d2 / two_sigma_sq).exp();
                if influence == 0.0 {
                    continue;
                }
                let k = (r * self.cols + c) * self.dim;
                for (w, xi) in self.weights[k..k + self.dim].iter_mut().zip(x) {
                    *w += influence * (xi - *w);
                }
            }
        }
        Ok(())
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine of the angle between two vectors; `None` if either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity mapped to `[0, 1]`; zero vectors score `0.5`.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    (1.0 + cosine(a, b).unwrap_or(0.0)) / 2.0
}

/// Per-client aggregation weights; non-negative and summing to `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector(Vec<f64>);

impl AlphaVector {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        let h = alphas.len() as f64;
        if alphas.is_empty() || alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config("aggregation weights must be finite and non-negative"));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - h).abs() > 1e-9 * h.max(1.0) {
            return Err(Error::config(format!(
                "aggregation weights sum to {sum}, expected {h}"
            )));
        }
        Ok(AlphaVector(alphas))
    }

    pub fn uniform(h: usize) -> Self {
        AlphaVector(vec![1.0; h])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `α_h = H · ρ_h / Σ ρ_k` with `ρ_h = sim_h / (1 + dist_h)`.
pub fn alphas_from_scores(similarities: &[f64], distances: &[f64]) -> Result<AlphaVector> {
    if similarities.len() != distances.len() || similarities.is_empty() {
        return Err(Error::config("similarity and distance counts differ"));
    }
    let rho: Vec<f64> = similarities
        .iter()
        .zip(distances)
        .map(|(s, d)| s / (1.0 + d))
        .collect();
    let total: f64 = rho.iter().sum();
    let h = rho.len() as f64;
    if !(total > 0.0 && total.is_finite()) {
        return Ok(AlphaVector::uniform(rho.len()));
    }
    AlphaVector::new(rho.iter().map(|r| h * r / total).collect())
}

/// Everything computed while weighting one round's client models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub alphas: AlphaVector,
    pub bmus: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub similarities: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Trains the SOM on this round's projected client deltas (in client order)
/// and then scores every client against the updated map.
pub fn compute_alphas(
    som: &mut SomGrid,
    locals: &[ParamVector],
    global: &ParamVector,
    projector: &Projector,
    round: usize,
) -> Result<AlphaReport> {
    if locals.len() < 2 {
        return Err(Error::config("SOM weighting needs at least two clients"));
    }
    let features = locals
        .iter()
        .map(|w| projector.project(&w.sub(global)?))
        .collect::<Result<Vec<_>>>()?;
    for x in &features {
        som.update(x, round)?;
    }
    let mut warnings = Vec::new();
    let mut bmus = Vec::with_capacity(locals.len());
    let mut distances = Vec::with_capacity(locals.len());
    let mut similarities = Vec::with_capacity(locals.len());
    for (h, (w, x)) in locals.iter().zip(&features).enumerate() {
        let (coord, d) = som.bmu_distance(x)?;
        bmus.push(coord);
        distances.push(d);
        if cosine(w.as_slice(), global.as_slice()).is_none() {
            let msg = format!("client {h}: zero-norm parameters, cosine taken as 0");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        similarities.push(similarity(w.as_slice(), global.as_slice()));
    }
    Ok(AlphaReport {
        alphas: alphas_from_scores(&similarities, &distances)?,
        bmus,
        distances,
        similarities,
        warnings,
    })
}

/// `Σ_h c_h · w_h`, accumulated in client order.
pub fn weighted_combination(locals: &[ParamVector], coeffs: &[f64]) -> Result<ParamVector> {
    let first = locals
        .first()
        .ok_or_else(|| Error::config("nothing to aggregate"))?;
    if coeffs.len() != locals.len() {
        return Err(Error::config("one coefficient per client is required"));
    }
    if locals.iter().any(|w| w.len() != first.len()) {
        return Err(Error::config("client parameter lengths differ"));
    }
    let mut out = vec![0.0; first.len()];
    for (w, &c) in locals.iter().zip(coeffs) {
        for (o, v) in out.iter_mut().zip(w.as_slice()) {
            *o += c * v;
        }
    }
    ParamVector::new(out)
}

/// `w = (1/H) Σ_h α_h · w_h`.
pub fn aggregate(locals: &[ParamVector], alphas: &AlphaVector) -> Result<ParamVector> {
    if alphas.len() != locals.len() {
        return Err(Error::config(format!(
            "{} weights for {} clients",
            alphas.len(),
            locals.len()
        )));
    }
    let h = locals.len() as f64;
    let coeffs: Vec<f64> = alphas.as_slice().iter().map(|a| a / h).collect();
    weighted_combination(locals, &coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn grid(seed: u64) -> SomGrid {
        let mut rng = stream(seed, Stream::Som);
        SomGrid::new(5, 5, 4, 2.5, 0.5, 10.0, &mut rng).unwrap()
    }

    #[test]
    fn projection_is_linear() {
        let mut rng = stream(1, Stream::Projector);
        let p = Projector::new(8, 20, &mut rng).unwrap();
        assert!(p.project(&ParamVector::zeros(20)).unwrap().iter().all(|v| *v == 0.0));
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = p.project(&pv(&a)).unwrap();
        let pb = p.project(&pv(&b)).unwrap();
        let pab = p.project(&pv(&ab)).unwrap();
        for i in 0..8 {
            assert!((pab[i] - pa[i] - pb[i]).abs() < 1e-10);
        }
        assert!(p.project(&ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn projection_preserves_norm_on_average() {
        let mut rng = stream(2, Stream::Projector);
        let p = Projector::new(32, 200, &mut rng).unwrap();
        let mut total = 0.0;
        for _ in 0..100 {
            let v: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
            total += p.project(&pv(&unit)).unwrap().iter().map(|x| x * x).sum::<f64>();
        }
        let mean = total / 100.0;
        assert!((0.7..=1.3).contains(&mean), "{mean}");
    }

    #[test]
    fn bmu_examples() {
        let som = grid(3);
        let target = som.neuron(2, 3).to_vec();
        assert_eq!(som.bmu(&target).unwrap(), (2, 3));

        let flat = SomGrid::from_weights(5, 5, 2, vec![0.3; 50], 2.5, 0.5, 10.0).unwrap();
        assert_eq!(flat.bmu(&[1.0, -1.0]).unwrap(), (0, 0));
    }

    #[test]
    fn bmu_matches_exhaustive_scan() {
        let mut rng = stream(4, Stream::Som);
        for seed in 0..20 {
            let som = grid(100 + seed);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
            let mut scan = Vec::new();
            for r in 0..5 {
                for c in 0..5 {
                    let d: f64 = som.neuron(r, c).iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                    scan.push((d, r, c));
                }
            }
            scan.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(som.bmu(&x).unwrap(), (scan[0].1, scan[0].2));
        }
    }

    #[test]
    fn zero_rate_leaves_grid_unchanged() {
        let mut som = grid(5);
        let before = som.clone();
        som.update_with(&[1.0, 2.0, 3.0, 4.0], 0.0, 1.0).unwrap();
        assert_eq!(som, before);
    }

    #[test]
    fn single_neuron_full_rate_assimilates() {
        let mut som = SomGrid::from_weights(1, 1, 3, vec![0.0; 3], 1.0, 1.0, 1.0).unwrap();
        som.update_with(&[0.5, -2.0, 7.0], 1.0, 1.0).unwrap();
        assert_eq!(som.neuron(0, 0), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn repeated_updates_converge_to_input() {
        let mut som = grid(6);
        let x = [0.4, -0.2, 0.9, 0.1];
        for _ in 0..200 {
            som.update_with(&x, 0.5, 1.0).unwrap();
        }
        let (_, d) = som.bmu_distance(&x).unwrap();
        assert!(d < 1e-3);
    }

    #[test]
    fn cosine_identities() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        assert_eq!(similarity(&[3.0, 4.0], &[3.0, 4.0]), 1.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!((similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.9).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.5);
    }

    #[test]
    fn identical_clients_get_unit_weights() {
        let mut som = grid(7);
        let mut rng = stream(7, Stream::Projector);
        let proj = Projector::new(4, 3, &mut rng).unwrap();
        let g = pv(&[0.1, -0.4, 0.3]);
        let report = compute_alphas(&mut som, &vec![g.clone(); 4], &g, &proj, 0).unwrap();
        assert_eq!(report.alphas.as_slice(), &[1.0; 4]);
    }

    #[test]
    fn higher_similarity_gets_more_weight() {
        let a = alphas_from_scores(&[0.9, 0.95, 0.6], &[0.3; 3]).unwrap();
        let s = a.as_slice();
        assert!(s[1] > s[0] && s[0] > s[2]);
        assert!((s.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let two = [pv(&[1.0, 1.0]), pv(&[3.0, 3.0])];
        assert_eq!(aggregate(&two, &AlphaVector::uniform(2)).unwrap().as_slice(), &[2.0, 2.0]);
        let skew = AlphaVector::new(vec![2.0, 0.0]).unwrap();
        assert_eq!(aggregate(&two, &skew).unwrap(), two[0]);
        let three = [pv(&[1.0]), pv(&[2.0]), pv(&[6.0])];
        let a = AlphaVector::new(vec![1.5, 1.5, 0.0]).unwrap();
        assert!((aggregate(&three, &a).unwrap().as_slice()[0] - 1.5).abs() < 1e-15);
        assert!(aggregate(&three, &skew).is_err());
    }

    #[test]
    fn alpha_vector_rejects_bad_sums() {
        assert!(AlphaVector::new(vec![1.0, 0.5]).is_err());
        assert!(AlphaVector::new(vec![-1.0, 3.0]).is_err());
    }
}
