//! Local training properties that span several runs.

use fedmrl::client::{local_train, ClientConfig, LocalObjective};
use fedmrl::data::synth_gaussian_mixture;
use fedmrl::nn::{l2_distance_sq, Activation, DenseNet};
use fedmrl::rng::{stream, Stream};

fn drift(seed: u64, mu: f64, lr: f64) -> f64 {
    let data = synth_gaussian_mixture(3, 80, 2, 3.0, seed).unwrap();
    let net = DenseNet::init(&[2, 16, 3], Activation::Relu, &mut stream(seed, Stream::ModelInit)).unwrap();
    let mut cfg = ClientConfig::new(0);
    cfg.lr = lr;
    let mut rng = stream(seed, Stream::Client { client: 0, round: 0 });
    let report = local_train(&net, &data, &cfg, &LocalObjective::proximal(mu), 0, &mut rng).unwrap();
    l2_distance_sq(&report.local_params, net.params()).unwrap().sqrt()
}

#[test]
fn proximal_pull_is_monotone_in_mu() {
    let mean_drift = |mu: f64| (0..5).map(|s| drift(s, mu, 0.05)).sum::<f64>() / 5.0;
    let drifts: Vec<f64> = [0.0, 0.1, 1.0, 10.0].iter().map(|&m| mean_drift(m)).collect();
    assert!(drifts.windows(2).all(|w| w[1] <= w[0]), "{drifts:?}");
}

#[test]
fn huge_mu_keeps_the_model_near_the_anchor() {
    // lr·μ = 1 keeps the proximal step stable: every step restarts from the
    // anchor, so only the last gradient step remains.
    let lr = 1e-6;
    for seed in 0..3 {
        assert!(drift(seed, 1e6, lr) < drift(seed, 0.0, lr));
    }
}

#[test]
fn steps_match_batches_times_epochs() {
    let data = synth_gaussian_mixture(2, 37, 3, 2.0, 1).unwrap();
    let net = DenseNet::init(&[3, 4, 2], Activation::Tanh, &mut stream(1, Stream::ModelInit)).unwrap();
    for (batch, epochs) in [(1, 1), (10, 2), (74, 3), (100, 1)] {
        let mut cfg = ClientConfig::new(0);
        cfg.batch_size = batch;
        cfg.local_epochs = epochs;
        let mut rng = stream(1, Stream::Client { client: 0, round: 0 });
        let r = local_train(&net, &data, &cfg, &LocalObjective::plain(), 0, &mut rng).unwrap();
        assert_eq!(r.steps_taken, 74usize.div_ceil(batch) * epochs);
    }
}
