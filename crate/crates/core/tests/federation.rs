//! Round-level behaviour of the training loop across algorithms.

use fedmrl::config::{Algo, ExperimentConfig};
use fedmrl::data::synth_gaussian_mixture;
use fedmrl::orchestrator::{run_experiment, AlphaPolicy, Experiment, ExperimentCheckpoint, MuPolicy, RoundRecord};
use fedmrl::qmix::ActionGrid;

fn small(algo: Algo, seed: u64, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        algo,
        seed,
        rounds,
        ..ExperimentConfig::default()
    };
    cfg.data.per_class = 200;
    cfg.partition.shards_per_class = 40;
    cfg
}

fn records(cfg: &ExperimentConfig) -> Vec<RoundRecord> {
    run_experiment(cfg, &mut |_| Ok(())).unwrap().records
}

#[test]
fn single_round_gives_single_record() {
    for algo in Algo::ALL {
        assert_eq!(records(&small(algo, 1, 1)).len(), 1);
    }
}

#[test]
fn repeated_runs_are_identical() {
    for algo in Algo::ALL {
        let cfg = small(algo, 2, 4);
        assert_eq!(records(&cfg), records(&cfg));
    }
}

#[test]
fn parallel_and_serial_agree() {
    let mut cfg = small(Algo::Fedmrl, 3, 4);
    let par = records(&cfg);
    cfg.parallel = false;
    assert_eq!(par, records(&cfg));
}

#[test]
fn every_algorithm_learns() {
    for algo in Algo::ALL {
        let recs = records(&small(algo, 4, 30));
        let (first, last) = (&recs[0], recs.last().unwrap());
        assert!(last.global_acc > first.global_acc, "{algo}: {} -> {}", first.global_acc, last.global_acc);
    }
}

#[test]
fn reference_loss_is_previous_mean() {
    let recs = records(&small(Algo::Fedmrl, 5, 6));
    assert_eq!(recs[0].f_bar, None);
    for w in recs.windows(2) {
        let prev = &w[0].client_loss;
        let expected = prev.iter().sum::<f64>() / prev.len() as f64;
        assert!((w[1].f_bar.unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn first_round_uses_minimal_mu_and_later_rounds_stay_on_grid() {
    let recs = records(&small(Algo::Fedmrl, 6, 8));
    assert!(recs[0].mu.iter().all(|&m| m == 1e-5));
    let grid = ActionGrid::default();
    for r in &recs {
        assert!(r.mu.iter().all(|m| grid.levels().contains(m)));
        assert_eq!(r.bmus.len(), r.alpha.len());
    }
}

#[test]
fn baselines_use_sample_size_weights() {
    let mut cfg = small(Algo::Fedavg, 7, 1);
    cfg.clients = 3;
    cfg.data.per_class = 500;
    cfg.partition.shards_per_class = 200;
    let recs = records(&cfg);
    assert_eq!(recs[0].alpha, vec![1.0; 3]);
    assert!(recs[0].mu.iter().all(|&m| m == 0.0));

    let recs = records(&small(Algo::Fedprox, 7, 1));
    assert!(recs[0].mu.iter().all(|&m| m == 0.1));
    assert!((recs[0].alpha.iter().sum::<f64>() - 5.0).abs() < 1e-12);
}

#[test]
fn single_client_federation_returns_its_local_model() {
    let data = synth_gaussian_mixture(3, 60, 2, 3.0, 8).unwrap();
    let eval = synth_gaussian_mixture(3, 10, 2, 3.0, 9).unwrap();
    let cfg = small(Algo::Fedavg, 8, 3);
    let mut exp = Experiment::with_data(cfg, vec![data], eval).unwrap();
    while !exp.is_finished() {
        let (_, reports) = exp.step_with_reports().unwrap();
        assert_eq!(exp.global().params(), &reports[0].local_params);
    }
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let cfg = small(Algo::Fedmrl, 9, 8);
    let straight = records(&cfg);

    let mut exp = Experiment::new(cfg).unwrap();
    let mut resumed: Vec<RoundRecord> = (0..3).map(|_| exp.step().unwrap()).collect();
    let json = serde_json::to_string(&exp.checkpoint()).unwrap();
    drop(exp);
    let ckpt: ExperimentCheckpoint = serde_json::from_str(&json).unwrap();
    let mut exp = Experiment::restore(ckpt).unwrap();
    assert_eq!(exp.round(), 3);
    resumed.extend(exp.run(&mut |_| Ok(())).unwrap().records);
    assert_eq!(resumed, straight);
}

#[test]
fn stepping_past_the_end_is_an_error() {
    let mut exp = Experiment::new(small(Algo::Fedavg, 10, 1)).unwrap();
    exp.step().unwrap();
    assert!(exp.step().is_err());
}

#[test]
fn divergence_reports_round_and_exit_code() {
    let mut cfg = small(Algo::Fedavg, 11, 3);
    cfg.train.lr = 1e300;
    let mut seen = 0;
    let err = run_experiment(&cfg, &mut |_| {
        seen += 1;
        Ok(())
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("round 0"), "{err}");
    assert_eq!(seen, 0);
}

#[test]
fn fairness_term_reduces_client_loss_spread() {
    // Same constant μ for both arms so only the fairness weight differs.
    let mut lower = 0;
    for seed in 0..5 {
        let run = |lambda: f64| {
            let cfg = ExperimentConfig {
                algo: Algo::Fedmrl,
                seed,
                lambda_fair: lambda,
                ..ExperimentConfig::default()
            };
            let mut exp = Experiment::new(cfg)
                .unwrap()
                .with_policies(MuPolicy::Fixed(0.01), AlphaPolicy::Som);
            exp.run(&mut |_| Ok(())).unwrap().records.last().unwrap().loss_variance
        };
        lower += usize::from(run(1.0) < run(0.0));
    }
    assert!(lower >= 4, "{lower}/5");
}
