//! Acceptance suite. Each criterion runs in isolation, prints one PASS/FAIL
//! line with its runtime, and the test fails if any criterion does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use fedmrl::client::ClientReport;
use fedmrl::config::{Algo, ExperimentConfig};
use fedmrl::data::{partition, synth_gaussian_mixture, LabeledDataset, PartitionPlan};
use fedmrl::nn::{loss_and_grad, Activation, Batch, DenseNet, ObjectiveSpec, ParamVector};
use fedmrl::orchestrator::{
    fairness_descent_check, fairness_landscape, fairness_loss, AlphaPolicy, Experiment, MuPolicy,
};
use fedmrl::qmix::{
    epsilon_at, reward, vdn_qtot, ActionGrid, ClientState, GlobalState, Mixer, QmixController,
    QmixNets, RlConfig, Transition,
};
use fedmrl::report::{self, METRICS_FILE};
use fedmrl::rng::{stream, Stream};

// ---------------------------------------------------------------- criterion 1

fn gradient_oracle() {
    let mut rng = stream(101, Stream::ModelInit);
    let mut configs = 0;
    let mut worst: f64 = 0.0;
    for &mu in &[0.0, 0.1, 1.0] {
        for &lambda in &[0.0, 1.0] {
            for rep in 0..4 {
                let act = if rep % 2 == 0 { Activation::Tanh } else { Activation::Relu };
                let dim = rng.random_range(2..5);
                let m = rng.random_range(2..5);
                let sizes = [dim, rng.random_range(3..7), m];
                let net = DenseNet::init(&sizes, act, &mut rng).unwrap();
                let n = rng.random_range(3..9);
                let features: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
                let batch = Batch::new(features, dim, labels).unwrap();
                let anchor = ParamVector::new(
                    net.params()
                        .as_slice()
                        .iter()
                        .map(|w| w + 0.3 * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
                .unwrap();
                // Keep the fairness multiplier inside its clamp so the
                // returned gradient is the true gradient of the objective.
                let base = loss_and_grad(&net, &batch, &ObjectiveSpec::plain(anchor.clone()))
                    .unwrap()
                    .base_loss;
                let spec = ObjectiveSpec {
                    mu,
                    anchor,
                    lambda_fair: lambda,
                    f_bar: Some(base + rng.random_range(-0.4..0.4)),
                    scale_clamp: (0.1, 10.0),
                };
                let analytic = loss_and_grad(&net, &batch, &spec).unwrap().grad;
                let h = 1e-5;
                for i in 0..net.param_count() {
                    let shifted = |d: f64| {
                        let mut p = net.params().clone().into_vec();
                        p[i] += d;
                        let probe = net.with_params(ParamVector::new(p).unwrap()).unwrap();
                        loss_and_grad(&probe, &batch, &spec).unwrap().objective
                    };
                    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let a = analytic.as_slice()[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    worst = worst.max(rel);
                }
                configs += 1;
            }
        }
    }
    println!("    {configs} configurations, max relative error {worst:.3e}");
    assert!(configs >= 20);
    assert!(worst < 1e-5, "max relative error {worst}");
}

// ---------------------------------------------------------------- criterion 2

fn fairness_minimizer() {
    let f = fairness_descent_check(&[1.0, 0.0], 500, 0.1).unwrap();
    assert!(f.iter().all(|v| (v - 0.5).abs() < 1e-6), "{f:?}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("landscape.csv");
    let total = 1.0;
    let points = report::emit_landscape(total, 101, &path).unwrap();
    let min = points
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    assert_eq!(min.0, total / 2.0);
    assert_eq!(points, fairness_landscape(total, 101).unwrap());

    let mut rng = stream(102, Stream::Dataset);
    for h in [2usize, 3, 5] {
        for _ in 0..50 {
            let v: f64 = rng.random_range(0.0..5.0);
            assert_eq!(fairness_loss(&vec![v; h]), 0.0);
            let mut w = vec![v; h];
            w[rng.random_range(0..h)] += rng.random_range(1e-3..1.0);
            assert!(fairness_loss(&w) > 0.0);
        }
    }
}

// ---------------------------------------------------------------- criterion 3

fn qmix_monotonicity() {
    let mut rng = stream(103, Stream::Controller);
    let cfg = RlConfig::default();
    let mut probes = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let agents = rng.random_range(2..6);
        let nets = QmixNets::new(agents, 10, 3f64.ln(), &cfg, &mut rng).unwrap();
        for _ in 0..10 {
            let state = GlobalState::new(
                (0..agents)
                    .map(|_| ClientState {
                        entropy: rng.random_range(0.0..1.1),
                        proportion: rng.random_range(0.0..1.0),
                        accuracy: rng.random_range(0.0..1.0),
                        loss: rng.random_range(0.0..3.0),
                    })
                    .collect(),
            );
            let qs: Vec<f64> = (0..agents).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut up = qs.clone();
            up[rng.random_range(0..agents)] += rng.random_range(1e-6..2.0);
            let delta = nets.qmix_qtot(&state, &up).unwrap() - nets.qmix_qtot(&state, &qs).unwrap();
            worst = worst.min(delta);
            probes += 1;
        }
    }
    println!("    {probes} probes, smallest ΔQ_tot {worst:.3e}");
    assert!(worst >= -1e-9);

    for agents in 1..6 {
        let mixer = Mixer::additive(agents, 4 * agents, 32).unwrap();
        for _ in 0..20 {
            let s: Vec<f64> = (0..4 * agents).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qs: Vec<f64> = (0..agents).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mixed = mixer.forward(&s, &qs).unwrap();
            assert!((mixed - vdn_qtot(&qs)).abs() < 1e-9);
        }
    }
}

// ---------------------------------------------------------------- criterion 4

const PAYOFF: [[f64; 3]; 3] = [[4.0, -2.0, 0.0], [-2.0, 1.0, -1.0], [0.0, -1.0, 7.0]];

fn best_joint_action() -> (usize, usize) {
    let mut best = (0, 0);
    for a in 0..3 {
        for b in 0..3 {
            if PAYOFF[a][b] > PAYOFF[best.0][best.1] {
                best = (a, b);
            }
        }
    }
    best
}

fn matrix_game_solved(seed: u64, steps: usize) -> bool {
    let cfg = RlConfig::default();
    let grid = ActionGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
    let mut ctl =
        QmixController::new(2, 2, grid, cfg.clone(), steps / 2, stream(seed, Stream::Controller))
            .unwrap();
    let s = GlobalState::new(vec![
        ClientState { entropy: 0.5, proportion: 0.5, accuracy: 0.0, loss: 0.0 };
        2
    ]);
    for step in 0..steps {
        let a = ctl.select(&s, epsilon_at(&cfg, step, steps / 2)).unwrap();
        ctl.push(Transition {
            state: s.clone(),
            actions: a.indices.clone(),
            reward: PAYOFF[a.indices[0]][a.indices[1]],
            next_state: s.clone(),
            done: true,
        });
        ctl.train_step().unwrap();
    }
    let greedy = ctl.select(&s, 0.0).unwrap();
    (greedy.indices[0], greedy.indices[1]) == best_joint_action()
}

fn matrix_game() {
    let wins = (0..5).filter(|&s| matrix_game_solved(s, 5000)).count();
    println!("    optimal joint action {:?}, solved {wins}/5 seeds", best_joint_action());
    assert!(wins >= 4);
}

// ---------------------------------------------------------------- criterion 5

fn reward_anchors() {
    for zeta in [0.0, 0.3, 0.7, 1.0] {
        assert_eq!(reward(zeta, zeta), 0.0);
    }
    assert!((reward(1.0, 0.0) - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    let grid: Vec<f64> = (0..100).map(|i| reward(i as f64 / 99.0, 0.7)).collect();
    assert!(grid.windows(2).all(|w| w[1] > w[0]));
}

// ---------------------------------------------------------------- criterion 6

/// 400 training samples per class cut into 200 shards of 2: three clients
/// end up with 400 samples each.
fn equal_size_config(algo: Algo) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        algo,
        clients: 3,
        rounds: 5,
        seed: 6,
        lambda_fair: 0.0,
        prox_mu: 0.0,
        ..ExperimentConfig::default()
    };
    cfg.data.per_class = 500;
    cfg
}

fn param_bits(p: &ParamVector) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn trajectory(mut exp: Experiment) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    while !exp.is_finished() {
        exp.step().unwrap();
        out.push(param_bits(exp.global().params()));
    }
    out
}

fn equivalence_chain() {
    let avg = Experiment::new(equal_size_config(Algo::Fedavg)).unwrap();
    let sizes: Vec<usize> = avg.clients().iter().map(LabeledDataset::len).collect();
    assert_eq!(sizes, vec![400; 3]);
    let avg = trajectory(avg);
    let prox = trajectory(Experiment::new(equal_size_config(Algo::Fedprox)).unwrap());
    let mrl = trajectory(
        Experiment::new(equal_size_config(Algo::Fedmrl))
            .unwrap()
            .with_policies(MuPolicy::Fixed(0.0), AlphaPolicy::Uniform),
    );
    assert_eq!(avg.len(), 5);
    assert!(avg == prox, "fedprox(μ=0) differs from fedavg");
    assert!(avg == mrl, "stubbed fedmrl differs from fedavg");
}

// ---------------------------------------------------------------- criterion 7

fn in_hull(global: &ParamVector, reports: &[ClientReport]) -> bool {
    (0..global.len()).all(|i| {
        let vals = reports.iter().map(|r| r.local_params.as_slice()[i]);
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        let g = global.as_slice()[i];
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        g >= lo - slack && g <= hi + slack
    })
}

fn aggregation_invariants() {
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            seed,
            rounds: 10,
            ..ExperimentConfig::default()
        };
        let mut exp = Experiment::new(cfg).unwrap();
        while !exp.is_finished() {
            let (rec, reports) = exp.step_with_reports().unwrap();
            let h = rec.alpha.len() as f64;
            assert!(rec.alpha.iter().all(|&a| a >= 0.0));
            assert!((rec.alpha.iter().sum::<f64>() - h).abs() < 1e-9);
            assert!(in_hull(exp.global().params(), &reports), "round {}", rec.round);
        }
    }

    let avg = Experiment::new(equal_size_config(Algo::Fedavg)).unwrap();
    let nova = Experiment::new(equal_size_config(Algo::Fednova)).unwrap();
    let (mut avg, mut nova) = (avg, nova);
    let mut worst: f64 = 0.0;
    while !avg.is_finished() {
        let (_, ra) = avg.step_with_reports().unwrap();
        let (_, rn) = nova.step_with_reports().unwrap();
        assert!(ra.iter().chain(&rn).all(|r| r.steps_taken == ra[0].steps_taken));
        let d = avg
            .global()
            .params()
            .as_slice()
            .iter()
            .zip(nova.global().params().as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
    }
    println!("    fednova vs fedavg max |Δw| {worst:.3e}");
    assert!(worst < 1e-12);
}

// ---------------------------------------------------------------- criterion 8

fn sorted_rows(d: &LabeledDataset) -> Vec<(Vec<u64>, usize)> {
    let mut rows: Vec<(Vec<u64>, usize)> = (0..d.len())
        .map(|i| (d.row(i).iter().map(|v| v.to_bits()).collect(), d.labels()[i]))
        .collect();
    rows.sort();
    rows
}

fn modal_class(d: &LabeledDataset) -> usize {
    let counts = d.class_counts();
    // First maximum, so ties resolve to the smallest class index.
    (0..counts.len()).fold(0, |best, c| if counts[c] > counts[best] { c } else { best })
}

fn partitioner_exactness() {
    for seed in 0..5u64 {
        let data = synth_gaussian_mixture(3, 600, 2, 3.0, 200 + seed).unwrap();
        let all = sorted_rows(&data);
        for eta in [0.0, 0.5, 1.0] {
            for h in [2usize, 5, 10] {
                let parts = partition(&data, &PartitionPlan::new(eta, h, seed)).unwrap();
                assert_eq!(parts.len(), h);
                let mut union: Vec<(Vec<u64>, usize)> = parts.iter().flat_map(sorted_rows).collect();
                union.sort();
                assert_eq!(union, all, "η={eta} H={h} seed={seed}");
            }
        }
    }
    for h in [2usize, 5, 10] {
        let ok = (0..5u64)
            .filter(|&seed| {
                let data = synth_gaussian_mixture(3, 600, 2, 3.0, 200 + seed).unwrap();
                let plan = PartitionPlan::new(1.0, h, seed);
                let parts = partition(&data, &plan).unwrap();
                parts.iter().enumerate().all(|(c, p)| modal_class(p) == plan.preferred(c, 3))
            })
            .count();
        println!("    η=1, H={h}: preferred class modal for every client in {ok}/5 seeds");
        assert!(ok >= 4);
    }
}

// ---------------------------------------------------------------- criterion 9

fn final_round(algo: Algo, seed: u64) -> fedmrl::orchestrator::RoundRecord {
    let cfg = ExperimentConfig {
        algo,
        seed,
        clients: 5,
        rounds: 30,
        lambda_fair: 1.0,
        ..ExperimentConfig::default()
    };
    assert_eq!((cfg.data.classes, cfg.data.per_class), (3, 600));
    assert_eq!((cfg.data.separation, cfg.partition.eta), (3.0, 1.0));
    let out = fedmrl::orchestrator::run_experiment(&cfg, &mut |_| Ok(())).unwrap();
    out.records.last().unwrap().clone()
}

fn end_to_end() {
    let mut acc_mrl = 0.0;
    let mut acc_avg = 0.0;
    let mut lower_var = 0;
    for seed in 0..5 {
        let mrl = final_round(Algo::Fedmrl, seed);
        let avg = final_round(Algo::Fedavg, seed);
        println!(
            "    seed {seed}: acc fedmrl {:.4} fedavg {:.4}; loss variance fedmrl {:.3e} fedavg {:.3e}",
            mrl.global_acc, avg.global_acc, mrl.loss_variance, avg.loss_variance
        );
        acc_mrl += mrl.global_acc / 5.0;
        acc_avg += avg.global_acc / 5.0;
        lower_var += usize::from(mrl.loss_variance < avg.loss_variance);
    }
    println!(
        "    mean acc fedmrl {acc_mrl:.4} fedavg {acc_avg:.4}; lower variance in {lower_var}/5 seeds"
    );
    assert!(acc_mrl >= acc_avg - 0.01);
    assert!(lower_var >= 4);
}

// --------------------------------------------------------------- criterion 10

fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    for algo in Algo::ALL {
        let cfg = ExperimentConfig {
            algo,
            seed: 10,
            rounds: 8,
            ..ExperimentConfig::default()
        };
        let a = dir.path().join(format!("{algo}-a"));
        let b = dir.path().join(format!("{algo}-b"));
        report::run_to_dir(&cfg, &a).unwrap();
        report::run_to_dir(&cfg, &b).unwrap();
        let fa = std::fs::read(a.join(METRICS_FILE)).unwrap();
        let fb = std::fs::read(b.join(METRICS_FILE)).unwrap();
        assert!(!fa.is_empty());
        assert!(fa == fb, "{algo}: metrics.csv differs between identical runs");
    }
}

// --------------------------------------------------------------------- driver

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn(), Duration); 10] = [
        (1, "gradient oracle", gradient_oracle, Duration::from_secs(10)),
        (2, "fairness minimizer", fairness_minimizer, Duration::from_secs(1)),
        (3, "QMIX monotonicity", qmix_monotonicity, Duration::from_secs(30)),
        (4, "QMIX matrix game", matrix_game, Duration::from_secs(120)),
        (5, "reward anchor points", reward_anchors, Duration::from_secs(1)),
        (6, "equivalence chain", equivalence_chain, Duration::from_secs(60)),
        (7, "aggregation invariants", aggregation_invariants, Duration::from_secs(60)),
        (8, "partitioner exactness", partitioner_exactness, Duration::from_secs(60)),
        (9, "end-to-end comparison", end_to_end, Duration::from_secs(600)),
        (10, "determinism", determinism, Duration::from_secs(60)),
    ];
    let mut failed = Vec::new();
    for (id, name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let ok = outcome.is_ok() && took <= limit;
        let note = if outcome.is_ok() && !ok {
            format!(" (over the {}s limit)", limit.as_secs())
        } else {
            String::new()
        };
        println!(
            "criterion {id:>2} {name:<24} {} in {:.2}s{note}",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !ok {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
