use std::path::Path;
use std::time::Instant;

use fedsemi::aggregate::resolve_weights;
use fedsemi::orchestrator::{leave_one_out_with_data, Phase};
use fedsemi::{prepare_data, run_experiment, ExperimentConfig, RunOptions, Simulation, Strategy};

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json"))
        .unwrap()
}

#[test]
fn smoke_config_is_fast_and_deterministic() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    run_experiment(
        &cfg,
        Some(&dir.path().join("a")),
        RunOptions::with_threads(1),
    )
    .unwrap();
    assert!(start.elapsed().as_secs() < 30);
    run_experiment(
        &cfg,
        Some(&dir.path().join("b")),
        RunOptions::with_threads(1),
    )
    .unwrap();
    for f in ["metrics.csv", "summary.json", "weights/round_7.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn csv_rows_follow_cadence() {
    for (every, warm_eval) in [(1, true), (5, true), (4, false), (3, true)] {
        let mut cfg = smoke();
        cfg.eval_every = every;
        cfg.evaluate_warmup = warm_eval;
        let res = run_experiment(&cfg, None, RunOptions::with_threads(1)).unwrap();
        let warm = if warm_eval {
            cfg.warmup_rounds / every
        } else {
            0
        };
        let expected = cfg.rounds / every + warm;
        assert_eq!(
            res.metrics_csv().lines().count(),
            1 + expected,
            "every {every}"
        );
    }
}

#[test]
fn weight_log_is_consistent_and_complete() {
    for strategy in [Strategy::FedAvg, Strategy::FedAvgSemi, Strategy::SemiAnAgg] {
        let mut cfg = smoke();
        cfg.strategy = strategy;
        let res = run_experiment(&cfg, None, RunOptions::with_threads(1)).unwrap();
        assert_eq!(res.logs.len(), cfg.warmup_rounds + cfg.rounds);
        for log in &res.logs {
            assert_eq!(
                log.weights.client_ids, res.client_ids,
                "every client every round"
            );
            let sum: f64 = log.weights.coefficients.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let s = if log.phase == Phase::Warmup {
                Strategy::FedAvgSemi
            } else {
                strategy
            };
            let again = resolve_weights(&log.reports, s, log.lambda_hat_1).unwrap();
            assert_eq!(again.coefficients, log.weights.coefficients);
        }
    }
}

#[test]
fn metrics_are_valid_on_balanced_test_set() {
    let res = run_experiment(&smoke(), None, RunOptions::with_threads(1)).unwrap();
    for m in &res.metrics {
        let e = &m.metrics;
        assert!((0.0..=1.0).contains(&e.accuracy) && (0.0..=1.0).contains(&e.balanced_accuracy));
        assert!((e.accuracy - e.balanced_accuracy).abs() < 1e-9);
    }
}

#[test]
fn zero_confident_pseudo_labels_put_all_mass_on_labeled_clients() {
    let mut cfg = smoke();
    cfg.local.threshold_mode = fedsemi::local_train::ThresholdMode::Fixed;
    cfg.local.confidence_threshold = 1.0;
    let res = run_experiment(&cfg, None, RunOptions::with_threads(1)).unwrap();
    for log in res.logs.iter().filter(|l| l.phase == Phase::Fedsemi) {
        assert!(log.reports.iter().all(|r| r.n_hat_u == 0));
        assert_eq!(log.weights.coefficients, vec![1.0, 0.0, 0.0]);
    }
}

#[test]
fn fedavg_semi_with_all_clients_labeled_is_labeled_fedavg() {
    let mut cfg = smoke();
    cfg.partition.labeled_client_ids = vec![0, 1, 2];
    cfg.partition.labeled_share = None;
    cfg.partition.label_fraction = Some(vec![1.0; 3]);
    cfg.strategy = Strategy::FedAvgSemi;
    let res = run_experiment(&cfg, None, RunOptions::with_threads(1)).unwrap();
    let data = prepare_data(&cfg).unwrap();
    let sizes: Vec<f64> = data.clients.iter().map(|c| c.n_labeled() as f64).collect();
    let total: f64 = sizes.iter().sum();
    for log in &res.logs {
        for (c, n) in log.weights.coefficients.iter().zip(&sizes) {
            assert_eq!(*c, n / total);
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = smoke();
    let a = run_experiment(&cfg, None, RunOptions::with_threads(1)).unwrap();
    let b = run_experiment(&cfg, None, RunOptions::with_threads(3)).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.global, b.global);
}

#[test]
fn dictionaries_are_fixed_across_rounds() {
    let cfg = smoke();
    let data = prepare_data(&cfg).unwrap();
    let mut sim = Simulation::new(cfg, data, RunOptions::with_threads(1)).unwrap();
    let before = sim.state().dictionaries.clone();
    sim.run_warmup().unwrap();
    sim.run_round(1).unwrap();
    assert_eq!(sim.state().dictionaries, before);
    assert!(sim.state().global.is_finite());
}

/// Clients 1-3 hold distinct unlabeled data; client 4 holds a subset of
/// client 2's samples and client 5 alone holds every sample of class 2.
#[test]
fn removing_a_redundant_client_matters_less_than_a_unique_one() {
    let mut redundant = Vec::new();
    let mut unique = Vec::new();
    for seed in 1..=5u64 {
        let cfg = ExperimentConfig::from_value(serde_json::json!({
            "seed": seed,
            "data": {"kind": "pinned", "path": "unused"},
            "partition": {"clients": 6},
            "architecture": {"hidden": [16, 8]},
            "warmup_rounds": 10,
            "rounds": 30,
            "eval_every": 30,
            "evaluate_warmup": false
        }))
        .unwrap();
        let data = subset_federation(seed);
        let table = leave_one_out_with_data(&cfg, data, None, RunOptions::default()).unwrap();
        redundant.push(table.row_for(4).unwrap().delta_error.abs());
        unique.push(table.row_for(5).unwrap().delta_error.abs());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&redundant) < mean(&unique),
        "{redundant:?} vs {unique:?}"
    );
}

fn subset_federation(seed: u64) -> fedsemi::FederatedData {
    use fedsemi::data_sim::GaussianMixture;
    use fedsemi::ClientDataset;
    let mix = GaussianMixture::new(3, 6, 0.35, seed).unwrap();
    let split =
        |ds: fedsemi::Dataset, keep: &dyn Fn(usize) -> bool| -> (Vec<Vec<f64>>, Vec<usize>) {
            ds.features()
                .iter()
                .cloned()
                .zip(ds.labels().iter().copied())
                .filter(|(_, y)| keep(*y))
                .unzip()
        };
    let lab = mix.sample(&[10, 10, 10], 1).unwrap();
    let mut clients = vec![ClientDataset::with_hidden_labels(
        0,
        lab.features()
            .iter()
            .cloned()
            .zip(lab.labels().iter().copied())
            .collect(),
        Vec::new(),
        Vec::new(),
    )
    .unwrap()];
    let mut two = None;
    for k in 1..=3 {
        let (x, y) = split(mix.sample(&[60, 60, 1], 10 + k as u64).unwrap(), &|c| {
            c != 2
        });
        if k == 2 {
            two = Some((x.clone(), y.clone()));
        }
        clients.push(ClientDataset::with_hidden_labels(k, Vec::new(), x, y).unwrap());
    }
    let (x, y) = two.unwrap();
    let half = x.len() / 2;
    clients.push(
        ClientDataset::with_hidden_labels(4, Vec::new(), x[..half].to_vec(), y[..half].to_vec())
            .unwrap(),
    );
    let (x, y) = split(mix.sample(&[1, 1, 60], 20).unwrap(), &|c| c == 2);
    clients.push(ClientDataset::with_hidden_labels(5, Vec::new(), x, y).unwrap());
    fedsemi::FederatedData {
        class_count: 3,
        feature_dim: 6,
        clients,
        test: mix
            .sample(&[80; 3], fedsemi::rng::stream::TEST_SET)
            .unwrap(),
    }
}

/// Training code must not be able to reach the hidden labels.
#[test]
fn training_modules_do_not_touch_the_oracle() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    for file in ["local_train.rs", "aggregate.rs", "tensor_net.rs"] {
        let text = std::fs::read_to_string(src.join(file)).unwrap();
        let body = text.split("#[cfg(test)]").next().unwrap();
        assert!(!body.contains("oracle"), "{file} references the oracle");
        assert!(!body.contains("true_labels"), "{file} reads true labels");
    }
}
