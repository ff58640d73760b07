use std::time::Duration;

use prunebench_core::fleet::{accuracy_gap, gaps, run_fleet, sweep_csv, sweep_rho};
use prunebench_core::model::{flops_per_sample, Pass};
use prunebench_core::pruner::WarmupConfig;
use prunebench_core::{
    CostReport, CostWeights, DeviceResult, Error, ExperimentConfig, FleetResult, Method,
};
use serde_json::{json, Value};

/// A small synthetic experiment; top-level keys of `overrides` replace the base.
fn config(overrides: Value, n: usize, label_noise: f64) -> ExperimentConfig {
    let mut base = json!({
        "dataset": {"synthetic": {"num_samples": n, "num_classes": 4, "feature_dim": 5,
            "class_separation": 3.0, "noise_std": 1.0, "label_noise": label_noise, "seed": 3}},
        "partition": {"num_devices": 4},
        "train": {"epochs": 5, "batch_size": 8},
        "seeds": [0, 1]
    });
    for (k, v) in overrides.as_object().unwrap() {
        base[k] = v.clone();
    }
    ExperimentConfig::from_json(&base.to_string()).unwrap()
}

fn device(id: usize, shard: usize, acc: f64) -> DeviceResult {
    DeviceResult {
        device_id: id,
        method: Method::Importance,
        rho: 0.5,
        shard_size: shard,
        retained: shard / 2,
        train_loss: 0.0,
        train_acc: acc,
        test_loss: 0.0,
        test_acc: acc,
        cost: CostReport::default(),
        trace: Vec::new(),
        warmup_time: Duration::ZERO,
        train_time: Duration::ZERO,
    }
}

fn fleet(method: Method, acc: f64) -> FleetResult {
    let mut d = device(0, 10, acc);
    d.method = method;
    FleetResult::new(0.5, method, 0, vec![d], &CostWeights::default()).unwrap()
}

#[test]
fn gap_is_a_difference_of_fleet_accuracies() {
    let imp = fleet(Method::Importance, 0.80);
    let rand = fleet(Method::Random, 0.65);
    assert!((accuracy_gap(&imp, &rand).unwrap() - 0.15).abs() < 1e-15);
    assert_eq!(
        accuracy_gap(&imp, &fleet(Method::Random, 0.80)).unwrap(),
        0.0
    );
    assert!(matches!(
        accuracy_gap(&rand, &imp),
        Err(Error::Comparison(_))
    ));
    let mut other_seed = fleet(Method::Random, 0.65);
    other_seed.seed = 9;
    assert!(matches!(
        accuracy_gap(&imp, &other_seed),
        Err(Error::Comparison(_))
    ));
}

#[test]
fn merge_ignores_device_order() {
    let devices: Vec<DeviceResult> = (0..6)
        .map(|k| device(k, 10 + 7 * k, 0.1 * k as f64))
        .collect();
    let mut reversed = devices.clone();
    reversed.reverse();
    let w = CostWeights::default();
    let a = FleetResult::new(0.5, Method::Importance, 0, devices, &w).unwrap();
    let b = FleetResult::new(0.5, Method::Importance, 0, reversed, &w).unwrap();
    assert_eq!(a.test_acc.to_bits(), b.test_acc.to_bits());
    assert_eq!(a.weights, b.weights);
    assert_eq!(
        a.devices.iter().map(|d| d.device_id).collect::<Vec<_>>(),
        (0..6).collect::<Vec<_>>()
    );
}

#[test]
fn single_device_fleet_is_that_device() {
    let cfg = config(json!({"partition": {"num_devices": 1}}), 200, 0.0);
    let corpus = cfg.load_corpus(std::path::Path::new(".")).unwrap();
    for r in run_fleet(&cfg, &corpus, 1).unwrap() {
        let d = &r.devices[0];
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.test_acc, d.test_acc);
        assert_eq!(r.train_acc, d.train_acc);
        assert_eq!(r.cost, d.cost);
    }
}

#[test]
fn fleet_weights_and_budgets() {
    let cfg = config(
        json!({"partition": {"num_devices": 5, "scheme": "iid"}, "pruning": {"rho": 0.3}}),
        500,
        0.1,
    );
    let corpus = cfg.load_corpus(std::path::Path::new(".")).unwrap();
    let layout = cfg.layout_for(&corpus).unwrap();
    let c = flops_per_sample(&layout, Pass::ForwardBackward);
    let results = run_fleet(&cfg, &corpus, 1).unwrap();
    assert_eq!(results.len(), 3 * 2);
    for r in &results {
        // 400 training samples over 5 devices.
        assert!(r.weights.iter().all(|&p| p == 0.2));
        let weighted: f64 = r
            .devices
            .iter()
            .zip(&r.weights)
            .map(|(d, p)| p * d.test_acc)
            .sum();
        assert!((r.test_acc - weighted).abs() <= 1e-12);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(
            r.cost.total_flops(),
            r.cost.score_flops + r.cost.select_flops + r.cost.train_flops
        );
        for d in &r.devices {
            let m = if r.method == Method::Full { 80 } else { 24 };
            assert_eq!(d.retained, m);
            assert_eq!(d.cost.train_flops, (5 * m.div_ceil(8)) as u64 * c * 8);
            assert_eq!(d.cost.latency_s, d.cost.train_flops as f64 / 1e9);
            assert_eq!(d.cost.energy_j, 2.0 * d.cost.latency_s);
            if r.method == Method::Importance {
                let t0 = WarmupConfig::epoch_iterations(1, 80, 8) as u64;
                assert_eq!(d.cost.score_flops, t0 * c * 8);
                assert_eq!(d.cost.select_flops, 5 * 80);
            } else {
                assert_eq!(d.cost.score_flops + d.cost.select_flops, 0);
            }
        }
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = config(json!({}), 600, 0.1);
    let corpus = cfg.load_corpus(std::path::Path::new(".")).unwrap();
    let methods = [Method::Importance, Method::Random, Method::Full];
    let one = sweep_rho(&cfg, &corpus, &[0.2, 1.0], &methods, 1).unwrap();
    let three = sweep_rho(&cfg, &corpus, &[0.2, 1.0], &methods, 3).unwrap();
    assert_eq!(
        sweep_csv(&one, &cfg.weights),
        sweep_csv(&three, &cfg.weights)
    );
}

#[test]
fn sweep_cardinality_and_order() {
    let cfg = config(json!({"partition": {"num_devices": 3}}), 300, 0.0);
    let corpus = cfg.load_corpus(std::path::Path::new(".")).unwrap();
    let results = sweep_rho(
        &cfg,
        &corpus,
        &[0.1, 0.5, 1.0],
        &[Method::Random, Method::Importance],
        1,
    )
    .unwrap();
    assert_eq!(results.len(), 12);
    let keys: Vec<(f64, Method, u64)> = results.iter().map(|r| (r.rho, r.method, r.seed)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    assert_eq!(keys, sorted);
    assert_eq!(gaps(&results).unwrap().len(), 6);
    assert!(sweep_rho(&cfg, &corpus, &[], &[Method::Random], 1).is_err());
    assert!(sweep_rho(&cfg, &corpus, &[1.5], &[Method::Random], 1).is_err());
}

#[test]
fn fifteen_iid_devices_three_seeds() {
    let cfg = config(
        json!({"partition": {"num_devices": 15, "scheme": "iid"}, "seeds": [0, 1, 2]}),
        1500,
        0.1,
    );
    let corpus = cfg.load_corpus(std::path::Path::new(".")).unwrap();
    let results = run_fleet(&cfg, &corpus, 1).unwrap();
    let devices: usize = results.iter().map(|r| r.devices.len()).sum();
    assert_eq!(devices, 15 * 3 * 3);
}

#[test]
fn importance_beats_random_at_low_ratio_on_noisy_labels() {
    let text = json!({
        "dataset": {"synthetic": {"num_samples": 2000, "num_classes": 10, "feature_dim": 20,
            "class_separation": 3.0, "noise_std": 1.0, "label_noise": 0.2, "seed": 1}}
    });
    let cfg = ExperimentConfig::from_json(&text.to_string()).unwrap();
    let corpus = cfg.load_corpus(std::path::Path::new(".")).unwrap();
    let results = sweep_rho(
        &cfg,
        &corpus,
        &[0.1],
        &[Method::Importance, Method::Random],
        1,
    )
    .unwrap();
    let mean = |m: Method| {
        let v: Vec<f64> = results
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.test_acc)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(
        mean(Method::Importance) > mean(Method::Random),
        "importance {} random {}",
        mean(Method::Importance),
        mean(Method::Random)
    );
}
