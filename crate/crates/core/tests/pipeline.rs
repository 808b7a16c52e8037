use proptest::prelude::*;
use swarmwm_core::runtime::{
    evaluate_instance, expert_plan, generate_demos, learn_model, load_demo_dir, run_online, write_run, METRICS_FILE,
    RUN_RECORD_FILE,
};
use swarmwm_core::{evolve, generate_instance, validate_solution, Area, FieldConfig, GAConfig, MetricsReport, SimConfig, WorldModel};

fn small_cfg() -> SimConfig {
    let mut cfg = SimConfig::ci();
    cfg.ga = GAConfig { population: 30, generations: 20, ..cfg.ga };
    cfg.demonstrations = 4;
    cfg
}

#[test]
fn demos_survive_the_disk_and_train_the_same_model() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let batch = generate_demos(&cfg, dir.path(), &seeds).unwrap();
    assert_eq!(batch.generated + batch.skipped.len(), 4);
    let loaded = load_demo_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), batch.demos.len());
    for ((sa, a), (sb, b)) in batch.demos.iter().zip(&loaded) {
        assert_eq!(sa, sb);
        assert_eq!(a.routes, b.routes);
        assert_eq!(a.allocation, b.allocation);
        assert_eq!(a.trajectories.len(), b.trajectories.len());
    }
    let again = generate_demos(&cfg, dir.path(), &seeds).unwrap();
    assert_eq!(again.generated, 0);

    let m1 = learn_model(&cfg, &batch.demos).unwrap();
    let m2 = learn_model(&cfg, &loaded).unwrap();
    assert_eq!(m1.to_json().unwrap(), m2.to_json().unwrap());

    let path = dir.path().join("model.json");
    m1.save(&path).unwrap();
    assert_eq!(WorldModel::load(&path).unwrap().to_json().unwrap(), m1.to_json().unwrap());
}

#[test]
fn online_mission_completes_and_metrics_roundtrip() {
    let cfg = small_cfg();
    let demos: Vec<_> = (0..4u64)
        .filter_map(|s| expert_plan(&cfg.instance.sample(s).unwrap(), &cfg, s).ok().map(|d| (s, d)))
        .collect();
    let model = learn_model(&cfg, &demos).unwrap();
    let inst = cfg.instance.sample(cfg.test_seed).unwrap();
    let (run, metrics) = evaluate_instance(&cfg, &model, &inst, 5).unwrap();
    assert!(metrics.success.completion, "{metrics:?}");
    assert!(metrics.completion_time <= cfg.max_time);
    assert!(metrics.rmse_ekf < metrics.rmse_meas);

    let dir = tempfile::tempdir().unwrap();
    let written = write_run(dir.path(), &run, Some(&metrics)).unwrap();
    assert!(written.iter().all(|p| p.is_file()));
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(back, metrics);
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_RECORD_FILE)).unwrap()).unwrap();
    assert_eq!(rec["seed"], 5);

    // Same seed, same flight.
    let again = run_online(&cfg, &model, &inst, 5).unwrap();
    assert_eq!(again.record.tracks, run.record.tracks);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn expert_plans_satisfy_every_constraint(seed in 0u64..10_000, n in 2usize..9, q in 1usize..4) {
        let q = q.min(n);
        let inst = generate_instance(seed, n, q, Area::new(300.0, 300.0), 2).unwrap();
        let ga = GAConfig { population: 20, generations: 8, seed, ..GAConfig::default() };
        let demo = evolve(&inst, &ga, &FieldConfig::default()).unwrap();
        let report = validate_solution(&inst, &demo.allocation, &demo.routes);
        prop_assert!(report.ok, "{:?}", report.violations);
        prop_assert_eq!(demo.trajectories.len(), q);
        let best = demo.history.windows(2).all(|w| w[1] <= w[0] + 1e-9);
        prop_assert!(best, "best-so-far cost increased");
    }
}
