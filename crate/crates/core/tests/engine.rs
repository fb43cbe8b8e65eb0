use mmfl::config::RunConfig;
use mmfl::engine::MethodKind;
use mmfl::experiment::build_simulation;
use mmfl::models::{local_train, TrainContext};
use mmfl::rng::{derive_rng, Stream};
use mmfl::MmflError;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(include_str!("../../../configs/smoke.toml")).unwrap();
    cfg.num_clients = 12;
    cfg
}

const ALL: [MethodKind; 7] = [
    MethodKind::Random,
    MethodKind::FullParticipation,
    MethodKind::Gvr,
    MethodKind::Lvr,
    MethodKind::StaleNaive { beta: 0.5 },
    MethodKind::StaleVr,
    MethodKind::StaleVre,
];

#[test]
fn long_run_step_size_averages_one() {
    // A larger budget keeps the standard error of the mean near 0.03.
    let cfg = RunConfig { active_rate: 0.3, ..tiny() };
    for method in ALL {
        let mut sim = build_simulation(&cfg, 5).unwrap();
        let mut sums = vec![0.0; sim.num_models()];
        let rounds = 1000;
        for _ in 0..rounds {
            let m = sim.run_round(method).unwrap();
            for (s, x) in m.models.iter().enumerate() {
                sums[s] += x.step_size;
            }
        }
        for (s, total) in sums.iter().enumerate() {
            let mean = total / rounds as f64;
            assert!((0.9..=1.1).contains(&mean), "{method} model {s}: mean step size {mean}");
        }
    }
}

#[test]
fn same_seed_same_metrics() {
    let cfg = tiny();
    for method in ALL {
        let mut a = build_simulation(&cfg, 9).unwrap();
        let mut b = build_simulation(&cfg, 9).unwrap();
        for _ in 0..6 {
            assert_eq!(a.run_round(method).unwrap(), b.run_round(method).unwrap());
        }
        assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn full_participation_is_weighted_average_of_updates() {
    let mut cfg = tiny();
    cfg.models.truncate(1);
    let mut sim = build_simulation(&cfg, 2).unwrap();
    let before = sim.weights[0].clone();
    let lr = sim.train_config.learning_rate;
    let mut expected = before.0.clone();
    for &i in sim.topology.model_clients(0) {
        let mut rng = derive_rng(2, Stream::LocalTrain, &[0, i as u64, 0]);
        let run = local_train(
            &before,
            &sim.train_data[0][&i],
            &sim.model_specs[0],
            &sim.train_config,
            lr,
            TrainContext { client: i, model: 0, round: 0 },
            &mut rng,
        )
        .unwrap();
        let d = sim.topology.data_weight(i, 0);
        for (e, g) in expected.iter_mut().zip(run.delta.iter()) {
            *e -= d * g;
        }
    }
    let m = sim.run_round(MethodKind::FullParticipation).unwrap();
    assert!((m.models[0].step_size - 1.0).abs() < 1e-12);
    for (a, b) in sim.weights[0].iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn divergence_reports_method_and_round() {
    let mut cfg = tiny();
    cfg.train.learning_rate = 1e308;
    let mut sim = build_simulation(&cfg, 0).unwrap();
    let err = (0..20).find_map(|_| sim.run_round(MethodKind::Random).err()).expect("diverges");
    match err {
        MmflError::Method { method, source } => {
            assert!(method.starts_with("random"), "{method}");
            assert!(matches!(*source, MmflError::Divergence { .. }), "{source}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn stale_methods_fill_memory_only_for_trained_pairs() {
    let cfg = tiny();
    let mut sim = build_simulation(&cfg, 1).unwrap();
    let m = sim.run_round(MethodKind::StaleVre).unwrap();
    // Slots of one client share a stored update.
    assert!(sim.store.len() <= m.costs.updates_uploaded);
    assert_eq!(m.costs.stale_memory_slots, sim.store.len());
    let mut plain = build_simulation(&cfg, 1).unwrap();
    plain.run_round(MethodKind::Lvr).unwrap();
    assert!(plain.store.is_empty());
}
