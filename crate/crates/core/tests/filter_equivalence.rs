use hjcp_core::conformal::{build_calibration_set, CalibratedModel};
use hjcp_core::filter::{run_episode_seeded, Controller, Policy, Strategy};
use hjcp_core::highway::{Highway, HighwayConfig};
use hjcp_core::learn::{train_value, TrainConfig};
use hjcp_core::mlp::Mlp;

fn small_model(env: &Highway) -> CalibratedModel<Mlp> {
    let cfg = TrainConfig {
        gamma: 0.95,
        batch_size: 16,
        gradient_steps: 300,
        warm_start_steps: 100,
        episodes: 4,
        rounds: 2,
        hidden: vec![16],
        ..TrainConfig::default()
    };
    let net = train_value(env, &cfg, 3).unwrap().net;
    let points = build_calibration_set(env, &net, 60, cfg.gamma, 200, 11).unwrap();
    CalibratedModel::from_points(net, &points, &[0.1]).unwrap()
}

#[test]
fn one_member_ensemble_reproduces_the_single_filter() {
    let env = Highway::new(HighwayConfig::default()).unwrap();
    let model = small_model(&env);
    let members = [model.clone()];
    let mut safe_steps = 0;
    for seed in 0..50 {
        let single = run_episode_seeded(&env, &Policy::Calibrated { model: &model, alpha: 0.1 }, 120, seed).unwrap();
        for strategy in [Strategy::Single, Strategy::Multiple] {
            let ens = Policy::Ensemble {
                models: &members,
                alpha: 0.1,
                strategy,
            };
            let other = run_episode_seeded(&env, &ens, 120, seed).unwrap();
            assert_eq!(single.trajectory, other.trajectory, "seed {seed} {strategy:?}");
            assert_eq!(single.trace, other.trace, "seed {seed} {strategy:?}");
            assert_eq!(single.outcome, other.outcome);
        }
        safe_steps += single
            .trace
            .steps
            .iter()
            .filter(|s| s.controller == Controller::Safe)
            .count();
    }
    // both branches of the switch must have been exercised
    assert!(safe_steps > 0);
}

#[test]
fn infinite_quantile_hands_every_step_to_the_safe_policy() {
    let env = Highway::new(HighwayConfig::default()).unwrap();
    let model = small_model(&env);
    // alpha small enough that rank exceeds n
    let strict = CalibratedModel::new(model.value.clone(), model.scores().to_vec(), &[1e-4]).unwrap();
    let ep = run_episode_seeded(&env, &Policy::Calibrated { model: &strict, alpha: 1e-4 }, 50, 4).unwrap();
    assert!(!ep.trace.is_empty());
    assert_eq!(ep.trace.safe_fraction(), 1.0);
}
