use hjcp::store::{
    read_envelope, CalibrationArtifact, F64Block, ModelArtifact, Store, StoreError, MODEL_FORMAT,
};
use hjcp_core::conformal::CalibratedModel;
use hjcp_core::filter::{run_episode_seeded, Policy};
use hjcp_core::highway::Highway;
use hjcp_core::mlp::Mlp;
use hjcp_core::rng;
use hjcp_core::value::Constant;
use hjcp_core::{Environment, ValueFunction};
use rand::Rng;

fn sample_net(seed: u64) -> Mlp {
    let hw = Highway::default();
    let (c, s) = hw.state_scale();
    Mlp::random(&[10, 16, 16, 1], c, s, &mut rng::seeded(seed)).unwrap()
}

fn model_artifact(net: &Mlp) -> ModelArtifact {
    ModelArtifact::new(
        "highway",
        0,
        7,
        0.95,
        net,
        &[(0, 1.5), (100, 0.25)],
        serde_json::json!({"gamma": 0.95}),
    )
}

#[test]
fn model_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let net = sample_net(1);
    let hash = store.save_model(&model_artifact(&net)).unwrap();
    let back = store.load_model(&hash).unwrap().network().unwrap();
    let hw = Highway::default();
    let mut r = rng::seeded(2);
    for _ in 0..100 {
        let x = hw.sample_initial(&mut r);
        assert_eq!(net.value(&x).to_bits(), back.value(&x).to_bits());
    }
    assert_eq!(back, net);
}

#[test]
fn saving_twice_gives_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let a = store.save_model(&model_artifact(&sample_net(1))).unwrap();
    let b = store.save_model(&model_artifact(&sample_net(1))).unwrap();
    let c = store.save_model(&model_artifact(&sample_net(2))).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn rewrite(path: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn future_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let hash = store.save_model(&model_artifact(&sample_net(1))).unwrap();
    rewrite(&store.model_path(&hash), |v| v["version"] = 99.into());
    match store.load_model(&hash) {
        Err(StoreError::UnsupportedVersion { found: 99, .. }) => {}
        other => panic!("expected unsupported version, got {other:?}"),
    }
}

#[test]
fn tampered_body_fails_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let hash = store.save_model(&model_artifact(&sample_net(1))).unwrap();
    let path = store.model_path(&hash);
    rewrite(&path, |v| v["body"]["gamma"] = 0.5.into());
    assert!(matches!(store.load_model(&hash), Err(StoreError::Integrity { .. })));
    // a consistent envelope renamed to the wrong hash is also caught
    let other = store.save_model(&model_artifact(&sample_net(3))).unwrap();
    std::fs::copy(store.model_path(&other), &path).unwrap();
    assert!(matches!(store.load_model(&hash), Err(StoreError::Integrity { .. })));
}

#[test]
fn wrong_kind_and_garbage_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    store.write_report("r", &serde_json::json!({"a": 1})).unwrap();
    let err = read_envelope::<serde_json::Value>(&store.report_path("r"), MODEL_FORMAT).unwrap_err();
    assert!(matches!(err, StoreError::WrongKind { .. }));
    std::fs::write(store.report_path("r"), b"not json").unwrap();
    assert!(matches!(
        store.read_report::<serde_json::Value>("r"),
        Err(StoreError::Format { .. })
    ));
    assert!(matches!(
        store.read_report::<serde_json::Value>("absent"),
        Err(StoreError::Missing(_))
    ));
}

#[test]
fn calibration_round_trip_preserves_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let n = 10_000;
    let mut r = rng::seeded(4);
    let v_theta: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let v_star: Vec<f64> = v_theta.iter().map(|v| v - r.gen_range(-0.5..0.5)).collect();
    let states: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let alphas = vec![0.02, 0.06, 0.1];
    let scores: Vec<f64> = v_theta.iter().zip(&v_star).map(|(a, b)| (a - b).max(0.0)).collect();
    let before = CalibratedModel::new(Constant(0.0), scores, &alphas).unwrap();
    let art = CalibrationArtifact {
        system: "toy".into(),
        member: 0,
        model_hash: "none".into(),
        gamma: 0.9,
        horizon: 10,
        seed: 1,
        n,
        state_dim: 1,
        states: F64Block::encode(&states),
        v_theta: F64Block::encode(&v_theta),
        v_star: F64Block::encode(&v_star),
        alphas: alphas.clone(),
        quantiles: F64Block::encode(&before.quantiles().iter().map(|q| q.1).collect::<Vec<_>>()),
    };
    let hash = store.save_calibration(&art).unwrap();
    let loaded = store.load_calibration(&hash).unwrap();
    assert_eq!(loaded, art);
    let after = loaded.calibrated(Constant(0.0)).unwrap();
    assert_eq!(
        after.quantile(0.06).unwrap().to_bits(),
        before.quantile(0.06).unwrap().to_bits()
    );
    assert_eq!(after.n(), n);
}

#[test]
fn trace_has_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let hw = Highway::default();
    let ep = run_episode_seeded::<_, Constant>(&hw, &Policy::Nominal, 200, 3).unwrap();
    store.write_trace("ep3", &ep.trace).unwrap();
    let text = std::fs::read_to_string(store.trace_path("ep3")).unwrap();
    assert_eq!(text.lines().count(), ep.trace.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["controller"], "nominal");
    assert_eq!(first["state"].as_array().unwrap().len(), 10);
}

#[test]
fn csv_tables_have_headers() {
    #[derive(serde::Serialize)]
    struct Row {
        policy: &'static str,
        rate: f64,
    }
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    store
        .write_table("t", &[Row { policy: "nominal", rate: 0.5 }, Row { policy: "member1", rate: 0.25 }])
        .unwrap();
    let text = std::fs::read_to_string(store.table_path("t")).unwrap();
    assert_eq!(text, "policy,rate\nnominal,0.5\nmember1,0.25\n");
}

#[test]
fn reports_with_arbitrary_floats_pass_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let mut r = rng::seeded(8);
    let mut values: Vec<f64> = (0..2000).map(|_| r.gen_range(-10.0..10.0)).collect();
    values.extend([0.1 + 0.2, 1e-300, 5e-324, f64::MAX, 2.0 / 3.0]);
    let hash = store.write_report("floats", &values).unwrap();
    let back: Vec<f64> = store.read_report("floats").unwrap();
    assert_eq!(back, values);
    let (_, again) = read_envelope::<serde_json::Value>(&store.report_path("floats"), hjcp::store::REPORT_FORMAT).unwrap();
    assert_eq!(again, hash);
}
