use super::*;
use crate::losses::build_neighbor_index;
use crate::model::NoisePredictor;
use crate::oracle::OracleDenoiser;

fn small(horizon: usize, steps: usize, lr: f64, method: Method) -> TrainConfig {
    TrainConfig {
        horizon,
        steps,
        learning_rate: lr,
        seed: 5,
        loss: LossSpec {
            k: 2,
            batch_remain: 8,
            batch_forget: 8,
            ..LossSpec::default().with_method(method)
        },
        hidden: vec![16, 16],
        time_dim: 8,
        checkpoint_every: 0,
        eval_every: 0,
    }
}

fn split() -> SplitDataset<f64> {
    SplitDataset::new(
        Tensor2::from_rows(&[[0.5, 0.0], [-0.5, 0.1], [0.0, 0.6], [0.2, -0.4]]).unwrap(),
        Tensor2::from_rows(&[[0.7, 0.7]]).unwrap(),
    )
    .unwrap()
}

#[test]
fn pretraining_two_points_approaches_the_oracle() {
    let s = NoiseSchedule::linear(20).unwrap();
    let points = Tensor2::from_rows(&[[-1.0], [1.0]]).unwrap();
    let mut config = small(20, 2000, 3e-3, Method::Vanilla);
    config.hidden = vec![32, 32];
    config.loss.batch_remain = 32;
    let (model, record) = pretrain(&config, &s, &points, None).unwrap();
    assert_eq!(record.len(), 2000);
    let oracle = OracleDenoiser::new(points.clone(), s.clone()).unwrap();
    // Test grid: x_t = γ_t a for both points and every t.
    let mut sq = Vec::new();
    for t in 1..=20 {
        for a in [-1.0, 1.0] {
            let x = [s.gamma(t) * a];
            let diff = model.predict(&x, t).unwrap()[0] - oracle.predict(&x, t).unwrap()[0];
            sq.push(diff * diff);
        }
    }
    let rms = crate::stats::mean(&sq).sqrt();
    assert!(rms < 0.1, "rms {rms}");
}

#[test]
fn pretraining_loss_trends_down() {
    let s = NoiseSchedule::linear(20).unwrap();
    let data = split();
    let (_, record) = pretrain(&small(20, 600, 3e-3, Method::Vanilla), &s, &data.full(), None).unwrap();
    let losses = record.losses();
    let head = crate::stats::mean(&losses[..100]);
    let tail = crate::stats::mean(&losses[500..]);
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn runs_are_deterministic() {
    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let config = small(10, 30, 1e-3, Method::Vanilla);
    let (a, ra) = pretrain(&config, &s, &data.full(), None).unwrap();
    let (b, rb) = pretrain(&config, &s, &data.full(), None).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.losses(), rb.losses());

    let index = build_neighbor_index(&data, 2).unwrap();
    let unl = small(10, 20, 1e-3, Method::ReTrack);
    let (mut m1, mut m2) = (a.clone(), a);
    let r1 = unlearn(&unl, &mut m1, &s, &data, Some(&index), None).unwrap();
    let r2 = unlearn(&unl, &mut m2, &s, &data, Some(&index), None).unwrap();
    assert_eq!(m1.params(), m2.params());
    assert_eq!(r1.steps, r2.steps);
    assert_eq!(r1.lambda, Some(0.5));
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let index = build_neighbor_index(&data, 2).unwrap();
    let model = Denoiser::new(small(10, 0, 1e-3, Method::ReTrack).denoiser_config(2), 3).unwrap();
    for method in Method::ALL {
        let mut m = model.clone();
        let record = unlearn(&small(10, 0, 1e-3, method), &mut m, &s, &data, Some(&index), None).unwrap();
        assert!(record.is_empty());
        assert_eq!(m.params(), model.params());
    }
}

#[test]
fn retrack_at_lambda_zero_is_vanilla_fine_tuning() {
    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let index = build_neighbor_index(&data, 2).unwrap();
    let model = Denoiser::new(small(10, 0, 1e-3, Method::Vanilla).denoiser_config(2), 4).unwrap();
    let mut retrack = small(10, 25, 1e-3, Method::ReTrack);
    retrack.loss.lambda_retrack = 0.0;
    let vanilla = small(10, 25, 1e-3, Method::Vanilla);
    let (mut a, mut b) = (model.clone(), model);
    let ra = unlearn(&retrack, &mut a, &s, &data, Some(&index), None).unwrap();
    let rb = unlearn(&vanilla, &mut b, &s, &data, None, None).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.losses(), rb.losses());
}

#[test]
fn unlearn_validates_its_inputs() {
    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let mut model = Denoiser::new(small(10, 0, 1e-3, Method::Vanilla).denoiser_config(2), 4).unwrap();
    let config = small(10, 5, 1e-3, Method::ReTrack);
    assert!(unlearn(&config, &mut model, &s, &data, None, None).is_err());
    let wrong_k = build_neighbor_index(&data, 3).unwrap();
    assert!(unlearn(&config, &mut model, &s, &data, Some(&wrong_k), None).is_err());
    let mut too_big = config.clone();
    too_big.loss.k = 5;
    assert!(unlearn(&too_big, &mut model, &s, &data, None, None).is_err());
    let mut bad_cadence = config.clone();
    bad_cadence.eval_every = 3;
    assert!(bad_cadence.validate(Some(4)).is_err());
    let mut bad_lr = config;
    bad_lr.learning_rate = 0.0;
    assert!(bad_lr.validate(Some(4)).is_err());
    assert!(pretrain(&small(10, 5, 1e-3, Method::NegGrad), &s, &data.full(), None).is_err());
}

#[test]
fn hooks_fire_on_cadence() {
    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let mut config = small(10, 12, 1e-3, Method::Vanilla);
    config.checkpoint_every = 4;
    config.eval_every = 6;
    let mut seen = Vec::new();
    let mut hook = |kind: HookKind, n: usize, _: &Denoiser<f64>| {
        seen.push((kind, n));
        Ok((kind == HookKind::Checkpoint).then(|| format!("ckpt_{n}")))
    };
    let (_, record) = pretrain(&config, &s, &data.full(), Some(&mut hook)).unwrap();
    assert_eq!(record.checkpoints, vec!["ckpt_4", "ckpt_8", "ckpt_12"]);
    assert_eq!(
        seen,
        vec![
            (HookKind::Checkpoint, 4),
            (HookKind::Evaluate, 6),
            (HookKind::Checkpoint, 8),
            (HookKind::Checkpoint, 12),
            (HookKind::Evaluate, 12),
        ]
    );
}

#[test]
fn negative_gradient_ascent_is_caught_by_the_divergence_guard() {
    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let mut model = Denoiser::new(small(10, 0, 1e-3, Method::Vanilla).denoiser_config(2), 6).unwrap();
    let config = small(10, 2000, 0.05, Method::NegGrad);
    match unlearn(&config, &mut model, &s, &data, None, None) {
        Err(Error::Diverged { run, .. }) => assert_eq!(run, DIVERGENCE_PATIENCE),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.losses().last().copied())),
    }
}

#[test]
fn balance_examples() {
    assert_eq!(lambda_from_magnitudes(1.0, 1.0).unwrap(), 0.5);
    assert_eq!(lambda_from_magnitudes(3.0, 1.0).unwrap(), 0.25);
    assert_eq!(lambda_from_magnitudes(0.0, 2.0).unwrap(), 1.0);
    assert!(lambda_from_magnitudes(0.0, 0.0).is_err());
    assert!(lambda_from_magnitudes(-1.0, 2.0).is_err());

    let s = NoiseSchedule::linear(10).unwrap();
    let data = split();
    let index = build_neighbor_index(&data, 2).unwrap();
    let model = Denoiser::new(small(10, 0, 1e-3, Method::Vanilla).denoiser_config(2), 7).unwrap();
    let spec = small(10, 0, 1e-3, Method::ReTrack).loss;
    let mut rng = RngStream::new(8, BALANCE_STREAM);
    let b = balance_lambda(&model, &s, &data, Some(&index), &mut rng, &spec, 20).unwrap();
    assert!((b.lambda * b.unlearn_mean - (1.0 - b.lambda) * b.vanilla_mean).abs() < 1e-9);
    assert!(b.lambda > 0.0 && b.lambda < 1.0);
    assert!(balance_lambda(&model, &s, &data, None, &mut rng, &spec, 0).is_err());
}

#[test]
fn run_record_csv_and_header() {
    let record = RunRecord {
        config_hash: "abc".into(),
        method: Method::ReTrack,
        lambda: Some(0.5),
        steps: vec![
            StepRecord { step: 0, loss_total: 1.5, loss_unlearn: Some(2.0), loss_vanilla: Some(1.0), grad_norm: 0.25 },
            StepRecord { step: 1, loss_total: 1.0, loss_unlearn: None, loss_vanilla: None, grad_norm: 0.5 },
        ],
        wall_clock_secs: 0.0,
        checkpoints: vec![],
    };
    let mut buf = Vec::new();
    record.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "config_hash,step,loss_total,loss_unlearn,loss_vanilla,grad_norm\nabc,0,1.5,2,1,0.25\nabc,1,1,,,0.5\n"
    );
    let header: serde_json::Value = serde_json::from_str(&record.header_json(&"cfg").unwrap()).unwrap();
    assert_eq!(header["config"], "cfg");
    assert_eq!(header["method"], "retrack");
    assert_eq!(header["steps"], 2);
}

#[test]
fn config_hash_is_canonical() {
    let config = TrainConfig::unlearn_default(1);
    let json = serde_json::to_string(&config).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back.hash(), config.hash());
    assert_eq!(config.hash().len(), 64);
    assert_ne!(TrainConfig::unlearn_default(2).hash(), config.hash());
    // Key order does not matter.
    let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
    let b: serde_json::Value = serde_json::from_str(r#"{"a":[1,2],"b":1}"#).unwrap();
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_eq!(
        config_hash(&serde_json::json!({})),
        "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
    );
    let unknown = json.replacen('{', r#"{"extra":1,"#, 1);
    assert!(serde_json::from_str::<TrainConfig>(&unknown).is_err());
}

#[test]
fn f32_training_runs() {
    let s = NoiseSchedule::<f32>::linear(10).unwrap();
    let points = Tensor2::<f32>::from_rows(&[[0.5f32, 0.0], [-0.5, 0.0]]).unwrap();
    let (model, record) = pretrain(&small(10, 50, 1e-3, Method::Vanilla), &s, &points, None).unwrap();
    assert!(record.losses().iter().all(|l| l.is_finite()));
    assert!(model.predict(&[0.1f32, 0.2], 3).unwrap().iter().all(|v| v.is_finite()));
}

