use super::*;
use crate::synth::{generate_corpus, SceneOptions};
use tempfile::tempdir;

fn corpus(n: usize) -> Vec<Scene> {
    let geo = GeometryConfig::default_surround();
    generate_corpus(11, n, &SceneOptions::with_boxes(6), &geo.rig().unwrap(), &geo.grid().unwrap()).unwrap()
}

fn quick(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 3,
        n_encoders: 2,
        eval_every: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn config_is_echoed_verbatim() {
    let cfg = TrainConfig {
        learning_rate: 0.02,
        seed: 9,
        ..quick(Method::Lss)
    };
    let out = train(&cfg, &corpus(3)).unwrap();
    assert_eq!(out.report.config, cfg);
    let json: serde_json::Value = serde_json::from_str(&out.report.to_json()).unwrap();
    let echoed: TrainConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(out.checkpoint.config, cfg);
}

#[test]
fn config_json_accepts_partial_documents() {
    let cfg = TrainConfig::from_json(r#"{"method": "bev-only", "epochs": 7}"#).unwrap();
    assert_eq!(cfg.method, Method::BevOnly);
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.learning_rate, 1e-2);
    assert!(TrainConfig::from_json(r#"{"epoch": 7}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"n_encoders": 0}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"learning_rate": -1}"#).is_err());
    let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn report_shape_and_finiteness() {
    let out = train(&quick(Method::Dva), &corpus(5)).unwrap();
    let r = &out.report;
    assert_eq!((r.train_scenes, r.eval_scenes), (4, 1));
    assert_eq!(r.num_parameters, out.checkpoint.params.num_parameters());
    for (i, e) in r.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert!(e.train_loss.is_finite() && e.train_bev_loss.is_finite());
        let ev = e.eval.unwrap();
        assert!(ev.bev_loss.is_finite() && (0.0..=1.0).contains(&ev.iou));
    }
    assert_eq!(r.final_eval, r.epochs.last().unwrap().eval);
    assert!(r.wall_clock_seconds.is_none());
    out.check().unwrap();
}

#[test]
fn bev_only_has_no_depth_term() {
    let out = train(&quick(Method::BevOnly), &corpus(3)).unwrap();
    for e in &out.report.epochs {
        assert_eq!(e.train_depth_loss, None);
        assert_eq!(e.train_loss, e.train_bev_loss);
    }
}

#[test]
fn training_is_deterministic() {
    let scenes = corpus(4);
    let cfg = quick(Method::Dva);
    let a = train(&cfg, &scenes).unwrap();
    let b = train(&cfg, &scenes).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    // A different seed gives a different model.
    let c = train(&TrainConfig { seed: 1, ..cfg }, &scenes).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let scenes = corpus(5);
    let out = train(&quick(Method::Dva), &scenes).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.dvap");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let (_, eval_scenes) = out.report.config.split(&scenes);
    let ev = evaluate(&loaded, eval_scenes).unwrap();
    let reported = out.report.final_eval.unwrap();
    assert_eq!(ev.bev_loss.to_bits(), reported.bev_loss.to_bits());
    assert_eq!(ev.iou.to_bits(), reported.iou.to_bits());
}

#[test]
fn checkpoint_rejects_damage() {
    let out = train(&TrainConfig { epochs: 1, ..quick(Method::Lss) }, &corpus(2)).unwrap();
    let bytes = out.checkpoint.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptRecord { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes;
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
}

#[test]
fn divergence_aborts_with_a_report() {
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        learning_rate: 1e12,
        epochs: 20,
        ..quick(Method::Lss)
    };
    let out = train(&cfg, &corpus(2)).unwrap();
    let d = out.report.diverged.expect("divergence recorded");
    assert!(!d.loss.is_finite());
    assert_eq!(out.report.epochs.len(), d.epoch);
    assert!(out.report.final_eval.is_none());
    assert!(matches!(out.check(), Err(Error::DivergenceDetected { .. })));
    assert!(out.report.to_json().contains("diverged"));
}

#[test]
fn evaluation_checks_checkpoint_shapes() {
    let out = train(&TrainConfig { epochs: 1, ..quick(Method::Dva) }, &corpus(2)).unwrap();
    assert!(evaluate(&out.checkpoint, &[]).is_err());
    let mut ckpt = out.checkpoint;
    ckpt.config.channels = 6;
    assert!(matches!(evaluate(&ckpt, &corpus(1)), Err(Error::ShapeMismatch { .. })));
}

/// The historical branch reaches the loss only as a constant: analytic
/// gradients equal finite differences taken with the history frozen, and
/// differ from finite differences that let the history move, exactly for
/// the tensors the historical branch reads.
#[test]
fn historical_branch_contributes_no_gradient() {
    let tiny = crate::fixtures::InstanceDims::tiny();
    let (scene, frustum, grid) = crate::gradcheck::tiny_scene(&tiny, 0).unwrap();
    let sample = prepare_sample::<f64>(&scene, &frustum, &grid, tiny.channels).unwrap();
    let dims = ModelDims {
        channels: tiny.channels,
        depth_bins: tiny.bins,
        grid: tiny.grid,
        n_encoders: 2,
    };
    let mut params = ModelParams::<f64>::init(&dims, 5);
    // Move zero biases off the ReLU kinks so finite differences are smooth.
    let mut k = 0u32;
    params.visit_mut(&mut |_, _, data| {
        for v in data.iter_mut() {
            k = k.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            *v += ((k >> 8) as f64 / (1u32 << 24) as f64 - 0.5) * 0.5;
        }
    });
    let setup = TrainConfig::default().setup();
    let history = history_feature(&params, &sample, &setup).unwrap();
    let (_, grads) = loss_and_grad(&params, &sample, &setup, &history).unwrap();
    let analytic = grads.tensors();
    let h = 1e-5;

    let mut moved = Vec::new();
    for (k, t) in params.tensors().iter().enumerate() {
        // A scattered sample of entries keeps the test fast.
        let (mut frozen_err, mut live_gap) = (0f64, 0f64);
        let picks: std::collections::BTreeSet<usize> = (0..24).map(|j| (j * 7919 + 13) % t.data.len()).collect();
        for i in picks {
            let perturbed = |delta: f64| {
                let mut p = params.clone();
                let mut ts = p.tensors();
                ts[k].data[i] += delta;
                p.load_tensors(&ts).unwrap();
                p
            };
            let frozen_at = |h: f64| {
                (loss_only(&perturbed(h), &sample, &setup, &history).unwrap().total
                    - loss_only(&perturbed(-h), &sample, &setup, &history).unwrap().total)
                    / (2.0 * h)
            };
            let frozen = frozen_at(h);
            let (pp, pm) = (perturbed(h), perturbed(-h));
            let live = |p: &ModelParams<f64>| {
                let hist = history_feature(p, &sample, &setup).unwrap();
                loss_only(p, &sample, &setup, &hist).unwrap().total
            };
            let unfrozen = (live(&pp) - live(&pm)) / (2.0 * h);
            let a = analytic[k].data[i];
            let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            // A ReLU kink within `h` of the entry spoils one step but not both.
            frozen_err = frozen_err.max(rel(frozen).min(rel(frozen_at(h / 10.0))));
            live_gap = live_gap.max((unfrozen - frozen).abs());
        }
        assert!(frozen_err < 1e-3, "{}: frozen finite differences disagree ({frozen_err:e})", t.name);
        if live_gap > 0.0 {
            moved.push(t.name.clone());
        }
    }
    // Letting the history move changes the finite differences of exactly the
    // tensors the historical branch reads. It never reads the probe, and it
    // has no history of its own, so the fusion gates stay untouched.
    let untouched = |n: &str| n.starts_with("probe") || n.ends_with("fusion_gate");
    for t in params.tensors() {
        assert_eq!(moved.contains(&t.name), !untouched(&t.name), "{}", t.name);
    }
}

