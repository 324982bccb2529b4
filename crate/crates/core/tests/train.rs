mod common;

use std::ops::ControlFlow;

use apsense_core::model::TrainMode;
use apsense_core::train::*;
use apsense_core::Error;
use common::{fc_only_freezes_backbone, toy_fit, toy_model, toy_samples};

#[test]
fn toy_fit_converges() {
    let logs = toy_fit(0.95);
    assert!(logs.len() >= 10 && logs.len() <= 50);
    for w in logs[..10].windows(2) {
        assert!(w[1].train_loss < w[0].train_loss, "{} then {}", w[0].train_loss, w[1].train_loss);
    }
    assert!(logs.last().unwrap().val_acc.unwrap() >= 0.95);
}

#[test]
fn fc_only_leaves_backbone_untouched() {
    assert!(fc_only_freezes_backbone());
}

#[test]
fn training_is_seed_deterministic() {
    let data = toy_samples(16, 32, 4);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = toy_model(5, 32);
        let logs = train(&mut m, &data, &[], &cfg, |_| ControlFlow::Continue(())).unwrap();
        (m.named_params(), logs)
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_is_reported() {
    let data = toy_samples(8, 32, 6);
    let mut m = toy_model(5, 32);
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e300,
        momentum: 0.99,
        ..TrainConfig::default()
    };
    let err = train(&mut m, &data, &[], &cfg, |_| ControlFlow::Continue(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let model = toy_model(9, 32);
    save_checkpoint(&model, 9, &path).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(meta.seed, 9);
    assert_eq!(meta.widths, vec![8, 16, 32]);
    let x = &toy_samples(1, 32, 0)[0].input;
    assert_eq!(back.logits(x).unwrap(), model.logits(x).unwrap());

    let missing = load_checkpoint(&dir.path().join("nope.safetensors")).unwrap_err();
    assert!(matches!(missing, Error::MissingArtifact { .. }));
    assert!(missing.to_string().contains("train"));
}

#[test]
fn evaluation_and_log_output() {
    let data = toy_samples(10, 32, 3);
    let m = toy_model(1, 32);
    let metrics = evaluate(&m, &data).unwrap();
    assert_eq!(metrics.tp + metrics.fp + metrics.tn + metrics.fn_, 10);
    let (loss, acc) = loss_and_accuracy(&m, &data).unwrap();
    assert!(loss > 0.0 && (0.0..=1.0).contains(&acc));
    assert!((acc - metrics.accuracy).abs() < 1e-15);
    let logs = vec![
        EpochLog { epoch: 1, train_loss: 0.5, val_loss: None, val_acc: None },
        EpochLog { epoch: 2, train_loss: 0.25, val_loss: Some(0.3), val_acc: Some(0.75) },
    ];
    let mut buf = Vec::new();
    write_training_log(&mut buf, &logs).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss,val_acc\n1,0.5,,\n2,0.25,0.3,0.75\n");
    assert!(TrainMode::FcOnly.is_trainable("fc.weight") && !TrainMode::FcOnly.is_trainable("abm.point.conv_a.weight"));
}
