mod common;

use advblur::train::{build_model, load_checkpoint, save_checkpoint, train, TrainConfig};
use advblur::Error;
use common::*;
use ndarray::Array4;

#[test]
fn training_descends_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = forged(dir.path(), &tiny_synth(dir.path(), 100, 1));
    let s = splits(&m);
    let cfg = tiny_config(5);
    let log = dir.path().join("run/history.jsonl");
    let (_, h1) = train(&cfg, &s, 3, Some(&log)).unwrap();
    let (_, h2) = train(&cfg, &s, 3, None).unwrap();
    assert_eq!(h1.epochs.len(), 5);
    let first = h1.epochs.first().unwrap().train_loss;
    let last = h1.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    for (a, b) in h1.train_losses().iter().zip(h2.train_losses()) {
        assert!((a - b).abs() <= 1e-6);
    }
    for e in &h1.epochs {
        assert!(e.train_loss.is_finite());
        assert!(e.bi_batches >= 1 && e.bi_mean.is_some());
    }
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 5);
    let first_line: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first_line["val_accuracy"].is_number());
}

#[test]
fn baseline_rejects_blurred_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = forged(dir.path(), &tiny_synth(dir.path(), 50, 2));
    let cfg = TrainConfig { blur: None, ..tiny_config(1) };
    match train(&cfg, &splits(&m), 0, None) {
        Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "blur"),
        other => panic!("expected precondition error, got {:?}", other.err()),
    }
}

#[test]
fn blur_training_requires_blurred_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_synth(dir.path(), 50, 2);
    assert!(matches!(train(&tiny_config(1), &splits(&m), 0, None), Err(Error::InvalidConfig { .. })));
}

#[test]
fn empty_validation_set_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = forged(dir.path(), &tiny_synth(dir.path(), 50, 2));
    let mut s = splits(&m);
    s.val.clear();
    assert!(matches!(train(&tiny_config(1), &s, 0, None), Err(Error::Training(_))));
}

#[test]
fn checkpoint_round_trip_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1);
    let mut bundle = build_model(&cfg, 5).unwrap();
    let probe = Array4::from_shape_fn((2, 3, 16, 16), |(i, c, y, x)| ((i + c * 3 + y * x) % 5) as f32 / 5.0);
    let before = bundle.logits(probe.clone());
    let path = dir.path().join("model.safetensors");
    save_checkpoint(&mut bundle, &path).unwrap();

    let mut loaded = load_checkpoint(&path, Some(&cfg.hash()), false).unwrap();
    assert_eq!(loaded.meta, bundle.meta);
    assert_eq!(loaded.logits(probe), before);
    let mut a = bundle.network.state();
    let mut b = loaded.network.state();
    a.sort_by(|x, y| x.0.cmp(&y.0));
    b.sort_by(|x, y| x.0.cmp(&y.0));
    assert_eq!(a, b);

    assert!(matches!(load_checkpoint(&path, Some("deadbeef"), false), Err(Error::HashMismatch { .. })));
    assert!(load_checkpoint(&path, Some("deadbeef"), true).is_ok());

    let bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("truncated.safetensors");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&truncated, None, false), Err(Error::Checkpoint { .. })));
}
