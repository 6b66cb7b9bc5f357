//! Encoder transfer contracts: prefix-filtered loading, cross-model
//! activation equality, and loud shape mismatches.

mod util;

use bapm_core::io::{load_checkpoint, save_checkpoint};
use bapm_core::model::{Model, ModelConfig, PretextTasks};
use bapm_core::tensor::Tape;
use util::uniform;

#[test]
fn prefix_load_selects_encoder_tensor_count() {
    let model = Model::init_pretext(ModelConfig::default(), PretextTasks::Both, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pretext.ckpt");
    save_checkpoint(&model.params.to_named_tensors(), &[], &path).unwrap();

    let (enc, _) = load_checkpoint(&path, Some("encoder.")).unwrap();
    let expected = model
        .params
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("encoder."))
        .count();
    assert_eq!(enc.len(), expected);
    assert!(enc
        .entries()
        .iter()
        .all(|e| !e.name.starts_with("decoder_")));
}

/// Loading the pretext encoder into the downstream model must reproduce the
/// pretext model's encoder activations bitwise on a fixed input.
#[test]
fn transferred_encoder_reproduces_activations_bitwise() {
    let cfg = ModelConfig::default();
    let pretext = Model::init_pretext(cfg, PretextTasks::Both, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pretext.ckpt");
    save_checkpoint(&pretext.params.to_named_tensors(), &[], &path).unwrap();

    // downstream starts from different random init, then receives the encoder
    let mut downstream = Model::init_downstream(cfg, 9999).unwrap();
    let (enc, _) = load_checkpoint(&path, Some("encoder.")).unwrap();
    let applied = downstream.params.apply_named(&enc, true).unwrap();
    assert_eq!(applied, enc.len());
    for e in downstream.params.entries() {
        if e.name.starts_with("encoder.") {
            assert!(e.frozen, "{} should be frozen after transfer", e.name);
        } else {
            assert!(!e.frozen, "{} should stay trainable", e.name);
        }
    }

    let mut r = util::rng(77);
    let input = uniform(&mut r, 32 * 32 * 32, 0.0, 1.0);

    let run = |model: &Model| -> Vec<f32> {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape
            .leaf(input.clone(), &[1, 1, 32, 32, 32], false)
            .unwrap();
        let enc = model.encoder_forward(&mut tape, &b, x).unwrap();
        tape.data(enc).to_vec()
    };
    assert_eq!(run(&pretext), run(&downstream));
}

#[test]
fn width_mismatch_reports_expected_and_found_shapes() {
    let small = Model::init_pretext(ModelConfig::default(), PretextTasks::Both, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.ckpt");
    save_checkpoint(&small.params.to_named_tensors(), &[], &path).unwrap();

    let wide_cfg = ModelConfig {
        width_factor: 0.25,
        ..Default::default()
    };
    let mut wide = Model::init_downstream(wide_cfg, 2).unwrap();
    let (enc, _) = load_checkpoint(&path, Some("encoder.")).unwrap();
    let err = wide.params.apply_named(&enc, true).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("shape mismatch") && msg.contains("expected") && msg.contains("found"),
        "{msg}"
    );
}

#[test]
fn missing_entry_fails_loudly() {
    let model = Model::init_pretext(ModelConfig::default(), PretextTasks::Both, 1).unwrap();
    let mut extra = bapm_core::io::NamedTensors::new();
    extra
        .push("encoder.block99.conv.weight", vec![1], vec![0.0])
        .unwrap();
    let mut target = model.clone();
    let err = target.params.apply_named(&extra, false).unwrap_err();
    assert!(err.to_string().contains("encoder.block99.conv.weight"));
}

/// Checkpoint metadata rides along unchanged.
#[test]
fn metadata_roundtrip() {
    let model = Model::init_pretext(ModelConfig::default(), PretextTasks::RecOnly, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = vec![
        ("config_hash".to_string(), "abc123".to_string()),
        ("seed".to_string(), "4".to_string()),
        ("epoch".to_string(), "30".to_string()),
    ];
    save_checkpoint(&model.params.to_named_tensors(), &meta, &path).unwrap();
    let (_, got) = load_checkpoint(&path, None).unwrap();
    assert_eq!(got, meta);
}
