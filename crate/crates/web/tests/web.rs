use code_web::{palette, synth_sample_json, word_masks_json, Segmenter};

#[test]
fn synthetic_sample_is_consistent() {
    let v: serde_json::Value = serde_json::from_str(&synth_sample_json(7, 32).unwrap()).unwrap();
    assert_eq!(v["rgba"].as_array().unwrap().len(), 32 * 32 * 4);
    let labels = v["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 32 * 32);
    assert!(labels.iter().all(|l| l.as_u64().unwrap() <= 3));
    assert!(!v["objects"].as_array().unwrap().is_empty());
    assert_eq!(synth_sample_json(7, 32).unwrap(), synth_sample_json(7, 32).unwrap());
    assert!(synth_sample_json(7, 8).is_err());
}

#[test]
fn word_masks_form_a_simplex() {
    let v: serde_json::Value = serde_json::from_str(&word_masks_json("[[4, 0, -3], [1, 2, -3]]").unwrap()).unwrap();
    let masks = v["masks"].as_array().unwrap();
    let residual = v["residual"].as_array().unwrap();
    for i in 0..3 {
        let s: f64 = masks.iter().map(|m| m[i].as_f64().unwrap()).sum::<f64>() + residual[i].as_f64().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(v["labels"], serde_json::json!([1, 2, 0]));
    assert!(word_masks_json("[[1, 2], [3]]").is_err());
    assert!(word_masks_json("not json").is_err());
}

#[test]
fn palette_has_256_entries() {
    let p: Vec<[u8; 3]> = serde_json::from_str(&palette()).unwrap();
    assert_eq!(p.len(), 256);
}

#[test]
fn segmenter_rejects_garbage_checkpoints() {
    assert!(Segmenter::from_bytes(b"nope").is_err());
}

#[test]
fn segmenter_labels_every_pixel() {
    use code_core::trainer::{save_checkpoint, TrainConfig, TrainState};
    let mut cfg = TrainConfig::desk();
    for kv in ["image_layers=1", "text_layers=1", "width=16", "heads=2"] {
        cfg.apply_override(kv).unwrap();
    }
    let state = TrainState::init(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&cfg, &state, &path).unwrap();
    let seg = Segmenter::from_bytes(&std::fs::read(&path).unwrap()).unwrap();
    let rgba: Vec<u8> = (0..40 * 24 * 4).map(|i| (i % 251) as u8).collect();
    let labels = seg.run(&rgba, 40, 24, "circle,square", 0.5).unwrap();
    assert_eq!(labels.len(), 40 * 24);
    assert!(labels.iter().all(|&l| l <= 2));
    assert!(seg.run(&rgba[..10], 40, 24, "circle", 0.5).is_err());
    assert!(seg.run(&rgba, 40, 24, "", 0.5).is_err());
}
