use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "steps=6",
    "--set", "warmup_steps=2",
    "--set", "synthetic_n=12",
    "--set", "batch_size=4",
    "--set", "image_layers=1",
    "--set", "text_layers=1",
    "--set", "segmenter_layers=1",
    "--set", "width=16",
    "--set", "heads=2",
];

fn code(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_code"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = code(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train_tiny(dir: &Path) {
    let mut args = vec!["train", "--out", "run", "--log-every", "0"];
    args.extend_from_slice(TINY);
    ok(&args, dir);
}

#[test]
fn synth_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data", "--n", "5", "--seed", "11"], dir.path());
    let manifest = fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for l in &lines {
        assert!(dir.path().join("data").join(l["image"].as_str().unwrap()).exists());
        assert!(dir.path().join("data").join(l["labels"].as_str().unwrap()).exists());
    }
    let classes = fs::read_to_string(dir.path().join("data/classes.txt")).unwrap();
    assert_eq!(classes.lines().next(), Some("background"));

    // Same seed, same bytes.
    ok(&["synth", "--out", "again", "--n", "5", "--seed", "11"], dir.path());
    assert_eq!(manifest, fs::read_to_string(dir.path().join("again/manifest.jsonl")).unwrap());
}

#[test]
fn train_eval_segment_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "data", "--n", "4", "--seed", "2"], d);
    train_tiny(d);

    let metrics = fs::read_to_string(d.join("run/metrics.ndjson")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 6 * 7);
    assert_eq!(records.last().unwrap()["step"], 6);
    for name in ["lr", "loss_total", "loss_kg", "loss_seg_v", "loss_seg_t", "loss_hcl", "grad_norm"] {
        assert!(records.iter().any(|r| r["name"] == name), "{name}");
    }
    assert!(d.join("run/final.ckpt").exists());

    let report = ok(
        &[
            "eval", "--checkpoint", "run/final.ckpt", "--manifest", "data/manifest.jsonl",
            "--classes", "data/classes.txt", "--out", "report.json",
        ],
        d,
    );
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    let miou = json["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    for k in ["background", "circle", "square", "triangle"] {
        assert!(json["per_class_iou"].get(k).is_some(), "{k}");
    }
    // Six decimals on every number.
    let raw = fs::read_to_string(d.join("report.json")).unwrap();
    let line = raw.lines().find(|l| l.contains("\"miou\"")).unwrap();
    let digits = line.trim().trim_end_matches(',').rsplit('.').next().unwrap();
    assert_eq!(digits.len(), 6, "{line}");

    let image = fs::read_dir(d.join("data/images")).unwrap().next().unwrap().unwrap().path();
    ok(
        &[
            "segment", "--checkpoint", "run/final.ckpt", "--image", image.to_str().unwrap(),
            "--classes", "circle,square,triangle", "--out", "mask.png",
        ],
        d,
    );
    let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(d.join("mask.png")).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let info = reader.info().clone();
    assert_eq!(info.color_type, png::ColorType::Indexed);
    assert_eq!(info.bit_depth, png::BitDepth::Eight);
    assert_eq!((info.width, info.height), (32, 32));
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    reader.next_frame(&mut buf).unwrap();
    assert!(buf[..32 * 32].iter().all(|&v| v <= 3));

    ok(&["export-prompt", "--checkpoint", "run/final.ckpt", "--out", "prompt.png"], d);
    assert!(d.join("prompt.png").exists());
}

#[test]
fn resume_appends_to_the_metric_stream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_tiny(d);
    ok(
        &["train", "--resume", "run/final.ckpt", "--set", "steps=9", "--out", "run", "--log-every", "0"],
        d,
    );
    let metrics = fs::read_to_string(d.join("run/metrics.ndjson")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps.len(), 9 * 7);
    assert_eq!(*steps.last().unwrap(), 9);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("cfg.toml"),
        "profile = \"desk\"\nsteps = 3\nwarmup_steps = 1\nsynthetic_n = 8\nbatch_size = 2\nimage_layers = 1\ntext_layers = 1\n",
    )
    .unwrap();
    ok(&["train", "--config", "cfg.toml", "--set", "steps=2", "--out", "r", "--log-every", "0"], d);
    let n = fs::read_to_string(d.join("r/metrics.ndjson")).unwrap().lines().count();
    assert_eq!(n, 2 * 7);
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = code(&["train", "--set", "nonsense=1"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = code(&["train", "--set", "warmup_steps=5000"], d);
    assert!(!out.status.success());

    fs::write(d.join("junk.ckpt"), b"not a checkpoint at all, clearly too short?").unwrap();
    let out = code(&["export-prompt", "--checkpoint", "junk.ckpt", "--out", "p.png"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    let out = code(&["eval", "--checkpoint", "missing.ckpt", "--manifest", "m", "--classes", "c"], d);
    assert!(!out.status.success());
}
