use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
backbone_channels = [4, 8, 8, 16]
adjusted_channels = 16
template_size = 32
search_size = 64
template_corr_cells = 4

[sampler]
template_size = 32
search_size = 64
base_distance = 5

[train]
epochs = 2
steps_per_epoch = 3
batch_size = 2
val_frames = 20

[tracker]
update_interval = 10

[data]
train_videos = 2
val_videos = 1
frames = 25
width = 96
height = 80

[online]
duration = 5.0

[offline]
warmup = 2
count = 5
"#;

fn fear(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fear"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fear");
    out
}

fn ok(args: &[&str]) -> String {
    let out = fear(args);
    assert!(
        out.status.success(),
        "fear {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_train_track_eval_bench_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = cfg.to_string_lossy().into_owned();

    ok(&["synth", "--config", &cfg, "--seed", "4", "--out", &p("data")]);
    assert!(root.join("data/train/video_001/00024.png").exists());
    assert!(root.join("data/val/video_000/groundtruth.txt").exists());
    let m = json(&root.join("data/manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);

    ok(&["train", "--config", &cfg, "--seed", "4", "--data", &p("data"), "--out", &p("train")]);
    for f in ["best.safetensors", "last.safetensors", "metrics.csv", "train_summary.json", "manifest.json"] {
        assert!(root.join("train").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(root.join("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = p("train/best.safetensors");
    ok(&["track", "--config", &cfg, "--checkpoint", &ckpt, "--data", &p("data/val"), "--out", &p("track")]);
    let results = std::fs::read_to_string(root.join("track/video_000.txt")).unwrap();
    assert_eq!(results.lines().count(), 25);
    let summary = json(&root.join("track/track_summary.json"));
    assert_eq!(summary[0]["template_updates"], 2);

    let stdout = ok(&["eval", "--config", &cfg, "--results", &p("track"), "--data", &p("data/val"), "--out", &p("eval")]);
    let overall: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(overall["frames"], 25);
    let report = json(&root.join("eval/metrics.json"));
    let miou = report["overall"]["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let stdout = ok(&["bench", "--config", &cfg, "--protocol", "offline", "--checkpoint", &ckpt, "--out", &p("bench_model")]);
    let s: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(s["invocations"], 7);
    assert!(s["fps"].as_f64().unwrap() > 0.0);

    ok(&["bench", "--config", &cfg, "--device", "inefficient", "--out", &p("bench")]);
    let s = json(&root.join("bench/summary.json"));
    assert_eq!(s["processed"], 75);
    assert_eq!(s["skipped"], 75);
    assert!(root.join("bench/telemetry.csv").exists());

    let stdout = ok(&["cost", "--config", &cfg, "--out", &p("cost")]);
    let c: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(c, json(&root.join("cost/cost.json")));
}

#[test]
fn commands_are_reproducible_from_config_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    for d in ["a", "b"] {
        let out = tmp.path().join(d).to_string_lossy().into_owned();
        ok(&["synth", "--config", &cfg, "--seed", "9", "--out", &out]);
    }
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("train/video_000/groundtruth.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
    let ma = json(&tmp.path().join("a/manifest.json"));
    let mb = json(&tmp.path().join("b/manifest.json"));
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
}

#[test]
fn online_profile_reports_stream_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let dev = tmp.path().join("dev.toml");
    std::fs::write(
        &dev,
        r#"
[latency]
kind = "constant"
ms = 20.0

[device]
energy_per_inference = 0.02
reference_latency = 0.02
battery_capacity = 40000.0
idle_power = 0.5
heat_rate = 0.02
cool_rate = 0.01
ambient = 30.0
throttle_factor = 1.6

[device.thresholds]
fair = 35.0
serious = 40.0
critical = 48.0
"#,
    )
    .unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[online]\nduration = 60.0\n").unwrap();
    let device = format!("custom:{}", dev.display());
    let out = tmp.path().join("b").to_string_lossy().into_owned();
    let stdout = ok(&["bench", "--config", &cfg.to_string_lossy(), "--device", &device, "--out", &out]);
    let s: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(s["fps"], 30.0);
    assert_eq!(s["processed"], 1800);
    let rows = std::fs::read_to_string(tmp.path().join("b/records.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1801);
}

#[test]
fn offline_default_runs_120_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    let stdout = ok(&["bench", "--protocol", "offline", "--out", &out]);
    let s: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(s["invocations"], 120);
    // constant 8 ms profile on a cool device
    assert!((s["fps"].as_f64().unwrap() - 125.0).abs() < 1e-9);
}

#[test]
fn stride_flag_quarters_head_cost() {
    let head = |stride: &str| {
        let c: serde_json::Value = serde_json::from_str(&ok(&["cost", "--stride", stride])).unwrap();
        c["per_layer"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|l| l["name"].as_str().unwrap().starts_with("heads."))
            .map(|l| l["flops"].as_u64().unwrap())
            .sum::<u64>()
    };
    assert_eq!(head("8"), 4 * head("16"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = -1.0\n").unwrap();
    let out = fear(&["cost", "--config", &bad.to_string_lossy()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));

    std::fs::write(&bad, "[model]\nnot_a_field = 1\n").unwrap();
    assert_eq!(fear(&["cost", "--config", &bad.to_string_lossy()]).status.code(), Some(2));

    assert_eq!(fear(&["bench", "--protocol", "sideways"]).status.code(), Some(2));

    let missing = tmp.path().join("nowhere").to_string_lossy().into_owned();
    let out = fear(&["track", "--checkpoint", &missing, "--data", &missing, "--out", &missing]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_file_mode_resume_and_bad_init_box() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("run.toml"), SMALL).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = p("run.toml");
    ok(&["synth", "--config", &cfg, "--out", &p("data")]);

    // ground truth written as a results file scores perfectly
    let gt = std::fs::read_to_string(root.join("data/val/video_000/groundtruth.txt")).unwrap();
    let as_results: String = gt.lines().map(|l| format!("{l} 1 1\n")).collect();
    std::fs::write(root.join("perfect.txt"), as_results).unwrap();
    let stdout = ok(&["eval", "--results", &p("perfect.txt"), "--data", &p("data/val/video_000"), "--out", &p("e")]);
    let m: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(m["mean_iou"], 1.0);
    assert_eq!(m["success_50"], 1.0);

    let short: String = gt.lines().take(3).map(|l| format!("{l} 1 1\n")).collect();
    std::fs::write(root.join("short.txt"), short).unwrap();
    let out = fear(&["eval", "--results", &p("short.txt"), "--data", &p("data/val/video_000"), "--out", &p("e2")]);
    assert_eq!(out.status.code(), Some(1));

    ok(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("t1")]);
    ok(&["train", "--config", &cfg, "--data", &p("data"), "--resume", &p("t1/last.safetensors"), "--out", &p("t2")]);
    let csv = std::fs::read_to_string(root.join("t2/metrics.csv")).unwrap();
    let epochs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["3", "4"]);

    let out = fear(&[
        "track", "--config", &cfg, "--checkpoint", &p("t1/last.safetensors"), "--data", &p("data/val"),
        "--init-box", "500,500,520,530", "--out", &p("tr"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = fear(&["cost", "--config", &path.to_string_lossy()]);
        assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
    }
}
