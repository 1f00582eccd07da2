use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ovor_core::Tensor;

fn ovor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovor")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ovor(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let printed = ok(&["synth", root.to_str().unwrap()]);
    let config = PathBuf::from(printed.trim());
    assert!(config.is_file());
    config
}

#[test]
fn staged_subcommands_equal_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let cfg = config.to_str().unwrap();
    let whole = dir.path().join("whole");
    let staged = dir.path().join("staged");
    ok(&["--config", cfg, "--svd", "on", "--out", whole.to_str().unwrap(), "run"]);
    for stage in ["localize", "embed-text", "embed-image", "project", "match", "evaluate", "report"] {
        ok(&["--config", cfg, "--svd", "on", "--out", staged.to_str().unwrap(), stage]);
    }
    for file in ["predictions.jsonl", "report.json", "metrics.csv", "overlays/1.png"] {
        assert_eq!(std::fs::read(whole.join(file)).unwrap(), std::fs::read(staged.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out = dir.path().join("discard-all");
    let cfg = config.to_str().unwrap();
    ok(&["--config", cfg, "--encoder", "mock", "--theta", "1", "--out", out.to_str().unwrap(), "run"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["theta"], 1.0);
    assert_eq!(report["config"]["encoder"], "mock");
    assert_eq!(report["counts"]["tp"], 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let cfg = config.to_str().unwrap();
    assert_eq!(ovor(&["run"]).status.code(), Some(2));
    assert_eq!(ovor(&["--config", cfg, "--theta", "1.5", "run"]).status.code(), Some(2));

    std::fs::remove_file(dir.path().join("data/masks/0002.png")).unwrap();
    let out = ovor(&["--config", cfg, "run"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("image 2") && stderr.contains("localize"), "{stderr}");

    std::fs::remove_dir_all(dir.path().join("data/masks")).unwrap();
    let out = ovor(&["--config", cfg, "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask"));
}

#[test]
fn stage_refuses_outputs_of_other_settings() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let cfg = config.to_str().unwrap();
    ok(&["--config", cfg, "localize"]);
    ok(&["--config", cfg, "embed-text"]);
    let out = ovor(&["--config", cfg, "--min-area", "10", "embed-image"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
}

fn bbox_json(r: usize, c: usize) -> serde_json::Value {
    serde_json::json!({ "min_row": r, "min_col": c, "max_row": r + 9, "max_col": c + 9 })
}

/// Three images, three classes; every count below is worked out by hand.
fn write_eval_fixture(dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    std::fs::create_dir_all(dir.join("out")).unwrap();
    let ann = |id: u64, image: u64, row: usize, cat: u64| {
        serde_json::json!({ "id": id, "image_id": image, "category_id": cat, "bbox": [0.0, row as f64, 10.0, 10.0], "area": 100, "iscrowd": 0 })
    };
    let images: Vec<serde_json::Value> = (1..=3)
        .map(|i| serde_json::json!({ "id": i, "file_name": format!("{i}.png"), "height": 80, "width": 80 }))
        .collect();
    let coco = serde_json::json!({
        "images": images,
        "categories": [
            { "id": 1, "name": "alpha", "supercategory": "x" },
            { "id": 2, "name": "beta", "supercategory": "x" },
            { "id": 3, "name": "gamma", "supercategory": "x" }
        ],
        "annotations": [
            ann(1, 1, 0, 1), ann(2, 1, 20, 2), ann(3, 1, 40, 1),
            ann(4, 2, 0, 3), ann(5, 2, 20, 1),
            ann(6, 3, 0, 2), ann(7, 3, 20, 3)
        ]
    });
    std::fs::write(dir.join("annotations.json"), coco.to_string()).unwrap();
    std::fs::write(
        dir.join("config.json"),
        r#"{"images": "images", "masks": "masks", "annotations": "annotations.json", "encoder": "mock"}"#,
    )
    .unwrap();

    let line = |image: u64, region: usize, bbox: serde_json::Value, cat: Option<(&str, usize)>, p: f64| {
        serde_json::json!({
            "image_id": image, "region_id": region, "bbox": bbox,
            "category": cat.map_or("DISCARDED", |c| c.0), "category_index": cat.map(|c| c.1),
            "probability": p, "top5": []
        })
        .to_string()
    };
    let (a, b, g) = (Some(("alpha", 0)), Some(("beta", 1)), Some(("gamma", 2)));
    let lines = [
        r#"{"kind":"ovor-predictions","format_version":1,"config_hash":"fixture"}"#.to_string(),
        line(1, 0, bbox_json(0, 0), a, 0.9),
        line(1, 1, bbox_json(20, 0), a, 0.6),
        line(1, 2, bbox_json(40, 0), a, 0.2),
        line(2, 0, bbox_json(0, 0), g, 0.8),
        line(2, 1, bbox_json(60, 60), b, 0.7),
        line(3, 0, bbox_json(0, 0), b, 0.5),
        line(3, 1, bbox_json(20, 0), None, 0.4),
        line(3, 2, bbox_json(60, 60), g, 0.3),
    ];
    std::fs::write(dir.join("out/predictions.jsonl"), lines.join("\n") + "\n").unwrap();
    dir.join("config.json")
}

#[test]
fn evaluate_fixture_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_eval_fixture(dir.path());
    ok(&["--config", config.to_str().unwrap(), "evaluate"]);
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    // Class-wise: P = R = F1 = 5/9, Acc = 7/18, mAP = 47/108.
    // Image-wise: P = R = F1 = 4/7, Acc = 4/9, AP = 111/245.
    assert_eq!(
        csv,
        "setting,Avg Precision,Avg Recall,Accuracy,F1,AP\n\
         classwise,0.5556,0.5556,0.3889,0.5556,43.52\n\
         imagewise,0.5714,0.5714,0.4444,0.5714,45.31\n"
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap()).unwrap();
    let close = |v: &serde_json::Value, x: f64| (v.as_f64().unwrap() - x).abs() < 1e-12;
    assert!(close(&report["classwise"]["accuracy"], 7.0 / 18.0));
    assert!(close(&report["classwise"]["ap"], 4700.0 / 108.0));
    assert!(close(&report["imagewise"]["ap"], 11100.0 / 245.0));
    assert_eq!(report["counts"]["mismatched"], 1);
    assert_eq!(report["counts"]["abstained"], 1);
}

#[test]
fn train_mlp_then_run_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let mut cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(&config).unwrap()).unwrap();
    cfg["encoder"] = "mlp".into();
    cfg["mlp_checkpoint"] = "ckpt".into();
    std::fs::write(&config, cfg.to_string()).unwrap();
    let cfg = config.to_str().unwrap();

    let feats = dir.path().join("feats");
    std::fs::create_dir_all(&feats).unwrap();
    let mut manifest = Vec::new();
    for i in 0..12usize {
        let values: Vec<f32> = (0..12).map(|j| ((i * 7 + j * 3) % 11) as f32 / 11.0 + (i % 4) as f32).collect();
        Tensor::f32(vec![1, 1, 12], values).unwrap().save(feats.join(format!("{i}.ovt"))).unwrap();
        manifest.push(serde_json::json!({ "features": format!("{i}.ovt"), "category": i % 4 }));
    }
    std::fs::write(feats.join("train.json"), serde_json::Value::from(manifest).to_string()).unwrap();

    ok(&["--config", cfg, "embed-text"]);
    let manifest = feats.join("train.json");
    let printed = ok(&[
        "--config", cfg, "train-mlp", "--manifest", manifest.to_str().unwrap(), "--epochs", "3", "--hidden1", "8",
        "--hidden2", "8",
    ]);
    let ckpt = PathBuf::from(printed.trim());
    assert!(ckpt.ends_with("ckpt"));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(ckpt.join("mlp.json")).unwrap()).unwrap();
    assert_eq!(meta["epoch_losses"].as_array().unwrap().len(), 3);
    assert_eq!(meta["dims"]["input"], 12);

    let stdout = ok(&["--config", cfg, "run"]);
    assert!(stdout.contains("predictions"));
}
