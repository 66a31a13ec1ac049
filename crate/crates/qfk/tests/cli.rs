mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qfk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfk"))
        .current_dir(dir)
        .args(["--output-dir", "."])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = qfk(dir, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Exit code and the parsed single-line error record.
fn failure(o: &Output) -> (i32, Value) {
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    (
        o.status.code().unwrap(),
        serde_json::from_str(stderr.trim()).unwrap(),
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const TINY: [&str; 9] = [
    "build",
    "--height",
    "32",
    "--width",
    "32",
    "--depth",
    "2",
    "--base-channels",
    "4",
];

/// Builds, calibrates and quantizes a tiny model in `dir`.
fn tiny_pipeline(dir: &Path, extra_build: &[&str]) {
    common::write_png_images(&dir.join("cal"), 6, 40, 30, 1);
    let build: Vec<&str> = TINY.iter().chain(extra_build).copied().collect();
    ok(dir, &build);
    ok(
        dir,
        &[
            "calibrate",
            "--model",
            "model.qfk",
            "--images",
            "cal",
            "--force",
        ],
    );
    ok(
        dir,
        &[
            "quantize",
            "--model",
            "model.qfk",
            "--calibration",
            "calibration.json",
        ],
    );
}

#[test]
fn build_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir_all(d).unwrap();
        let mut args = vec!["--seed", "7"];
        args.extend(TINY);
        ok(d, &args);
    }
    let read = |d: &Path| std::fs::read(d.join("model.qfk")).unwrap();
    assert_eq!(read(&a), read(&b));
    ok(
        &a,
        &[
            "--seed",
            "8",
            "build",
            "--height",
            "32",
            "--width",
            "32",
            "--depth",
            "2",
            "--base-channels",
            "4",
            "--out",
            "other.qfk",
        ],
    );
    assert_ne!(read(&a), std::fs::read(a.join("other.qfk")).unwrap());
}

#[test]
fn calibration_size_rule_is_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    common::write_png_images(&dir.join("cal"), 50, 8, 8, 2);
    ok(dir, &TINY);
    let o = qfk(
        dir,
        &["calibrate", "--model", "model.qfk", "--images", "cal"],
    );
    let (code, err) = failure(&o);
    assert_eq!(code, 3);
    assert_eq!(err["error"], "data");
    assert_eq!(err["code"], 3);
    let msg = err["message"].as_str().unwrap();
    assert!(
        msg.contains("50 images") && msg.contains("100-1000"),
        "{msg}"
    );
    assert!(!dir.join("calibration.json").exists());
}

#[test]
fn infer_writes_masks_predictions_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_pipeline(dir, &[]);
    common::write_png_images(&dir.join("frames"), 8, 48, 48, 3);
    let labels: BTreeMap<String, u8> = (0..8)
        .map(|i| (format!("img_{i:03}"), (i % 2) as u8))
        .collect();
    std::fs::write(
        dir.join("labels.json"),
        serde_json::to_string(&labels).unwrap(),
    )
    .unwrap();

    ok(
        dir,
        &[
            "infer",
            "--model",
            "model.int8.qfk",
            "--images",
            "frames",
            "--labels",
            "labels.json",
        ],
    );
    for id in labels.keys() {
        let mask = qfk::npy::load_mask_npy(&dir.join(format!("masks/{id}.npy"))).unwrap();
        assert_eq!(mask.shape().dims(), &[2, 32, 32]);
    }
    let preds = read_json(&dir.join("predictions.json"));
    assert_eq!(preds.as_object().unwrap().len(), 8);
    for p in preds.as_object().unwrap().values() {
        let score = p["score"].as_f64().unwrap();
        assert_eq!(p["label"].as_u64().unwrap(), u64::from(score >= 0.5));
    }
    let inline = read_json(&dir.join("report.json"));
    assert_eq!(inline["total"], 8);
    assert!(inline["fps"].as_f64().unwrap() > 0.0);

    // eval over the saved predictions reproduces the inline report
    ok(
        dir,
        &[
            "eval",
            "--predictions",
            "predictions.json",
            "--labels",
            "labels.json",
        ],
    );
    let evaluated = read_json(&dir.join("report.json"));
    for key in ["total", "correct", "wrong", "accuracy"] {
        assert_eq!(evaluated[key], inline[key], "{key}");
    }
    assert!(evaluated["fps"].is_null());

    // same inputs, same bytes (masks and predictions)
    let before = std::fs::read(dir.join("predictions.json")).unwrap();
    let mask_before = std::fs::read(dir.join("masks/img_000.npy")).unwrap();
    ok(
        dir,
        &[
            "infer",
            "--model",
            "model.int8.qfk",
            "--images",
            "frames",
            "--serial",
        ],
    );
    assert_eq!(std::fs::read(dir.join("predictions.json")).unwrap(), before);
    assert_eq!(
        std::fs::read(dir.join("masks/img_000.npy")).unwrap(),
        mask_before
    );

    let run = read_json(&dir.join("run.json"));
    for cmd in ["build", "calibrate", "quantize", "infer", "eval"] {
        assert!(
            run["commands"][cmd].is_object(),
            "{cmd} missing from run.json"
        );
    }
}

#[test]
fn missing_label_names_the_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("p.json"),
        r#"{"a": {"label": 1, "score": 0.9}, "b": {"label": 0, "score": 0.1}}"#,
    )
    .unwrap();
    std::fs::write(dir.join("l.json"), r#"{"a": 1}"#).unwrap();
    let (code, err) = failure(&qfk(
        dir,
        &["eval", "--predictions", "p.json", "--labels", "l.json"],
    ));
    assert_eq!(code, 3);
    assert!(err["message"]
        .as_str()
        .unwrap()
        .contains("no label for frame b"));
}

#[test]
fn fp32_and_seg_only_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_pipeline(dir, &["--variant", "seg-only"]);
    common::write_png_images(&dir.join("frames"), 3, 32, 32, 4);
    ok(
        dir,
        &["infer", "--model", "model.int8.qfk", "--images", "frames"],
    );
    assert!(dir.join("masks/img_002.npy").exists());
    assert!(!dir.join("predictions.json").exists());
    std::fs::write(dir.join("labels.json"), r#"{"img_000": 1}"#).unwrap();
    let (code, _) = failure(&qfk(
        dir,
        &[
            "infer",
            "--model",
            "model.int8.qfk",
            "--images",
            "frames",
            "--labels",
            "labels.json",
        ],
    ));
    assert_eq!(code, 2);
    ok(
        dir,
        &["infer", "--model", "model.qfk", "--images", "frames"],
    );
}

#[test]
fn usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (code, err) = failure(&qfk(dir, &["build", "--bogus"]));
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "usage"));

    let (code, _) = failure(&qfk(
        dir,
        &["build", "--height", "30", "--width", "32", "--depth", "2"],
    ));
    assert_eq!(code, 2);

    let (code, err) = failure(&qfk(dir, &["compile", "--model", "missing.qfk"]));
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "data"));

    ok(dir, &TINY);
    let (code, _) = failure(&qfk(
        dir,
        &["bench", "--model", "model.qfk", "--images", "10"],
    ));
    assert_eq!(code, 2);
    let (code, _) = failure(&qfk(
        dir,
        &["bench", "--model", "model.qfk", "--warmup", "0"],
    ));
    assert_eq!(code, 2);
    let (code, _) = failure(&qfk(dir, &["compile", "--model", "model.qfk"]));
    assert_eq!(code, 2);
}

#[test]
fn bench_writes_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_pipeline(dir, &[]);
    ok(
        dir,
        &[
            "bench",
            "--model",
            "model.qfk",
            "model.int8.qfk",
            "--images",
            "20",
            "--batch",
            "2",
            "--warmup",
            "1",
        ],
    );
    let report = read_json(&dir.join("bench.json"));
    let reports = report["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        let times: f64 = r["batch_seconds"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t.as_f64().unwrap())
            .sum();
        assert!((times - r["wall_seconds"].as_f64().unwrap()).abs() < 1e-12);
        assert!((r["fps"].as_f64().unwrap() - 20.0 / times).abs() < 1e-6);
    }
    let csv = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert!(csv.starts_with("node,variant,precision,fps\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(dir.join("bench.txt"))
        .unwrap()
        .contains("precision=int8"));
}

#[test]
fn prep_builds_masks_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let pairs = dir.join("pairs");
    // three distinct faces; frames of a face differ only slightly
    let mut r = common::rng(5);
    let faces: Vec<Vec<u8>> = (0..3)
        .map(|_| {
            (0..16 * 16 * 3)
                .map(|_| rand::Rng::random::<u8>(&mut r))
                .collect()
        })
        .collect();
    std::fs::create_dir_all(pairs.join("real")).unwrap();
    std::fs::create_dir_all(pairs.join("fake")).unwrap();
    for (f, face) in faces.iter().enumerate() {
        for k in 0..4 {
            let id = format!("f{f}_{k}");
            let img = image::RgbImage::from_raw(16, 16, face.clone()).unwrap();
            img.save(pairs.join("real").join(format!("{id}.png")))
                .unwrap();
            if k % 2 == 1 {
                let mut fake = face.clone();
                fake[0] = fake[0].wrapping_add(128);
                image::RgbImage::from_raw(16, 16, fake)
                    .unwrap()
                    .save(pairs.join("fake").join(format!("{id}.png")))
                    .unwrap();
            }
        }
    }
    ok(
        dir,
        &["prep", "--pairs", "pairs", "--ratios", "0.34,0.33,0.33"],
    );
    let manifest = read_json(&dir.join("manifest.json"));
    let records = manifest["records"].as_array().unwrap();
    assert_eq!(records.len(), 12);
    let mut split_of: BTreeMap<u64, String> = BTreeMap::new();
    for rec in records {
        let c = rec["cluster_id"].as_u64().unwrap();
        let s = rec["split"].as_str().unwrap().to_string();
        assert_eq!(split_of.entry(c).or_insert_with(|| s.clone()), &s);
    }
    assert_eq!(split_of.len(), 3);

    let labels = read_json(&dir.join("labels.json"));
    assert_eq!(labels["f0_1"], 1);
    assert_eq!(labels["f0_0"], 0);
    let fake_mask = qfk::npy::load_mask_npy(&dir.join("masks/f0_1.npy")).unwrap();
    assert_eq!(fake_mask.shape().dims(), &[16, 16]);
    assert_eq!(fake_mask.data().iter().sum::<f32>(), 1.0);
    assert_eq!(fake_mask.data()[0], 1.0);
    let real_mask = qfk::npy::load_mask_npy(&dir.join("masks/f0_0.npy")).unwrap();
    assert!(real_mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qfk"))
        .current_dir(tmp.path())
        .env("QFK_OUTPUT_DIR", "env-out")
        .args(TINY)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("env-out/model.qfk").exists());
    assert!(tmp.path().join("env-out/run.json").exists());
}
