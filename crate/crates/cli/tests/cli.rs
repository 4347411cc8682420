use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SCENE: &str = r#"{
  "n_frames": 40, "rows": 40, "cols": 48,
  "targets": [
    {"position": [3.0, 8.0], "velocity": [0.05, 0.0], "reflectivity": 200, "extent": 3.0},
    {"position": [-6.0, -4.0], "velocity": [0.0, 0.05], "reflectivity": 180, "extent": 3.0}
  ],
  "cartesian": {"side_px": 64, "meters_per_pixel": 0.5}
}"#;

const PIPELINE: &str = r#"{
  "cartesian": {"side_px": 64, "meters_per_pixel": 0.5},
  "cfar": {"n_train": 10, "n_guard": 2, "pfa": 0.001},
  "solver": {"rel_gap_tol": 0.01}
}"#;

fn radsamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radsamp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = radsamp(args);
    assert!(
        out.status.success(),
        "radsamp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small test scene and pipeline config, returns the scene dir.
fn setup(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("scene.json"), SCENE).unwrap();
    fs::write(dir.join("pipe.json"), PIPELINE).unwrap();
    let sc = dir.join("sc");
    ok(&["gen-scene", "--config", s(&dir.join("scene.json")), "--seed", "5", "--out", s(&sc)]);
    sc
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn standard_cs_at_full_rate_reports_infinite_psnr() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let out = tmp.path().join("r");
    ok(&[
        "run",
        "--frames",
        s(&sc.join("frames")),
        "--config",
        s(&tmp.path().join("pipe.json")),
        "--mode",
        "standard-cs",
        "--rate",
        "1.0",
        "--gt",
        s(&sc.join("gt.jsonl")),
        "--out",
        s(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["mean_psnr"], "inf");
    for f in report["frames"].as_array().unwrap() {
        assert_eq!(f["psnr"], "inf");
    }
}

#[test]
fn comprpd_budget_csv_follows_the_anchor_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let out = tmp.path().join("r");
    ok(&[
        "run",
        "--frames",
        s(&sc.join("frames")),
        "--config",
        s(&tmp.path().join("pipe.json")),
        "--mode",
        "comprpd",
        "--rate",
        "0.2",
        "--anchor-period",
        "20",
        "--out",
        s(&out),
    ]);
    let n = 40.0 * 48.0;
    let n_blocks = 8.0;
    let mut rdr = csv::Reader::from_path(out.join("budget.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.deserialize::<std::collections::HashMap<String, String>>() {
        let rec = rec.unwrap();
        rows += 1;
        let t: usize = rec["frame"].parse().unwrap();
        let anchor = t % 20 == 1;
        assert_eq!(rec["anchor"], anchor.to_string(), "frame {t}");
        let budget: f64 = rec["budget"].parse().unwrap();
        let expect = if anchor { 0.4 * n } else { 0.2 * n };
        assert!((budget - expect).abs() < 1e-9, "frame {t}: budget {budget}");
        let spent: f64 = rec["spent"].parse().unwrap();
        assert!(spent <= budget + n_blocks, "frame {t}: spent {spent}");
    }
    assert_eq!(rows, 40);
    assert_eq!(fs::read_dir(out.join("plans")).unwrap().count(), 40);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let out = tmp.path().join("e");
    let gt = sc.join("gt.jsonl");
    let frames = sc.join("frames");
    ok(&[
        "eval",
        "--frames",
        s(&frames),
        "--recon",
        s(&frames),
        "--detections",
        s(&gt),
        "--gt",
        s(&gt),
        "--svg",
        "--out",
        s(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["ap50"].as_f64(), Some(1.0));
    assert_eq!(report["ap"].as_f64(), Some(1.0));
    assert_eq!(report["mean_psnr"], "inf");
    assert!(fs::read_to_string(out.join("pr.svg")).unwrap().starts_with("<svg"));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "run",
            "--frames",
            s(&sc.join("frames")),
            "--config",
            s(&tmp.path().join("pipe.json")),
            "--mode",
            "rd",
            "--rate",
            "0.3",
            "--seed",
            "9",
            "--gt",
            s(&sc.join("gt.jsonl")),
            "--out",
            s(&out),
        ]);
        dir_bytes(&out)
    };
    let a = run("a");
    let b = run("b");
    assert!(a.len() > 40);
    assert_eq!(a, b);

    let again = tmp.path().join("sc2");
    ok(&["gen-scene", "--config", s(&tmp.path().join("scene.json")), "--seed", "5", "--out", s(&again)]);
    assert_eq!(dir_bytes(&sc), dir_bytes(&again));
}

#[test]
fn compradimg_uses_camera_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let out = tmp.path().join("r");
    ok(&[
        "run",
        "--frames",
        s(&sc.join("frames")),
        "--config",
        s(&tmp.path().join("pipe.json")),
        "--mode",
        "compradimg",
        "--camera",
        s(&sc.join("camera.json")),
        "--camera-detections",
        s(&sc.join("camera.jsonl")),
        "--rate",
        "0.2",
        "--out",
        s(&out),
    ]);
    let plan = read_json(&out.join("plans").join("frame_0002.json"));
    assert!(plan["plan"]["provenance"]["kind"].is_string());
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let out = radsamp(&["run", "--frames", s(&sc.join("frames")), "--rate", "1.5", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_rate"));

    let out = radsamp(&["run", "--frames", s(&sc.join("frames")), "--mode", "compradimg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("camera"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"anchor_kind": "jpeg"}"#).unwrap();
    let out = radsamp(&["run", "--frames", s(&sc.join("frames")), "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("anchor_kind") || String::from_utf8_lossy(&out.stderr).contains("jpeg"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = radsamp(&["convert", "--input", "/nonexistent/frame_0001.png", "--output", "/tmp/x.f32"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn convert_and_compress_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let f32_path = tmp.path().join("c/f.f32");
    ok(&["convert", "--input", s(&sc.join("frames/frame_0001.png")), "--output", s(&f32_path)]);
    let png_path = tmp.path().join("c/g.png");
    ok(&["convert", "--input", s(&f32_path), "--output", s(&png_path)]);
    assert_eq!(
        fs::read(sc.join("frames/frame_0001.png")).unwrap(),
        fs::read(&png_path).unwrap()
    );

    let cp = tmp.path().join("cp");
    ok(&["compress", "--frame", s(&f32_path), "--rate", "1.0", "--out", s(&cp)]);
    let bytes = fs::read(cp.join("frame_0001.rms")).unwrap();
    assert_eq!(&bytes[..4], b"RMSF");
    assert_eq!(bytes.len(), 48 + 8 * 32 + 4 * 40 * 48);
    ok(&["reconstruct", "--input", s(&cp.join("frame_0001.rms")), "--out", s(&cp), "--format", "raw"]);
    let back = fs::read(cp.join("frame_0001.f32")).unwrap();
    assert_eq!(back, fs::read(&f32_path).unwrap());
}

#[test]
fn plan_prints_lp_json() {
    let out = ok(&["plan", "lp1", "--a", "2,3,11", "--r1", "18", "--r2", "19", "--b", "4,-1,-3"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let x = v["solution"]["x"].as_array().unwrap();
    assert_eq!(x.len(), 4);
    let x3 = x[2].as_f64().unwrap();
    assert!((x[0].as_f64().unwrap() - 3.0 * x3).abs() < 1e-12);

    let out = ok(&["plan", "lp2", "--important", "10"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["inputs"]["important"], 10);
}

#[test]
fn track_and_cfar_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = setup(tmp.path());
    let t = tmp.path().join("t");
    ok(&["track", "--detections", s(&sc.join("gt.jsonl")), "--anchor-period", "20", "--out", s(&t)]);
    let lines = fs::read_to_string(t.join("tracks.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 40);

    let c = tmp.path().join("c");
    ok(&[
        "cfar",
        "--frame",
        s(&sc.join("frames/frame_0001.png")),
        "--n-train",
        "10",
        "--n-guard",
        "2",
        "--out",
        s(&c),
    ]);
    let v = read_json(&c.join("cfar_blocks.json"));
    assert!(!v["blocks"].as_array().unwrap().is_empty());
    assert!(c.join("cfar_mask.png").exists());
}

#[test]
fn help_documents_formats() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["RMSF", "RMSR", "frame_0001.json", "bbox", "Exit status"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}
