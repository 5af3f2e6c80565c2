//! Runs the `flowinterp` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowinterp::flow::DisplacementField;
use flowinterp::volume::Volume;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowinterp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_RUN: &str = r#"{
    "network": {"width": 32},
    "solve": {"steps": 60, "warmup_steps": 5, "base_lr": 5e-4, "batch_voxels": 1024}
}"#;

/// Two-blob phantom on a 20^3 grid moving by `d` voxels with a linear profile.
fn phantom_dir(root: &Path, name: &str, d: [f64; 3], frames: usize) -> PathBuf {
    let cfg = write(
        root,
        &format!("{name}.json"),
        &format!(
            r#"{{"dims": [20, 20, 20], "n_blobs": 2, "sigma": [1.8, 2.2],
                "motion": {{"kind": "translate", "d": [{}, {}, {}]}}, "profile": "linear"}}"#,
            d[0], d[1], d[2]
        ),
    );
    let out = root.join(name);
    let o = run(&["phantom", "--out", s(&out), "--config", s(&cfg), "--frames", &frames.to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn phantom_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("default");
    let o = run(&["phantom", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["spec"]["dims"], serde_json::json!([48, 48, 48]));
    let frames = m["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    for f in frames {
        let v = Volume::load(out.join(f["file"].as_str().unwrap())).unwrap();
        assert_eq!(v.dims(), [48, 48, 48]);
    }
    assert!(out.join("frame_t0_4.vol").exists() && out.join("frame_t4_4.vol").exists());
}

#[test]
fn static_phantom_frames_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = phantom_dir(dir.path(), "still", [0.0; 3], 2);
    let first = Volume::load(out.join("frame_t0_3.vol")).unwrap();
    for k in 1..=3 {
        let v = Volume::load(out.join(format!("frame_t{k}_3.vol"))).unwrap();
        assert_eq!(v.data(), first.data());
    }
}

#[test]
fn invalid_phantom_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["phantom", "--out", s(&dir.path().join("x")), "--dims", "1"]);
    assert_eq!(code(&o), 2);
    let bad = write(dir.path(), "bad.json", r#"{"dimz": [8, 8, 8]}"#);
    let o = run(&["phantom", "--out", s(&dir.path().join("y")), "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn interp_then_eval_on_a_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom_dir(dir.path(), "moving", [1.5, -1.0, 0.5], 1);
    let cfg = write(dir.path(), "run.json", SMALL_RUN);
    let out = dir.path().join("interp");
    let o = run(&[
        "interp",
        "--frame0",
        s(&ph.join("frame_t0_2.vol")),
        "--frame1",
        s(&ph.join("frame_t2_2.vol")),
        "--frames",
        "1",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--mode",
        "cpt",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("solve_report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["trace"].as_array().unwrap().len(), 60);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["mode"], "cpt");
    assert_eq!(manifest["ode_steps"], 2);
    assert!(out.join("frame_t1_2.vol").exists());
    for f in ["dvf_0_to_1.raw", "dvf_1_to_0.raw"] {
        assert_eq!(DisplacementField::load(&out.join(f)).unwrap().dims, [20, 20, 20]);
    }

    let metrics = dir.path().join("metrics.json");
    let o = run(&["eval", "--pred-dir", s(&out), "--truth-dir", s(&ph), "--report", s(&metrics)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&metrics);
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["per_frame"][0]["t"], 0.5);
    for key in ["psnr", "ncc", "ssim", "nmse"] {
        assert!(m["mean"][key].is_number(), "{key}");
    }
    assert!(m["mean"]["psnr"].as_f64().unwrap() > 30.0);
}

#[test]
fn interp_identity_pair_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom_dir(dir.path(), "still", [0.0; 3], 1);
    let cfg = write(dir.path(), "run.json", SMALL_RUN);
    let out = dir.path().join("interp");
    let f0 = ph.join("frame_t0_2.vol");
    let o = run(&["interp", "--frame0", s(&f0), "--frame1", s(&f0), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (Volume::load(&f0).unwrap(), Volume::load(out.join("frame_t1_2.vol")).unwrap());
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 0.02, "max deviation {worst}");
}

#[test]
fn interp_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("a.vol");
    let large = dir.path().join("b.vol");
    Volume::filled([4, 4, 4], 1.0).unwrap().save(&small).unwrap();
    Volume::filled([5, 4, 4], 1.0).unwrap().save(&large).unwrap();
    let out = dir.path().join("o");
    let o = run(&["interp", "--frame0", s(&small), "--frame1", s(&large), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("missing.vol");
    let o = run(&["interp", "--frame0", s(&missing), "--frame1", s(&small), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["interp", "--frame0", s(&small), "--frame1", s(&small), "--out", s(&out), "--mode", "spline"]);
    assert_eq!(code(&o), 2);
    let o = run(&["interp", "--frame0", s(&small)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_three_and_keeps_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom_dir(dir.path(), "moving", [1.0, 0.0, 0.0], 1);
    let cfg = write(
        dir.path(),
        "run.json",
        r#"{"network": {"width": 8}, "solve": {"steps": 20, "warmup_steps": 1, "base_lr": 1e300, "batch_voxels": 64}}"#,
    );
    let out = dir.path().join("o");
    let o = run(&[
        "interp",
        "--frame0",
        s(&ph.join("frame_t0_2.vol")),
        "--frame1",
        s(&ph.join("frame_t2_2.vol")),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("solve_report.json"));
    assert_eq!(report["diverged"], true);
}

#[test]
fn eval_scores_and_validates_frame_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth, zeros) = (dir.path().join("p"), dir.path().join("t"), dir.path().join("z"));
    for d in [&pred, &truth, &zeros] {
        fs::create_dir(d).unwrap();
    }
    let v = Volume::from_fn([8, 8, 8], |x, y, z| (1 + x + 2 * y + 3 * z) as f32 / 20.0).unwrap();
    for k in 1..=2 {
        v.save(pred.join(format!("frame_t{k}_3.vol"))).unwrap();
        v.save(truth.join(format!("frame_t{k}_3.vol"))).unwrap();
        Volume::filled([8, 8, 8], 0.0).unwrap().save(zeros.join(format!("frame_t{k}_3.vol"))).unwrap();
    }
    v.save(truth.join("frame_t0_3.vol")).unwrap();

    let report = dir.path().join("same.json");
    assert_eq!(code(&run(&["eval", "--pred-dir", s(&pred), "--truth-dir", s(&truth), "--report", s(&report)])), 0);
    let m = json(&report);
    assert_eq!(m["per_frame"].as_array().unwrap().len(), 2);
    assert_eq!(m["mean"]["psnr"], 99.0);
    assert_eq!(m["mean"]["ssim"], 1.0);
    assert_eq!(m["mean"]["nmse"], 0.0);

    let report = dir.path().join("zero.json");
    assert_eq!(code(&run(&["eval", "--pred-dir", s(&zeros), "--truth-dir", s(&truth), "--report", s(&report)])), 0);
    assert_eq!(json(&report)["mean"]["nmse"], 1.0);

    fs::remove_file(pred.join("frame_t2_3.vol")).unwrap();
    let o = run(&["eval", "--pred-dir", s(&pred), "--truth-dir", s(&truth), "--report", s(&report)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn register_identity_and_translation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.json",
        r#"{"network": {"width": 32},
            "solve": {"steps": 150, "warmup_steps": 15, "base_lr": 1e-3, "batch_voxels": 1024}}"#,
    );

    let still = phantom_dir(dir.path(), "still", [0.0; 3], 1);
    let f0 = still.join("frame_t0_2.vol");
    let out = dir.path().join("identity");
    let o = run(&["register", "--frame0", s(&f0), "--frame1", s(&f0), "--config", s(&cfg), "--out-dvf", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dvf = DisplacementField::load(&out.join("dvf_0_to_1.raw")).unwrap();
    let max = dvf.magnitudes().into_iter().fold(0.0, f64::max);
    assert!(max <= 0.1, "identity max |d| {max}");

    let d = [1.5, -1.0, 0.5];
    let moving = phantom_dir(dir.path(), "moving", d, 1);
    let out = dir.path().join("translate");
    let o = run(&[
        "register",
        "--frame0",
        s(&moving.join("frame_t0_2.vol")),
        "--frame1",
        s(&moving.join("frame_t2_2.vol")),
        "--config",
        s(&cfg),
        "--out-dvf",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = json(&moving.join("manifest.json"));
    let spec: flowinterp::phantom::PhantomSpec = serde_json::from_value(manifest["spec"].clone()).unwrap();
    let mask = spec.foreground_mask(0.0, [20; 3]);
    let dvf = DisplacementField::load(&out.join("dvf_0_to_1.raw")).unwrap();
    let mut mean = [0.0; 3];
    let n = mask.iter().filter(|m| **m).count() as f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let v = dvf.voxel(i % 20, (i / 20) % 20, i / 400);
        for a in 0..3 {
            mean[a] += v[a] as f64 / n;
        }
    }
    let err = (0..3).map(|a| (mean[a] - d[a]).powi(2)).sum::<f64>().sqrt();
    assert!(err <= 0.25, "mean {mean:?} vs {d:?}");

    let bad = write(dir.path(), "bad.json", r#"{"solve": {"stepz": 3}}"#);
    let o = run(&["register", "--frame0", s(&f0), "--frame1", s(&f0), "--config", s(&bad), "--out-dvf", s(&out)]);
    assert_eq!(code(&o), 2);
}
