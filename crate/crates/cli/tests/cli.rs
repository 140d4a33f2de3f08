use std::path::Path;
use std::process::{Command, Output};

fn splatmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatmap")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, out) = (dir.path().join("bundle"), dir.path().join("out"));
    assert!(splatmap(&["synth", "--output", s(&bundle)]).status.success());
    let run = splatmap(&["run", "--input", s(&bundle), "--output", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["config.toml", "map.bin", "metrics.json", "timings.json", "trajectory.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let report = dir.path().join("eval.json");
    let eval = splatmap(&[
        "eval",
        "--estimate",
        s(&out.join("trajectory.txt")),
        "--truth",
        s(&bundle.join("groundtruth.txt")),
        "--rendered",
        s(&out.join("renders")),
        "--reference",
        s(&bundle.join("rgb")),
        "--output",
        s(&report),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["associated_poses"].as_u64().unwrap() >= 3);
    assert!(v["ate"]["rmse"].as_f64().unwrap() < 1e-3);
    let images = v["images"].as_array().unwrap();
    assert!(!images.is_empty());
    assert!(v["mean_psnr"].as_f64().unwrap() > 20.0);

    // The first keyframe's pose, read back from the trajectory, reproduces its render.
    let traj = std::fs::read_to_string(out.join("trajectory.txt")).unwrap();
    let first = traj.lines().find(|l| !l.starts_with('#')).unwrap();
    let pose: Vec<&str> = first.split_whitespace().skip(1).collect();
    let png = dir.path().join("view.png");
    let render = splatmap(&["render", "--map", s(&out.join("map.bin")), "--pose", &pose.join(" "), "--output", s(&png)]);
    assert!(render.status.success(), "{}", String::from_utf8_lossy(&render.stderr));
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = splatmap(&["run", "--config", s(&dir.path().join("missing.toml")), "--output", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[frontend]\nno_such_key = 1\n").unwrap();
    assert_eq!(splatmap(&["run", "--config", s(&cfg), "--output", s(dir.path())]).status.code(), Some(1));

    // A bundle without the long-range flows the window asks for.
    let bundle = dir.path().join("sparse");
    assert!(splatmap(&["synth", "--output", s(&bundle), "--max-gap", "1"]).status.success());
    let run = splatmap(&["run", "--input", s(&bundle), "--output", s(&dir.path().join("o"))]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("no flow record"));

    let render = splatmap(&["render", "--map", "x", "--pose", "0 0 0 0 0 0 0", "--output", "y.png"]);
    assert_eq!(render.status.code(), Some(1));
    assert_eq!(splatmap(&["eval"]).status.code(), Some(1));
}
