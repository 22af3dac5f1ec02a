use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mocapfuse"));
    c.env_remove("MOCAPFUSE_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small walk scene at reduced heatmap resolution so the suite stays fast.
fn synth(dir: &Path) -> PathBuf {
    let spec = dir.join("scene.json");
    fs::write(&spec, r#"{"frames": 30, "heatmap_scale": 0.25, "motion": {"preset": "walk"}}"#).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", p(&spec), "--frames", "24", "--out", p(&data)]);
    data
}

fn track_into(data: &Path, skeleton: &Path, out: &Path) {
    ok(&[
        "track",
        "--calib",
        p(&data.join("calib.json")),
        "--pcm-dir",
        p(&data.join("pcm")),
        "--skeleton",
        p(skeleton),
        "--out",
        p(out),
    ]);
}

#[test]
fn synth_init_track_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    for f in ["calib.json", "skeleton.json", "scene.json", "truth_positions.csv", "truth_pose.csv"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    assert!(data.join("pcm/cam0/rot0/frame23.pcm").is_file());
    assert!(!data.join("pcm/cam0/rot0/frame24.pcm").exists(), "--frames must override the spec");

    let init = tmp.path().join("init");
    ok(&[
        "init",
        "--calib",
        p(&data.join("calib.json")),
        "--pcm-dir",
        p(&data.join("pcm")),
        "--out",
        p(&init),
    ]);
    let skel = fs::read_to_string(init.join("skeleton.json")).unwrap();
    assert!(skel.contains("\"init\""), "identified skeleton must carry the initial pose");

    let run_dir = tmp.path().join("run");
    track_into(&data, &init.join("skeleton.json"), &run_dir);
    for f in ["positions.csv", "pose.csv", "frames.csv", "diagnostics.csv", "run.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }

    let ev = tmp.path().join("eval");
    ok(&["eval", "--truth", p(&data), "--pred", p(&run_dir), "--out", p(&ev)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    let total = summary["groups"]["total"]["mpjpe_mm"].as_f64().unwrap();
    assert!(total < 20.0, "total MPJPE {total}");
    let series = fs::read_to_string(ev.join("series.csv")).unwrap();
    assert!(series.starts_with("frame,mpjpe_total_mm,mpjpe_lowerbody_mm,pcm_score_total,rotated_cameras\n"));

    // nothing leaks outside the output directories
    let mut top: Vec<String> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["data", "eval", "init", "run", "scene.json"]);
}

#[test]
fn repeated_track_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    track_into(&data, &data.join("skeleton.json"), &a);
    track_into(&data, &data.join("skeleton.json"), &b);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn missing_calib_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["track", "--pcm-dir", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"], "usage");
    assert!(last["message"].as_str().unwrap().contains("--calib"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn invalid_values_and_configs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"pipeline": {"lattice": {"spacing": 10}}}"#).unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["track".into(), "--config".into(), p(&cfg).into()],
        vec!["track".into(), "--rotation".into(), "maybe".into()],
        vec!["synth".into(), "--frames".into(), "many".into()],
        vec!["eval".into(), "--pred".into(), p(tmp.path()).into()],
        vec!["frobnicate".into()],
    ];
    for args in cases {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn config_file_supplies_paths_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"calib": "data/calib.json", "pcm_dir": "data/pcm", "skeleton": "data/skeleton.json",
            "out": "from_config", "pipeline": {"lattice": {"spacing_mm": 12.0}}}"#,
    )
    .unwrap();
    ok(&["track", "--config", p(&cfg), "--lattice-k", "2"]);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("from_config/run.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["lattice"]["spacing_mm"], 12.0);
    assert_eq!(meta["config"]["lattice"]["half_extent"], 2);
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let calib = tmp.path().join("calib.json");
    fs::write(&calib, "{ not json").unwrap();
    let pcm = tmp.path().join("pcm");
    fs::create_dir(&pcm).unwrap();
    let out = run(&["init", "--calib", p(&calib), "--pcm-dir", p(&pcm), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"], "runtime");
}

/// Compares `--help` output with the checked-in copy; set `UPDATE_GOLDEN=1`
/// to rewrite the files.
#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (name, args) in [
        ("help.txt", vec!["--help"]),
        ("synth_help.txt", vec!["synth", "--help"]),
        ("init_help.txt", vec!["init", "--help"]),
        ("track_help.txt", vec!["track", "--help"]),
        ("eval_help.txt", vec!["eval", "--help"]),
    ] {
        let out = ok(&args);
        let text = String::from_utf8(out.stdout).unwrap();
        let path = golden.join(name);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::write(&path, &text).unwrap();
        }
        assert_eq!(text, fs::read_to_string(&path).unwrap(), "{name} drifted");
    }
}

#[test]
fn track_help_lists_every_flag() {
    let text = String::from_utf8(ok(&["track", "--help"]).stdout).unwrap();
    for flag in [
        "--config",
        "--calib",
        "--pcm-dir",
        "--skeleton",
        "--out",
        "--lattice-s",
        "--lattice-k",
        "--cutoff-hz",
        "--rotation",
        "--filter-mode",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert!(String::from_utf8(ok(&["synth", "--help"]).stdout).unwrap().contains("--seed"));
}
