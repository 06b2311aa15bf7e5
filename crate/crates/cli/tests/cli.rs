use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use feddp::experiment::{decode_model, ExperimentConfig, ATTACK_HEADER, GRID_HEADER, METRICS_HEADER};

fn feddp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feddp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.in.json");
    let out = dir.join("out");
    let text = format!(
        r#"{{"clients": 2, "local_epochs": 1, "rounds": 3,
            "dataset": {{"n": 16, "h": 8, "w": 8}},
            "output_dir": {:?}{extra}}}"#,
        out.to_str().unwrap()
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_metrics_model_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = feddp(&["run", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    let rounds: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rounds, ["1", "2", "3"]);
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').take(5).map(|v| v.parse().unwrap()).collect();
        assert!(f[2..].iter().all(|v| (0.0..=1.0).contains(v)), "{l}");
    }
    let model = decode_model(&fs::read(out.join("model.bin")).unwrap()).unwrap();
    assert_eq!(model.round, 3);
    assert_eq!(model.theta.len(), 54);

    let echo = fs::read_to_string(out.join("config.json")).unwrap();
    let reparsed = ExperimentConfig::from_json(&echo).unwrap();
    let original = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    assert_eq!(reparsed, original);
}

#[test]
fn no_privacy_marks_epsilon_inf() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#", "dp": {"mechanism": "none", "sigma": 0.05, "clip_c": 1e300}"#,
    );
    assert!(feddp(&["run", &cfg]).status.success());
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    for l in metrics.lines().skip(1) {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!((cols[5], cols[6]), ("inf", "inf"));
    }
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "hyper": {"lr": 0.1, "batch": 4}"#);
    let o = feddp(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("hyper.batch"), "{err}");

    let cfg = write_config(dir.path(), r#", "dp": {"mechanism": "gaussian", "sigma": -1, "clip_c": 0.5}"#);
    assert_eq!(feddp(&["run", &cfg]).status.code(), Some(2));
    assert_eq!(feddp(&["run", "/nonexistent/config.json"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#", "hyper": {"lr": 1e300, "batch_size": 4}, "dp": {"mechanism": "none", "sigma": 1, "clip_c": 1e300}"#,
    );
    let o = feddp(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn paper_scale_flag_sets_150_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert!(feddp(&["run", &cfg, "--paper-scale"]).status.success());
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 151);
}

#[test]
fn calibrate_reports() {
    let o = feddp(&["calibrate", "--clip-c", "0.5", "--sigma", "0.05"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("epsilon_paper=10.0\n"), "{text}");
    assert!(text.contains("noise_std=0.025\n"), "{text}");
    assert!(text.contains("epsilon_classic=96.89610525210"), "{text}");

    let o = feddp(&["calibrate", "--clip-c", "1", "--sigma", "1"]);
    assert!(stdout(&o).contains("epsilon_paper=1.0\n"));

    assert_eq!(feddp(&["calibrate", "--clip-c", "0", "--sigma", "1"]).status.code(), Some(2));
    assert_eq!(feddp(&["calibrate", "--clip-c", "1", "--sigma", "-1"]).status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = feddp(&["ablate", &cfg, "--sigmas", "0.05,0.35", "--clips", "0.1,0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = fs::read_to_string(dir.path().join("out/grid.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], GRID_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));
}

#[test]
fn attack_is_deterministic_and_writes_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let args = ["attack", &cfg, "--no-dp", "--trials", "1", "--budget", "30"];
    assert!(feddp(&args).status.success());
    let first = fs::read_to_string(dir.path().join("out/attack.csv")).unwrap();
    assert_eq!(first.lines().next(), Some(ATTACK_HEADER));
    assert!(feddp(&args).status.success());
    let second = fs::read_to_string(dir.path().join("out/attack.csv")).unwrap();
    assert_eq!(first, second);
    let mut images: Vec<String> = fs::read_dir(dir.path().join("out/images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    images.sort();
    assert_eq!(images, ["trial000_nodp.ppm", "trial000_truth.ppm"]);
    let ppm = fs::read_to_string(dir.path().join("out/images/trial000_truth.ppm")).unwrap();
    assert!(ppm.starts_with("P3\n8 8\n255\n"));
}
