use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn jonescal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jonescal"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("JONESCAL_THREADS")
        .output()
        .unwrap()
}

fn quick_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/quick.json")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_then_calibrate_noiseless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg = cfg.to_str().unwrap();
    let sim = jonescal(&["simulate", "--config", cfg, "--noiseless", "--out", "vis.json"], dir.path());
    assert!(sim.status.success(), "{}", stderr(&sim));
    let file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("vis.json")).unwrap()).unwrap();
    assert!(file["snr_db"].is_null());
    let cal = jonescal(
        &["calibrate", "--config", cfg, "--input", "vis.json", "--method", "gaussian_ls", "--out", "state.json"],
        dir.path(),
    );
    assert!(cal.status.success(), "{}", stderr(&cal));
    let line = stdout(&cal);
    assert!(line.starts_with("gaussian_ls: 4 outer iterations"), "{line}");
    let err: f64 = line.rsplit(' ').next().unwrap().trim().parse().unwrap();
    assert!(err < 0.1, "{line}");
    assert!(dir.path().join("state.json").exists());
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = jonescal(&["experiment", "--config", "nowhere/missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere/missing.json"), "{}", stderr(&out));

    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(quick_config()).unwrap()).unwrap();
    cfg["scene"] = serde_json::json!({"file": "scenes/none.json"});
    std::fs::write(dir.path().join("filescene.json"), cfg.to_string()).unwrap();
    let out = jonescal(&["experiment", "--config", "filescene.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("scenes/none.json"), "{}", stderr(&out));

    let cfg = quick_config();
    let out = jonescal(&["calibrate", "--config", cfg.to_str().unwrap(), "--input", "absent.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.json"));
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = jonescal(&["crb"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--preset"));

    let out = jonescal(&["config", "--preset", "fig9"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("bad.json"), "{\"name\": \"x\", \"colour\": 1}").unwrap();
    let out = jonescal(&["experiment", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.json"));

    let cfg = quick_config();
    let sim = jonescal(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "vis.json"], dir.path());
    assert!(sim.status.success());
    let out = jonescal(
        &["calibrate", "--config", cfg.to_str().unwrap(), "--input", "vis.json", "--method", "median"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("median"));
}

#[test]
fn bundled_configs_match_presets() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["fig2", "fig3", "fig4"] {
        let out = jonescal(&["config", "--preset", name], dir.path());
        assert!(out.status.success());
        let bundled = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("configs/{name}.json"));
        let from_file = jonescal(&["config", "--config", bundled.to_str().unwrap()], dir.path());
        assert!(from_file.status.success(), "{}", stderr(&from_file));
        assert_eq!(stdout(&out), stdout(&from_file), "{name}");
    }
}

#[test]
fn crb_writes_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let out = jonescal(&["crb", "--preset", "fig2", "--out", "crb.csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("crb.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 128);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("crb,")));
}

#[test]
fn experiment_is_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg = cfg.to_str().unwrap();
    let mut csvs = Vec::new();
    for (threads, out) in [("1", "a"), ("4", "b")] {
        let run = jonescal(
            &["experiment", "--config", cfg, "--runs", "4", "--threads", threads, "--traces", "--out", out],
            dir.path(),
        );
        assert!(run.status.success(), "{}", stderr(&run));
        assert!(stdout(&run).contains("robust"));
        csvs.push(std::fs::read_to_string(dir.path().join(out).join("mse.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 1 + 3 * 2 * 128);

    let report = jonescal(&["report", "--input", "a/results.json", "--out", "a/summary.csv"], dir.path());
    assert!(report.status.success(), "{}", stderr(&report));
    assert!(dir.path().join("a/summary.csv").exists());
    assert!(dir.path().join("a/traces.csv").exists());
}

#[test]
fn seed_override_changes_the_draw() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg = cfg.to_str().unwrap();
    for (seed, out) in [("1", "s1.json"), ("2", "s2.json"), ("1", "s3.json")] {
        assert!(jonescal(&["simulate", "--config", cfg, "--seed", seed, "--out", out], dir.path()).status.success());
    }
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("s1.json"), read("s3.json"));
    assert_ne!(read("s1.json"), read("s2.json"));
}

fn results(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("results.json")).unwrap()).unwrap()
}

#[test]
fn bundled_fig2_regenerates_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/fig2.json");
    let out = jonescal(&["experiment", "--config", cfg.to_str().unwrap(), "--runs", "3", "--out", "fig2"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("fig2/mse.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 128);
    for r in &rows {
        assert_eq!(r[0], "robust");
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
        assert_eq!((r[5], r[6]), ("3", "2024"));
    }
    let meta = &results(&dir.path().join("fig2"))["metadata"];
    assert_eq!(meta["n_unknowns"], 128);
    assert_eq!(meta["n_measurements"], 224);
    assert_eq!(meta["crb_null_dimension"], 16);
}

#[test]
fn noiseless_experiment_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("clean.json"),
        r#"{
            "name": "clean",
            "scene": {"random_unstructured": {"sources": 2, "antennas": 8, "radius": 8.0, "spread": 0.5, "seed": 1}},
            "methods": [{"kind": "robust", "budget": {"outer": 1, "em": 300, "tolerance": 0.0}}],
            "snr_db": [300.0],
            "runs": 1,
            "noise": {"texture": {"law": "constant"}, "speckle": "white"},
            "init_perturbation": 0.01
        }"#,
    )
    .unwrap();
    let out = jonescal(&["experiment", "--config", "clean.json", "--out", "clean"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("clean/mse.csv")).unwrap();
    let worst = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(worst < 1e-16, "{worst:e}");
}

#[test]
fn matched_time_equalises_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(quick_config()).unwrap()).unwrap();
    cfg["time_budget_seconds"] = 0.05.into();
    cfg["runs"] = 3.into();
    std::fs::write(dir.path().join("timed.json"), cfg.to_string()).unwrap();
    let out = jonescal(
        &["experiment", "--config", "timed.json", "--matched-time", "--threads", "1", "--out", "timed"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summaries = results(&dir.path().join("timed"))["summaries"].as_array().unwrap().clone();
    let times: Vec<f64> = summaries.iter().map(|s| s["mean_seconds"].as_f64().unwrap()).collect();
    assert_eq!(times.len(), 6);
    let (lo, hi) = times.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), t| (lo.min(*t), hi.max(*t)));
    assert!(hi <= 1.2 * lo, "{times:?}");
    assert!(lo >= 0.05, "{times:?}");
}
