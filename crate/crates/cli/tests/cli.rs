//! Drives the installed binary end to end: the plan / rollout / report
//! round trip, seed determinism, and the exit-code contract (0 success,
//! 2 bad configuration or files, 3 infeasible mission).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_connplan")
}

/// Three robots a dozen meters apart, short horizon: plans in well under a
/// second and never goes near the connectivity floor.
const TINY_MISSION: &str = "\
planner.horizon = 20
planner.max_iterations = 12
planner.subset_size = 2
validation.rollouts = 40
validation.seed = 5

robot.role = primary
robot.id = a
robot.position = -6 0
robot.targets = -10 2

robot.role = primary
robot.id = b
robot.position = 6 0
robot.targets = 10 2

robot.role = bridge
robot.id = c
robot.position = 0 0
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("mission.cfg");
    fs::write(&path, text).expect("config written");
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(exe()).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn plan_rollout_report_round_trip() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_config(dir.path(), TINY_MISSION);
    let out = dir.path().join("run");

    let plan = run(&["plan", "--config", path_str(&config), "--out", path_str(&out)]);
    assert!(
        plan.status.success(),
        "plan failed: {}",
        String::from_utf8_lossy(&plan.stderr)
    );
    for name in ["plan.txt", "timesteps.txt", "iterations.txt"] {
        assert!(out.join(name).is_file(), "{name} missing after plan");
    }
    let stdout = String::from_utf8_lossy(&plan.stdout);
    assert!(stdout.contains("planned"), "plan should summarize itself: {stdout}");

    let rollout = run(&["rollout", "--config", path_str(&config), "--out", path_str(&out)]);
    assert!(
        rollout.status.success(),
        "rollout failed: {}",
        String::from_utf8_lossy(&rollout.stderr)
    );
    for name in ["rollouts.txt", "rollout_summary.txt"] {
        assert!(out.join(name).is_file(), "{name} missing after rollout");
    }

    let report = run(&["report", "--out", path_str(&out)]);
    assert!(
        report.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&report.stderr)
    );
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("mission report"));
    assert!(text.contains("min lambda2_lb"));
    assert!(text.contains("rollouts: 40"));
    assert!(text.contains("verdict"));
}

#[test]
fn planning_twice_with_one_seed_is_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_config(dir.path(), TINY_MISSION);
    let outs = [dir.path().join("first"), dir.path().join("second")];
    for out in &outs {
        let plan = run(&[
            "plan",
            "--config",
            path_str(&config),
            "--out",
            path_str(out),
            "--seed",
            "9",
        ]);
        assert!(plan.status.success());
        let rollout = run(&[
            "rollout",
            "--config",
            path_str(&config),
            "--out",
            path_str(out),
            "--seed",
            "9",
        ]);
        assert!(rollout.status.success());
    }
    for name in [
        "plan.txt",
        "timesteps.txt",
        "iterations.txt",
        "rollouts.txt",
        "rollout_summary.txt",
    ] {
        let a = fs::read(outs[0].join(name)).expect("first run file");
        let b = fs::read(outs[1].join(name)).expect("second run file");
        assert!(a == b, "{name} differs between identical invocations");
    }
}

#[test]
fn unknown_config_key_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().expect("tempdir");
    let broken = format!("dynamics.dt = 0.2\nplanner.bogus = 1\n{TINY_MISSION}");
    let config = write_config(dir.path(), &broken);
    let out = dir.path().join("run");
    let plan = run(&["plan", "--config", path_str(&config), "--out", path_str(&out)]);
    assert_eq!(plan.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&plan.stderr);
    assert!(stderr.contains("config line 2"), "stderr: {stderr}");
    assert!(stderr.contains("unknown key"), "stderr: {stderr}");
}

#[test]
fn inverted_weight_band_is_rejected() {
    let dir = tempfile::tempdir().expect("tempdir");
    let broken = format!(
        "connectivity.range = 30.0\nconnectivity.inner_range = 35.0\n{TINY_MISSION}"
    );
    let config = write_config(dir.path(), &broken);
    let out = dir.path().join("run");
    let plan = run(&["plan", "--config", path_str(&config), "--out", path_str(&out)]);
    assert_eq!(plan.status.code(), Some(2));
    assert!(!plan.stderr.is_empty());
}

#[test]
fn unplannable_mission_exits_three() {
    let dir = tempfile::tempdir().expect("tempdir");
    let stranded = "\
planner.horizon = 20

robot.role = primary
robot.id = a
robot.position = -80 0
robot.targets = -85 0

robot.role = primary
robot.id = b
robot.position = 80 0
robot.targets = 85 0
";
    let config = write_config(dir.path(), stranded);
    let out = dir.path().join("run");
    let plan = run(&["plan", "--config", path_str(&config), "--out", path_str(&out)]);
    assert_eq!(plan.status.code(), Some(3));
    assert!(!plan.stderr.is_empty());
    assert!(!out.join("plan.txt").exists(), "no plan should be written");
}

#[test]
fn zero_rollouts_writes_an_empty_table() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_config(dir.path(), TINY_MISSION);
    let out = dir.path().join("run");
    assert!(run(&["plan", "--config", path_str(&config), "--out", path_str(&out)])
        .status
        .success());
    let rollout = run(&[
        "rollout",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--rollouts",
        "0",
    ]);
    assert!(rollout.status.success());
    let table = fs::read_to_string(out.join("rollouts.txt")).expect("rollout table");
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .collect();
    assert_eq!(rows.len(), 1, "expected only the header, got {rows:?}");
    let summary = fs::read_to_string(out.join("rollout_summary.txt")).expect("summary");
    assert!(summary.contains("rollouts 0") || summary.contains("rollouts = 0"));
}

#[test]
fn report_on_an_empty_directory_exits_two() {
    let dir = tempfile::tempdir().expect("tempdir");
    let report = run(&["report", "--out", path_str(dir.path())]);
    assert_eq!(report.status.code(), Some(2));
    assert!(!report.stderr.is_empty());
}

#[test]
fn rollout_rejects_a_plan_from_a_different_mission() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_config(dir.path(), TINY_MISSION);
    let out = dir.path().join("run");
    assert!(run(&["plan", "--config", path_str(&config), "--out", path_str(&out)])
        .status
        .success());

    let two_robots = "\
planner.horizon = 20

robot.role = primary
robot.id = a
robot.position = -6 0
robot.targets = -10 2

robot.role = bridge
robot.id = c
robot.position = 0 0
";
    let other = dir.path().join("other.cfg");
    fs::write(&other, two_robots).expect("config written");
    let rollout = run(&["rollout", "--config", path_str(&other), "--out", path_str(&out)]);
    assert_eq!(rollout.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&rollout.stderr);
    assert!(stderr.contains("plan file covers"), "stderr: {stderr}");
}
