use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rom_core::archive::dir_checksum;
use rom_core::fom::CaseConfig;
use rom_core::nn::{Architecture, TrainConfig};
use rom_core::pipeline::{ExperimentConfig, RegimeSpec};
use rom_core::solver::{RomTrajectory, SolverConfig};

fn rom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rom")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = rom(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn case() -> CaseConfig {
    let mut c = CaseConfig::unsteady(vec![0.02, 0.04, 0.03], 6, 2, 5);
    c.nx = 8;
    c.ny = 8;
    c
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stages_run_one_after_another() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let case_cfg = write_json(&d("case.json"), &case());
    ok(&["generate", "--config", s(&case_cfg), "--out", s(&d("snap"))]);
    ok(&["pod", "--snapshots", s(&d("snap")), "--params", "0,1", "--out", s(&d("bases"))]);
    ok(&[
        "assemble",
        "--snapshots",
        s(&d("snap")),
        "--bases",
        s(&d("bases")),
        "--dims",
        "2,2,2",
        "--out",
        s(&d("small")),
    ]);
    ok(&[
        "assemble",
        "--snapshots",
        s(&d("snap")),
        "--bases",
        s(&d("bases")),
        "--dims",
        "4,4,2",
        "--out",
        s(&d("big")),
    ]);
    ok(&[
        "extract",
        "--snapshots",
        s(&d("snap")),
        "--bases",
        s(&d("bases")),
        "--ops-small",
        s(&d("small")),
        "--ops-big",
        s(&d("big")),
        "--train",
        "0,1",
        "--test",
        "2",
        "--out",
        s(&d("data")),
    ]);
    let train_cfg = write_json(
        &d("train.json"),
        &TrainConfig { epochs: 200, coupled_epochs: 200, n_step: 100, ..TrainConfig::default() },
    );
    for target in ["G", "M"] {
        ok(&[
            "train",
            "--dataset",
            s(&d("data")),
            "--target",
            target,
            "--config",
            s(&train_cfg),
            "--out",
            s(&d("nets")),
        ]);
    }
    // the quadratic ansatz is fit at a single viscosity
    let (data, nets) = (d("data"), d("nets"));
    assert!(!rom(&["train", "--dataset", s(&data), "--target", "quadratic", "--out", s(&nets)]).status.success());
    ok(&[
        "extract",
        "--snapshots",
        s(&d("snap")),
        "--bases",
        s(&d("bases")),
        "--ops-small",
        s(&d("small")),
        "--ops-big",
        s(&d("big")),
        "--train",
        "2",
        "--out",
        s(&d("data_single")),
    ]);
    ok(&["train", "--dataset", s(&d("data_single")), "--target", "quadratic", "--out", s(&d("nets"))]);
    assert!(d("nets/train_report_G.json").exists());
    ok(&[
        "train",
        "--dataset",
        s(&d("data")),
        "--target",
        "star",
        "--pretrained",
        s(&d("nets")),
        "--config",
        s(&train_cfg),
        "--out",
        s(&d("star")),
    ]);
    // star training leaves the pretrained G untouched
    assert_ne!(dir_checksum(&d("nets/g")).unwrap(), dir_checksum(&d("star/g")).unwrap());

    let solver_cfg = write_json(&d("solver.json"), &SolverConfig { dt: 0.01, steps: 5, ..SolverConfig::default() });
    for (mode, nets) in [("none", "nets"), ("dd", "nets"), ("quadratic", "nets"), ("dd-star", "star")] {
        let out = d(&format!("traj_{mode}"));
        let o = rom(&[
            "solve",
            "--ops",
            s(&d("small")),
            "--nets",
            s(&d(nets)),
            "--mode",
            mode,
            "--mu",
            "0.03",
            "--snapshots",
            s(&d("snap")),
            "--bases",
            s(&d("bases")),
            "--config",
            s(&solver_cfg),
            "--out",
            s(&out),
        ]);
        // the trajectory is written even when a step fails to converge
        let traj = RomTrajectory::load(&out).unwrap();
        assert_eq!(traj.states.len(), 6, "{mode}");
        assert_eq!(traj.mu_phys, vec![0.03]);
        assert_eq!(o.status.success(), traj.all_converged(), "{mode}");
    }
}

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        case: case(),
        train_params: vec![0, 1],
        test_params: vec![2],
        train_frames: None,
        regimes: vec![RegimeSpec::Dims { nu: 2, np: 2, nnut: 2 }],
        k: 2.0,
        tau: 10.0,
        arch: Architecture { hidden: vec![6, 6], sub_output: 6 },
        train: TrainConfig { epochs: 60, coupled_epochs: 60, n_step: 30, ..TrainConfig::default() },
        solver: SolverConfig::default(),
        substeps: 1,
    }
}

#[test]
fn experiment_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(&tmp.path().join("exp.json"), &tiny_experiment());
    let run = tmp.path().join("run");
    let o = rom(&["experiment", "--config", s(&cfg), "--out", s(&run)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("r0 p train dd-star ")), "{stdout}");
    for f in ["report.json", "gains.csv", "errors.csv"] {
        assert!(run.join("report").join(f).exists(), "{f}");
    }
    let again = tmp.path().join("again");
    ok(&["report", "--input", s(&run.join("report/report.json")), "--out", s(&again)]);
    for f in ["report.json", "gains.csv", "errors.csv"] {
        assert_eq!(std::fs::read(run.join("report").join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seeds_control_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(&tmp.path().join("case.json"), &case());
    let run = |name: &str, seed: &str| -> String {
        let out = tmp.path().join(name);
        ok(&["generate", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
        dir_checksum(&out).unwrap()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_ne!(a, run("c", "2"));
}

#[test]
fn failures_give_a_nonzero_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    // missing --out, missing config, unreadable inputs and bad values
    assert!(!rom(&["generate"]).status.success());
    assert!(!rom(&["generate", "--out", s(&out)]).status.success());
    assert!(!rom(&["pod", "--snapshots", s(&tmp.path().join("none")), "--out", s(&out)]).status.success());
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"case\": \"unsteady-channel\", \"params\": [[0.02]], \"bogus\": 1}").unwrap();
    let o = rom(&["generate", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    let cfg = write_json(&tmp.path().join("exp.json"), &ExperimentConfig { test_params: vec![0], ..tiny_experiment() });
    assert!(!rom(&["experiment", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(!rom(&["no-such-stage"]).status.success());
}

#[test]
fn dims_need_three_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(&tmp.path().join("case.json"), &case());
    let snap = tmp.path().join("snap");
    ok(&["generate", "--config", s(&cfg), "--out", s(&snap)]);
    ok(&["pod", "--snapshots", s(&snap), "--out", s(&tmp.path().join("bases"))]);
    let o = rom(&[
        "assemble",
        "--snapshots",
        s(&snap),
        "--bases",
        s(&tmp.path().join("bases")),
        "--dims",
        "2,2",
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("three values"));
}
