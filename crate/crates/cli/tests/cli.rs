use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowdeblur::evalkit::{Motion, SceneSpec};
use flowdeblur::io;
use flowdeblur::pipeline::{EnergyRecord, Stage};
use flowdeblur::{FlowField, SolverParams};
use flowdeblur_cli::{resolve_inputs, CliError, DutySource, RunManifest, EXIT_INPUT, EXIT_SOLVER, MANIFEST};

fn flowdeblur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowdeblur"))
        .args(args)
        .env_remove("FLOWDEBLUR_THREADS")
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::from_json(&fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

fn tiny_spec(tau: f64, motion: [f64; 2]) -> SceneSpec {
    SceneSpec {
        width: 24,
        height: 20,
        frames: 3,
        tau,
        seed: 3,
        channels: 1,
        background: Motion::Translation { velocity: motion },
        objects: Vec::new(),
    }
}

fn write_spec(dir: &Path, spec: &SceneSpec) -> String {
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(spec).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn manifest_round_trips() {
    let mut metrics = BTreeMap::new();
    metrics.insert("psnr".to_string(), f64::INFINITY);
    metrics.insert("epe".to_string(), 0.1 + 0.2);
    metrics.insert("tiny".to_string(), 5e-324);
    let mut timings = BTreeMap::new();
    timings.insert("solve".to_string(), 1.0 / 3.0);
    let m = RunManifest {
        command: "deblur".into(),
        input: "seq/*.png".into(),
        inputs: vec!["seq/a.png".into(), "seq/b.png".into()],
        output_dir: "out".into(),
        params: Some(SolverParams {
            duty: Some(0.8),
            ..SolverParams::default()
        }),
        scene: Some(SceneSpec::demo()),
        duty: Some(0.8),
        duty_source: Some(DutySource::User),
        seed: u64::MAX,
        threads: 4,
        energy_log: vec![EnergyRecord {
            level: 1,
            iteration: 2,
            stage: Stage::FilterRejected,
            data: 0.1,
            temporal: 1e-17,
            spatial: 123456.789,
            total: 123456.889,
        }],
        metrics,
        timings,
    };
    let back = RunManifest::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
    assert!(m.to_json().contains("\"inf\""));
}

#[test]
fn inputs_sort_by_file_name() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.png", "a10.png", "a2.png", "notes.txt"] {
        fs::write(dir.path().join(name), b"x").unwrap();
    }
    let files = resolve_inputs(&format!("{}/*.png", s(dir.path()))).unwrap();
    let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
    assert_eq!(names, ["a10.png", "a2.png", "b.png"]);
}

#[test]
fn error_codes() {
    assert_eq!(CliError::Input("x".into()).code(), EXIT_INPUT);
    assert_eq!(CliError::Solver("x".into()).code(), EXIT_SOLVER);
}

#[test]
fn synthesize_demo_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowdeblur(&["synthesize", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..5 {
        for name in [format!("sharp_{i:04}.png"), format!("blurry_{i:04}.png"), format!("gt_fwd_{i:04}.flo")] {
            assert!(dir.path().join(&name).is_file(), "{name}");
        }
        let img = io::read_image(&dir.path().join(format!("sharp_{i:04}.png"))).unwrap();
        assert_eq!(img.dims(), (64, 64));
    }
    let m = manifest(dir.path());
    assert_eq!(m.duty, Some(0.8));
    assert_eq!(m.duty_source, Some(DutySource::Scene));
    assert_eq!(m.scene, Some(SceneSpec::demo()));
}

#[test]
fn synthesize_zero_motion_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &tiny_spec(0.8, [0.0, 0.0]));
    let out_dir = dir.path().join("scene");
    let out = flowdeblur(&["synthesize", "--spec", &spec, "--out", s(&out_dir), "--format", "pgm"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        let a = fs::read(out_dir.join(format!("sharp_{i:04}.pnm"))).unwrap();
        let b = fs::read(out_dir.join(format!("blurry_{i:04}.pnm"))).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(manifest(&out_dir).duty, Some(0.8));
}

#[test]
fn synthesize_rejects_malformed_spec() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"width\": 64").unwrap();
    let out = flowdeblur(&["synthesize", "--spec", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
    let mut spec = tiny_spec(0.8, [1.0, 0.0]);
    spec.tau = 1.5;
    let path = write_spec(dir.path(), &spec);
    let out = flowdeblur(&["synthesize", "--spec", &path, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
}

#[test]
fn deblur_needs_two_frames() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &tiny_spec(0.5, [1.0, 0.0]));
    flowdeblur(&["synthesize", "--spec", &spec, "--out", s(dir.path())]);
    let pattern = format!("{}/blurry_0000.png", s(dir.path()));
    let out = flowdeblur(&["deblur", "--in", &pattern, "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
    assert!(String::from_utf8_lossy(&out.stderr).contains("need ≥ 2 frames"));

    let none = format!("{}/missing_*.png", s(dir.path()));
    let out = flowdeblur(&["deblur", "--in", &none, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
}

#[test]
fn deblur_rejects_corrupt_and_mismatched_frames() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("f0.pgm"), b"P5\n4 4\n255\n").unwrap();
    fs::write(dir.path().join("f1.pgm"), b"P5\n4 4\n255\n").unwrap();
    let pattern = format!("{}/f*.pgm", s(dir.path()));
    let out = flowdeblur(&["deblur", "--in", &pattern, "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));

    let a = flowdeblur::Image::filled(16, 16, 1, 0.5);
    let b = flowdeblur::Image::filled(16, 12, 1, 0.5);
    io::write_image(&dir.path().join("g0.png"), &a).unwrap();
    io::write_image(&dir.path().join("g1.png"), &b).unwrap();
    let pattern = format!("{}/g*.png", s(dir.path()));
    let out = flowdeblur(&["deblur", "--in", &pattern, "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs"));

    let pattern = format!("{}/g0.png", s(dir.path()));
    let out = flowdeblur(&["deblur", "--in", &pattern, "--out", s(dir.path()), "--duty", "often"]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
}

const QUICK: [&str; 10] = [
    "--levels",
    "1",
    "--outer-iters",
    "1",
    "--pd-iters",
    "5",
    "--cg-iters",
    "5",
    "--duty",
    "0.5",
];

#[test]
fn deblur_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &tiny_spec(0.5, [1.0, 0.0]));
    let scene = dir.path().join("scene");
    assert!(flowdeblur(&["synthesize", "--spec", &spec, "--out", s(&scene)]).status.success());
    let pattern = format!("{}/blurry_*.png", s(&scene));
    let log = dir.path().join("energy.jsonl");
    let mut runs = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("run{k}"));
        let mut args = vec!["deblur", "--in", &pattern, "--out", s(&out_dir), "--viz-flow", "--seed", "9"];
        args.extend(QUICK);
        let log_s = log.to_str().unwrap();
        if k == 0 {
            args.extend(["--log", log_s]);
        }
        let out = flowdeblur(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(out_dir);
    }
    let m = manifest(&runs[0]);
    assert_eq!(m.duty, Some(0.5));
    assert_eq!(m.duty_source, Some(DutySource::User));
    assert_eq!(m.seed, 9);
    assert_eq!(m.inputs.len(), 3);
    assert!(!m.energy_log.is_empty());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), m.energy_log.len());

    let mut names: Vec<String> = fs::read_dir(&runs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST)
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "flow_bwd_0001.flo",
            "flow_bwd_0001.png",
            "flow_bwd_0002.flo",
            "flow_bwd_0002.png",
            "flow_fwd_0000.flo",
            "flow_fwd_0000.png",
            "flow_fwd_0001.flo",
            "flow_fwd_0001.png",
            "frame_0000.png",
            "frame_0001.png",
            "frame_0002.png",
        ]
    );
    for n in &names {
        assert_eq!(fs::read(runs[0].join(n)).unwrap(), fs::read(runs[1].join(n)).unwrap(), "{n}");
    }

    // evaluate the run against the scene it came from
    let out = flowdeblur(&["evaluate", "--result", s(&runs[0]), "--truth", s(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.trim_start().starts_with("mean")));
}

#[test]
fn threads_fall_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &tiny_spec(0.5, [0.0, 0.0]));
    let out = Command::new(env!("CARGO_BIN_EXE_flowdeblur"))
        .args(["synthesize", "--spec", &spec, "--out", s(dir.path())])
        .env("FLOWDEBLUR_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(manifest(dir.path()).threads, 3);
    let out = Command::new(env!("CARGO_BIN_EXE_flowdeblur"))
        .args(["--threads", "2", "synthesize", "--spec", &spec, "--out", s(dir.path())])
        .env("FLOWDEBLUR_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(manifest(dir.path()).threads, 2);
}

/// Ground truth laid out as a result directory.
fn truth_as_result(scene: &Path, result: &Path, shift: f64) {
    fs::create_dir_all(result).unwrap();
    for i in 0..3 {
        fs::copy(scene.join(format!("sharp_{i:04}.png")), result.join(format!("frame_{i:04}.png"))).unwrap();
        for (gt, out) in [("gt_fwd", "flow_fwd"), ("gt_bwd", "flow_bwd")] {
            let f = io::read_flo(&scene.join(format!("{gt}_{i:04}.flo"))).unwrap();
            let shifted = FlowField::from_parts(
                f.width(),
                f.height(),
                f.u.iter().map(|u| u + shift).collect(),
                f.v.clone(),
            )
            .unwrap();
            io::write_flo(&result.join(format!("{out}_{i:04}.flo")), &shifted).unwrap();
        }
    }
}

#[test]
fn evaluate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &tiny_spec(0.5, [1.0, 0.5]));
    let scene = dir.path().join("scene");
    assert!(flowdeblur(&["synthesize", "--spec", &spec, "--out", s(&scene)]).status.success());

    let exact = dir.path().join("exact");
    truth_as_result(&scene, &exact, 0.0);
    let out = flowdeblur(&["evaluate", "--result", s(&exact), "--truth", s(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exact.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert_eq!(report["summary"]["mean_psnr"], "inf");
    assert_eq!(report["summary"]["mean_epe"], 0.0);
    assert_eq!(report["summary"]["flows"], 6);

    let shifted = dir.path().join("shifted");
    truth_as_result(&scene, &shifted, 1.0);
    let path = dir.path().join("shifted.json");
    let out = flowdeblur(&["evaluate", "--result", s(&shifted), "--truth", s(&scene), "--report", s(&path)]);
    assert!(out.status.success());
    let report: flowdeblur_cli::EvalReport = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!((report.summary.mean_epe.unwrap() - 1.0).abs() < 1e-6);
    assert!(report.rows.iter().all(|r| r.psnr == Some(f64::INFINITY)));

    // a frame of the wrong size
    io::write_image(&shifted.join("frame_0001.png"), &flowdeblur::Image::filled(8, 8, 1, 0.0)).unwrap();
    let out = flowdeblur(&["evaluate", "--result", s(&shifted), "--truth", s(&scene)]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
}
