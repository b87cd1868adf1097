use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlsplash::io::{read_frame, write_model};
use mlsplash::neural::ModelBundle;
use mlsplash::particles::Role;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlsplash"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mlsplash")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "mlsplash {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn pool_config(dir: &Path) -> String {
    write(
        dir,
        "pool.json",
        r#"{"dim": 2, "seed": 3,
            "scene": {"kind": "pool", "res": [24, 24], "h": 0.02, "pool_depth": 0.5, "jitter": 0.0},
            "simulate": {"mode": "flip", "frames": 10}}"#,
    )
}

fn rain_config(dir: &Path) -> String {
    write(
        dir,
        "rain.json",
        r#"{"dim": 2, "seed": 4, "scenes": 2,
            "scene": {"kind": "droplet_rain", "res": [32, 32], "h": 0.01, "duration": 0.3,
                      "droplet_count": [2, 3], "droplet_velocity": [[-0.5, 0.5], [-3.0, -2.0]]},
            "simulate": {"frames": 6}}"#,
    )
}

fn frame_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("frames"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    v.sort();
    v
}

#[test]
fn still_pool_dumps_every_frame_without_splashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = pool_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let frames = frame_files(&out);
    assert_eq!(frames.len(), 10);
    for f in &frames {
        let dump = read_frame(f).unwrap();
        assert!(!dump.is_empty());
        assert_eq!(dump.count(Role::Splash), 0);
        assert_eq!(dump.count(Role::Secondary), 0);
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["finished"].is_number());
    assert!(fs::read_to_string(out.join("stats.csv")).unwrap().lines().count() >= 12);
}

#[test]
fn inspect_reports_generated_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = rain_config(tmp.path());
    let out = tmp.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let data = out.join("dataset.bin");
    let text = String::from_utf8(ok(&["inspect", data.to_str().unwrap()]).stdout).unwrap();
    assert!(text.contains("kind: dataset"), "{text}");
    assert!(text.contains("dim: 2"), "{text}");
    let field = |name: &str| -> usize {
        text.lines()
            .find_map(|l| l.strip_prefix(name))
            .unwrap_or_else(|| panic!("missing {name} in {text}"))
            .trim()
            .parse()
            .unwrap()
    };
    assert_eq!(field("samples:"), 2 * field("positive:"));
    assert!(out.join("generation.json").exists());
}

#[test]
fn lower_threshold_spawns_more_secondaries() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = rain_config(tmp.path());
    // zero networks predict a splash probability of exactly 0.5
    let model = tmp.path().join("zeros.bin");
    write_model(&model, &ModelBundle::zeros(2, false)).unwrap();
    let spawned = |tau: &str| -> usize {
        let out = tmp.path().join(format!("tau{tau}"));
        ok(&[
            "simulate",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--mode",
            "mlflip-secondary",
            "--model",
            model.to_str().unwrap(),
            "--threshold",
            tau,
        ]);
        frame_files(&out).iter().map(|f| read_frame(f).unwrap().count(Role::Secondary)).sum()
    };
    let low = spawned("0.2");
    let high = spawned("0.8");
    assert!(low > 0, "no secondary particles at threshold 0.2");
    assert_eq!(high, 0);
}

#[test]
fn malformed_configs_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cases = [
        ("syntax.json", "{\"dim\": 2,\n \"scene\": {\"kind\": \"pool\",\n  \"res\": [8, 8] \"h\": 0.1}}", "line 3"),
        (
            "field.json",
            r#"{"dim": 2, "scene": {"kind": "pool", "res": [8, 8], "h": 0.1, "params": {"gravity": [0, -9.8, 0]}}}"#,
            "scene.params.gravity",
        ),
        ("dim.json", r#"{"dim": 4, "scene": {"kind": "pool", "res": [8, 8], "h": 0.1}}"#, "dim"),
    ];
    for (name, text, needle) in cases {
        let cfg = write(tmp.path(), name, text);
        let o = run(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(!o.status.success(), "{name} was accepted");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{name}: {err}");
    }
}

#[test]
fn version_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = pool_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let frame = frame_files(&out)[0].clone();
    let mut bytes = fs::read(&frame).unwrap();
    bytes[9..13].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&frame, &bytes).unwrap();
    let o = run(&["inspect", frame.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("version"), "{err}");
    assert!(err.contains('7'), "{err}");
}

#[test]
fn single_thread_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = rain_config(tmp.path());
    let dump = |name: &str| -> Vec<Vec<u8>> {
        let out = tmp.path().join(name);
        ok(&["--threads", "1", "simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        frame_files(&out).iter().map(|f| fs::read(f).unwrap()).collect()
    };
    let a = dump("a");
    assert_eq!(a.len(), 6);
    assert_eq!(a, dump("b"));
}
