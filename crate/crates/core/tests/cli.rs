//! The `geoslot` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn geoslot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoslot")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = r#"{"n_locations": 10,
 "scene": {"grid_size": 16, "n_objects": 3},
 "train": {"grid_size": 16, "k_slots": 4, "c_slot": 8, "channels": 8, "dec_hidden": 8, "heads": 2,
           "rank": 2, "c_cond": 8, "mix_depth": 1, "d_depth": 4, "n_rows": 2, "epochs": 1, "batch_size": 4}}"#;

#[test]
fn usage_and_help_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&geoslot(&["--help"], d.path())), 0);
    assert_eq!(code(&geoslot(&["train", "--help"], d.path())), 0);
    assert_eq!(code(&geoslot(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&geoslot(&["eval", "--ckpt", "x"], d.path())), 1);
    assert_eq!(code(&geoslot(&["gen-data", "--seed", "abc"], d.path())), 1);
}

#[test]
fn io_and_contract_errors() {
    let d = tempfile::tempdir().unwrap();
    let missing = geoslot(&["eval", "--ckpt", "nope.igeo", "--data", "nowhere"], d.path());
    assert_eq!(code(&missing), 2, "{}", String::from_utf8_lossy(&missing.stderr));
    assert_eq!(code(&geoslot(&["gen-data", "--config", "absent.json"], d.path())), 2);
    std::fs::write(d.path().join("bad.json"), "{\"train\": {\"epochs\": \"many\"}}").unwrap();
    assert_eq!(code(&geoslot(&["gen-data", "--config", "bad.json"], d.path())), 1);
    std::fs::write(d.path().join("tiny.json"), TINY).unwrap();
    assert_eq!(code(&geoslot(&["gen-data", "--config", "tiny.json", "--out", "data"], d.path())), 0);
    let o = geoslot(&["train", "--config", "tiny.json", "--data", "data", "--ablation", "most"], d.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn full_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();
    let run = |args: &[&str]| {
        let o = geoslot(args, p);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["gen-data", "--config", "tiny.json", "--seed", "3", "--out", "data"]);
    assert!(p.join("data/manifest.json").exists());
    run(&["train", "--config", "tiny.json", "--seed", "3", "--data", "data", "--out", "run"]);
    let ckpt = "run/checkpoint.igeo";
    run(&["eval", "--ckpt", ckpt, "--data", "data", "--mode", "vanilla", "--metrics", "m.json"]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["mode"], "vanilla");
    assert!(m["r_at_1"].as_f64().unwrap() <= 1.0);
    run(&["mi-probe", "--ckpt", ckpt, "--data", "data", "--draws", "5", "--out", "probe"]);
    assert!(p.join("probe/mi.json").exists());
    run(&["dpi-check", "--chains", "10", "--out", "dpi"]);
    assert_eq!(std::fs::read_to_string(p.join("dpi/dpi.csv")).unwrap().lines().count(), 11);
    run(&["export-attn", "--ckpt", ckpt, "--data", "data", "--location", "0", "--out", "attn"]);
    for f in ["attention.csv", "routing.csv", "graph.csv", "spectrum.csv"] {
        assert!(p.join("attn").join(f).exists());
    }
    let o = geoslot(&["export-attn", "--ckpt", ckpt, "--data", "data", "--location", "999"], p);
    assert_eq!(code(&o), 1);
}

#[test]
fn grad_check_subcommand_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = geoslot(&["grad-check", "--trials", "40", "--out", "gc"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(d.path().join("gc/grad_check.json").exists());
}
