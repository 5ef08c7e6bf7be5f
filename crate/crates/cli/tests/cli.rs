use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vimoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vimoe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Exit code and the single JSON summary line.
fn run(args: &[&str], cwd: &Path) -> (i32, Value) {
    let out = vimoe(args, cwd);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {stdout:?}, stderr: {}", String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap(), serde_json::from_str(lines[0]).unwrap())
}

const TINY: &str = "embed_dim=16\ndepth=3\nheads=2\nmlp_ratio=2\nnum_classes=4\nnum_experts=4\nmoe_last_l=2\nshared_expert=true\nepochs=2\nbatch_size=8\nwarmup_epochs=1\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(
        &["data", "gen", "--task", "cls", "--classes", "4", "--count", "24", "--test-count", "8", "--seed", "3", "--out", "d"],
        dir.path(),
    );
    assert_eq!(code, 0);
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn count_params_reports_table_values() {
    let dir = tempfile::tempdir().unwrap();
    let (code, s) = run(
        &["count", "params", "--preset", "vit-s-14", "--experts", "8", "--last-l", "2", "--shared"],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert_eq!(s["command"], "count params");
    assert_eq!(s["total_m"], "40.9M");
    assert_eq!(s["activated_m"], "24.4M");

    let (_, f) = run(&["count", "flops", "--preset", "vit-s-14", "--last-l", "0"], dir.path());
    let g = f["flops"].as_u64().unwrap() as f64 / 1e9;
    assert!((g - 6.14).abs() / 6.14 < 0.03, "{g}");
}

#[test]
fn degree_verb() {
    let dir = tempfile::tempdir().unwrap();
    let (code, s) = run(&["degree", "--experts", "2", "--topk", "1", "--last-l", "5"], dir.path());
    assert_eq!(code, 0);
    assert_eq!(s["degree"], 32);
    let (_, big) = run(&["degree", "--experts", "64", "--topk", "2", "--last-l", "8"], dir.path());
    assert_eq!(big["degree"], "272850165903965395454263296");
    let (code, _) = run(&["degree", "--experts", "64", "--topk", "2", "--last-l", "12"], dir.path());
    assert_eq!(code, 3);
}

#[test]
fn training_is_byte_reproducible_and_analyzable() {
    let dir = workspace();
    let p = dir.path();
    let train = |out: &str| {
        let (code, s) = run(
            &["train", "--config", "tiny.cfg", "--data", "d/train.vimd", "--eval-data", "d/test.vimd", "--seed", "5", "--out", out],
            p,
        );
        assert_eq!(code, 0, "{s}");
        assert_eq!(s["epochs_completed"], 2);
        s
    };
    let a = train("r1");
    train("r2");
    for f in ["model.vimo", "run.csv", "routing.vimr"] {
        assert_eq!(std::fs::read(p.join("r1").join(f)).unwrap(), std::fs::read(p.join("r2").join(f)).unwrap(), "{f}");
    }
    let metric = a["final_metric"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&metric));

    let (code, e) = run(&["eval", "--checkpoint", "r1/model.vimo", "--data", "d/test.vimd", "--out", "ev"], p);
    assert_eq!(code, 0);
    assert_eq!(e["metric"].as_f64().unwrap(), a["eval_metric"].as_f64().unwrap());
    assert_eq!(std::fs::read(p.join("ev/routing.vimr")).unwrap(), std::fs::read(p.join("r1/routing.vimr")).unwrap());

    let (code, h) = run(&["analyze", "heatmap", "--log", "r1/routing.vimr", "--layer", "1", "--out", "an"], p);
    assert_eq!(code, 0);
    assert_eq!(h["heatmaps"][0], "an/heatmap_l1.csv");
    assert!(p.join("an/heatmap_l1.csv").exists());
    let (_, r) = run(&["analyze", "recommend", "--log", "r1/routing.vimr", "--out", "an"], p);
    assert_eq!(r["scores"].as_array().unwrap().len(), 2);
    let (_, l) = run(&["analyze", "load", "--log", "r1/routing.vimr", "--out", "an"], p);
    let load: f64 = l["loads"][0]["load"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((load - 1.0).abs() < 1e-12);
    let (_, d) = run(&["analyze", "degree", "--log", "r1/routing.vimr"], p);
    assert!(d["empirical_degree"].as_u64().unwrap() <= 16);

    // layer 3 is a dense block in this config
    let (code, _) = run(&["analyze", "heatmap", "--log", "r1/routing.vimr", "--layer", "3", "--out", "an"], p);
    assert_eq!(code, 1);
    // allocation maps need token routing
    let (code, _) = run(&["analyze", "allocmap", "--log", "r1/routing.vimr", "--out", "an"], p);
    assert_eq!(code, 1);
}

#[test]
fn segmentation_allocation_map() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    run(&["data", "gen", "--task", "seg", "--classes", "4", "--count", "8", "--seed", "1", "--out", "d"], p);
    std::fs::write(p.join("seg.cfg"), format!("task=segmentation\n{TINY}epochs=1\n")).unwrap();
    let (code, _) = run(&["train", "--config", "seg.cfg", "--data", "d/train.vimd", "--out", "r"], p);
    assert_eq!(code, 0);
    let (code, s) = run(&["analyze", "allocmap", "--log", "r/routing.vimr", "--layer", "1", "--item", "3", "--scale", "2", "--out", "a"], p);
    assert_eq!(code, 0);
    let ppm = std::fs::read(p.join(s["maps"][0].as_str().unwrap())).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), 11 + 8 * 8 * 3);
}

#[test]
fn scan_writes_one_row_per_cell() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("scan.cfg"), format!("{TINY}epochs=1\n")).unwrap();
    let (code, s) = run(
        &["scan", "--config", "scan.cfg", "--data", "d/train.vimd", "--eval-data", "d/test.vimd", "--last-l", "0,1", "--experts", "2", "--out", "s"],
        p,
    );
    assert_eq!(code, 0, "{s}");
    assert_eq!(s["cells"], 3);
    assert_eq!(s["failed"], 0);
    let csv = std::fs::read_to_string(p.join("s/scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let p = dir.path();

    let out = vimoe(&["train", "--bogus"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(vimoe(&["frobnicate"], p).status.code(), Some(1));
    assert_eq!(vimoe(&["--help"], p).status.code(), Some(0));

    let (code, s) = run(&["eval", "--checkpoint", "missing.vimo", "--data", "d/test.vimd", "--out", "e"], p);
    assert_eq!(code, 2);
    assert!(s["error"].as_str().unwrap().contains("missing.vimo"));

    std::fs::write(p.join("bad.cfg"), "epochs=1\nno_such_key=3\n").unwrap();
    let (code, _) = run(&["train", "--config", "bad.cfg", "--data", "d/train.vimd", "--out", "r"], p);
    assert_eq!(code, 1);

    let mut bytes = std::fs::read(p.join("d/train.vimd")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(p.join("corrupt.vimd"), bytes).unwrap();
    let (code, _) = run(&["train", "--config", "tiny.cfg", "--data", "corrupt.vimd", "--out", "r"], p);
    assert_eq!(code, 2);

    std::fs::write(p.join("hot.cfg"), format!("{TINY}peak_lr=1e300\nwarmup_epochs=0\nweight_decay=0\n")).unwrap();
    let (code, s) = run(&["train", "--config", "hot.cfg", "--data", "d/train.vimd", "--out", "h"], p);
    assert_eq!(code, 3);
    assert!(s["epochs_completed"].as_u64().unwrap() < 2);
    assert!(p.join("h/run.csv").exists());
    assert!(!p.join("h/model.vimo").exists());
}
