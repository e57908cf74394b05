use std::fs;
use std::path::Path;
use std::process::Command;

use dattile_cli::commands::{
    cmd_cost, cmd_forward, cmd_gen, cmd_search, COST_REPORT, FORWARD_OUTPUT, FORWARD_REPORT, FRONT_CSV, FRONT_SVG,
    SEARCH_REPORT,
};
use dattile_cli::config::SliceMode;
use dattile_cli::RunConfig;
use serde_json::Value;

fn config_in(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.output.dir = dir.to_path_buf();
    c.input.height = 24;
    c.input.width = 24;
    c
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_search(dir: &Path) -> RunConfig {
    let mut c = config_in(dir);
    c.search.h_min = 8;
    c.search.h_max = 12;
    c.search.w_min = 8;
    c.search.w_max = 12;
    c.search.iterations = 4;
    c.search.sample_size = 8;
    c
}

#[test]
fn full_and_single_patch_outputs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut full = config_in(a.path());
    full.slice.mode = SliceMode::Full;
    cmd_forward(&full).unwrap();
    let mut one = config_in(b.path());
    one.slice.h_s = 24;
    one.slice.w_s = 24;
    one.slice.overlap = 2;
    let r = cmd_forward(&one).unwrap();
    assert_eq!(r.fidelity, Some(1.0));
    assert_eq!(
        fs::read(a.path().join(FORWARD_OUTPUT)).unwrap(),
        fs::read(b.path().join(FORWARD_OUTPUT)).unwrap()
    );
}

#[test]
fn forward_report_echoes_config_and_confinement() {
    let d = tempfile::tempdir().unwrap();
    let c = config_in(d.path());
    cmd_forward(&c).unwrap();
    let v = json(&d.path().join(FORWARD_REPORT));
    let echoed: RunConfig = serde_json::from_value(v["config"].clone()).unwrap();
    assert_eq!(echoed, c);
    assert_eq!(v["all_confined"], Value::Bool(true));
    let patches = v["patches"].as_array().unwrap();
    assert_eq!(patches.len(), 2);
    assert!(patches.iter().all(|p| p["confined"] == Value::Bool(true)));
    assert!(v["fidelity"].as_f64().unwrap() <= 1.0);
}

#[test]
fn cost_report_fields() {
    let d = tempfile::tempdir().unwrap();
    let mut c = config_in(d.path());
    c.input.height = 56;
    c.input.width = 56;
    cmd_cost(&c).unwrap();
    let v = json(&d.path().join(COST_REPORT));
    assert_eq!(v["resource"].as_u64(), Some(6960));
    assert_eq!(v["normalized"]["baseline"].as_f64(), Some(1.0));
    let fused = v["normalized"]["fused"].as_f64().unwrap();
    let sliced = v["normalized"]["sliced"].as_f64().unwrap();
    assert!(sliced < fused && fused < 1.0);
    assert_eq!(v["sliced"]["mode"]["sliced"]["h_s"].as_u64(), Some(28));
}

#[test]
fn search_writes_consistent_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small_search(d.path());
    c.search.oracle = true;
    let r = cmd_search(&c).unwrap();
    let csv = fs::read_to_string(d.path().join(FRONT_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("h_s,w_s,overlap,fidelity,resource"));
    assert_eq!(lines.count(), r.front.len());
    let v = json(&d.path().join(SEARCH_REPORT));
    assert_eq!(v["front"].as_array().unwrap().len(), r.front.len());
    assert_eq!(v["seed"].as_u64(), Some(0));
    let audit = &v["audit"];
    assert_eq!(audit["dominated"].as_u64(), Some(0));
    assert!(audit["oracle_front"].is_array());
    let svg = fs::read_to_string(d.path().join(FRONT_SVG)).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn generated_files_round_trip_through_config() {
    let d = tempfile::tempdir().unwrap();
    let c = config_in(d.path());
    let (x, w) = cmd_gen(&c).unwrap();
    let e = tempfile::tempdir().unwrap();
    let mut from_files = config_in(e.path());
    from_files.input.path = Some(x);
    from_files.layer.weights = Some(w);
    from_files.input.seed = 999;
    from_files.layer.seed = 999;
    cmd_forward(&from_files).unwrap();
    let f = tempfile::tempdir().unwrap();
    cmd_forward(&config_in(f.path())).unwrap();
    assert_eq!(
        fs::read(e.path().join(FORWARD_OUTPUT)).unwrap(),
        fs::read(f.path().join(FORWARD_OUTPUT)).unwrap()
    );
}

fn dattile(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dattile")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();

    let (code, _) = dattile(&["--out", out, "--height", "24", "--width", "24", "cost"]);
    assert_eq!(code, 0);

    let (code, err) = dattile(&["--out", out, "cost", "--overlap", "5"]);
    assert_eq!(code, 1, "{err}");

    let missing = d.path().join("missing.fmap");
    let (code, err) = dattile(&["--out", out, "--input", missing.to_str().unwrap(), "forward"]);
    assert_eq!(code, 2, "{err}");

    let bad = d.path().join("bad.fmap");
    fs::write(&bad, b"FMAP\x01\x00\x01\x00\x01\x04\x00\x00\x00").unwrap();
    let (code, err) = dattile(&["--out", out, "--input", bad.to_str().unwrap(), "forward"]);
    assert_eq!(code, 2);
    assert!(err.contains("expected 32 bytes, found 0"), "{err}");

    let (code, err) = dattile(&[
        "--out",
        out,
        "--height",
        "16",
        "--width",
        "16",
        "search",
        "--iterations",
        "2",
        "--r-max",
        "10",
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("r_max = 10"), "{err}");
    assert!(d.path().join(FRONT_CSV).exists());
}

#[test]
fn config_file_then_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    let out = d.path().join("o");
    fs::write(
        &cfg,
        format!(
            "[input]\nheight = 20\nwidth = 20\n[slice]\nh_s = 10\nw_s = 10\n[output]\ndir = {:?}\n",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let (code, err) = dattile(&["--config", cfg.to_str().unwrap(), "forward", "--overlap", "2"]);
    assert_eq!(code, 0, "{err}");
    let v = json(&out.join(FORWARD_REPORT));
    assert_eq!(v["config"]["slice"]["h_s"].as_u64(), Some(10));
    assert_eq!(v["config"]["slice"]["overlap"].as_u64(), Some(2));
    assert_eq!(v["patches"].as_array().unwrap().len(), 4);
}
