use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obstacle_core::grid::{GridSpec, ScalarField};
use obstacle_core::snapshot::to_string as snapshot_string;
use serde_json::Value;
use tempfile::TempDir;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obstacle-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Write `body` as a config whose output goes to `<dir>/<name>`.
fn config(dir: &Path, name: &str, body: &str) -> (PathBuf, PathBuf) {
    let out = dir.join(name);
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, format!("output_dir = {:?}\n{body}", out.display().to_string())).unwrap();
    (path, out)
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn run(cfg: &Path) -> Output {
    lab(&["run", cfg.to_str().unwrap()])
}

const RADIAL: &str = r#"
[scenario]
name = "radial2d"

[grid]
cells = [128]

[analysis]
radii = [0.12, 0.09, 0.06]
auto_points = 12

[analysis.acf]
radii = [0.0625, 0.125, 0.25]
direction = [0.0, 1.0]
center = [0.5, 0.0]
"#;

#[test]
fn scenario_list_and_filters() {
    let all = lab(&["scenario", "list"]);
    assert_eq!(code(&all), 0);
    let text = String::from_utf8(all.stdout).unwrap();
    assert_eq!(text.lines().count(), 7, "{text}");
    let two = lab(&["scenario", "list", "--filter", "dim=2"]);
    assert_eq!(code(&two), 0);
    let text = String::from_utf8(two.stdout).unwrap();
    assert!(text.lines().count() >= 1);
    for line in text.lines() {
        let dims = line.split_whitespace().nth(1).unwrap();
        assert!(dims.split(',').any(|d| d == "2"), "{line}");
    }
    let bad = lab(&["scenario", "list", "--filter", "size=2"]);
    assert_ne!(code(&bad), 0);
    assert!(stderr(&bad).contains("unknown filter key"));
}

#[test]
fn radial2d_run_is_regular_only() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = config(tmp.path(), "radial", RADIAL);
    let o = run(&cfg);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["schema_version"], 1);
    let rows = r["grids"][0]["analysis"]["classification"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    for c in rows {
        assert_eq!(c["verdict"]["kind"], "regular", "{c}");
    }
    assert!(r["grids"][0]["solver"]["converged"].as_bool().unwrap());
    let csv = fs::read_to_string(out.join("classification.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("cells,h,scenario,R,point,x1,x2,verdict,r,quad_res,half_res"), "{header}");
    assert!(csv.lines().skip(1).all(|l| l.starts_with("128,0.015625,radial2d,0.5,")));
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = config(tmp.path(), "first", RADIAL);
    assert_eq!(code(&run(&cfg)), 0);
    let echo = out.join("config.toml");
    let first: Vec<Vec<u8>> = ["classification.csv", "acf.csv", "telemetry.csv"]
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();
    let echoed: toml::Value = toml::from_str(&fs::read_to_string(&echo).unwrap()).unwrap();
    let reported: toml::Value = serde_json::from_value(report(&out)["config"].clone()).unwrap();
    assert_eq!(echoed, reported);
    // the echo writes to the same directory; every table must come back unchanged
    let again = run(&echo);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    for (k, n) in ["classification.csv", "acf.csv", "telemetry.csv"].iter().enumerate() {
        assert_eq!(fs::read(out.join(n)).unwrap(), first[k], "{n}");
    }
}

#[test]
fn analyze_matches_run_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = config(tmp.path(), "run", RADIAL);
    assert_eq!(code(&run(&cfg)), 0);
    let (cfg2, out2) = config(tmp.path(), "analyze", RADIAL);
    let snap = out.join("u_128.txt");
    let o = lab(&["analyze", snap.to_str().unwrap(), cfg2.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["classification.csv", "acf.csv"] {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(out2.join(name)).unwrap(), "{name}");
    }
    assert!(!out2.join("telemetry.csv").exists());
    assert_eq!(report(&out2)["mode"], "analyze");
}

#[test]
fn analyze_sampled_quadratic_is_singular_of_order_one() {
    let tmp = TempDir::new().unwrap();
    let g = GridSpec::cube(2, -1.0, 1.0, 128).unwrap();
    let f = ScalarField::sample(&g, |x| 0.5 * x[0] * x[0]).unwrap();
    let snap = tmp.path().join("quad.txt");
    fs::write(&snap, snapshot_string(&f)).unwrap();
    let body = r#"
[scenario]
name = "poly"

[grid]
dim = 2
cells = [128]

[analysis]
radii = [0.4, 0.2, 0.1]
points = [[0.0, -0.3], [0.0, 0.0], [0.0, 0.3]]
"#;
    let (cfg, out) = config(tmp.path(), "quad", body);
    let o = lab(&["analyze", snap.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&out);
    for c in r["grids"][0]["analysis"]["classification"].as_array().unwrap() {
        assert_eq!(c["verdict"]["kind"], "singular", "{c}");
        assert_eq!(c["verdict"]["n"], 1, "{c}");
    }
}

#[test]
fn input_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    // δ larger than the box
    let (cfg, _) = config(
        tmp.path(),
        "delta",
        "[scenario]\nname = \"pinch3d\"\n[grid]\ncells = [16]\n[analysis]\ndelta = 3.0\n",
    );
    let o = run(&cfg);
    assert_eq!(code(&o), 1);
    let msg = stderr(&o);
    assert!(msg.contains("δ") && msg.contains("analysis.delta") && msg.contains("line 7"), "{msg}");

    // syntax error carries a line
    let (cfg, _) = config(tmp.path(), "syntax", "[scenario]\nname = \"radial2d\n[grid]\ncells = [16]\n");
    let o = run(&cfg);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    // truncated snapshot reports a byte offset
    let g = GridSpec::cube(2, -1.0, 1.0, 16).unwrap();
    let text = snapshot_string(&ScalarField::sample(&g, |x| x[0]).unwrap());
    let snap = tmp.path().join("cut.txt");
    fs::write(&snap, &text[..text.len() / 2]).unwrap();
    let (cfg, _) = config(tmp.path(), "cut", "[scenario]\nname = \"radial2d\"\n[grid]\ncells = [16]\n");
    let o = lab(&["analyze", snap.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));

    // snapshot grid must match the config
    let (cfg, _) = config(tmp.path(), "mismatch", "[scenario]\nname = \"radial2d\"\n[grid]\ncells = [32]\n");
    fs::write(&snap, &text).unwrap();
    let o = lab(&["analyze", snap.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));

    let o = lab(&["run", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn non_convergence_exits_two() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = config(
        tmp.path(),
        "slow",
        "[scenario]\nname = \"radial2d\"\n[grid]\ncells = [32]\n[solver]\nmax_iter = 5\n",
    );
    let o = run(&cfg);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["exit_code"], 2);
    assert_eq!(r["grids"][0]["solver"]["converged"], false);
}

#[test]
fn degenerate_diagnostics_exit_three() {
    let tmp = TempDir::new().unwrap();
    // the disk center has a flat blow-up; nothing defines a kernel there
    let (cfg, out) = config(
        tmp.path(),
        "flat",
        "[scenario]\nname = \"radial2d\"\n[grid]\ncells = [32]\n[analysis]\nx0 = [0.0, 0.0]\ndelta = 0.5\npoints = [[0.5, 0.0]]\n",
    );
    let o = run(&cfg);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let r = report(&out);
    assert!(!r["grids"][0]["failures"].as_array().unwrap().is_empty());
}

#[test]
fn pinch3d_applicability_reports_both_readings() {
    let tmp = TempDir::new().unwrap();
    let body = r#"
lambda_star = 6

[scenario]
name = "pinch3d"

[grid]
cells = [32, 48]

[analysis]
x0 = [0.0, 0.0, 0.0]
points = [[0.0, 0.0, 0.5]]
"#;
    let (cfg, out) = config(tmp.path(), "pinch", body);
    let o = run(&cfg);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&out);
    let grids = r["grids"].as_array().unwrap();
    assert_eq!(grids.len(), 2);
    for g in grids {
        let ap = &g["analysis"]["applicability"];
        assert_eq!(ap["n"], 1);
        assert_eq!(ap["configured"]["lambda_star"], 6);
        assert_eq!(ap["configured"]["holds"], false);
        assert_eq!(ap["conjectured"]["holds"], true);
    }
    let csv = fs::read_to_string(out.join("telemetry.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("32,")) && csv.lines().any(|l| l.starts_with("48,")));
}

#[test]
fn pinch3d_cross_sections_and_svg() {
    let tmp = TempDir::new().unwrap();
    let body = r#"
[scenario]
name = "pinch3d"

[grid]
cells = [48]

[analysis]
x0 = [0.0, 0.0, 0.0]
points = [[0.0, 0.0, 0.5]]
delta = 0.5
svg = true
dump_mask = true
"#;
    let (cfg, out) = config(tmp.path(), "sections", body);
    let o = run(&cfg);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("cross_sections.csv")).unwrap();
    assert!(csv.starts_with("cells,h,scenario,eps,xpp,d,t_prime_1,t_prime_2,closeness,nu\n"));
    assert!(csv.lines().count() > 2);
    assert!(fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".svg")));
    assert!(out.join("mask_48.txt").exists());
    let r = report(&out);
    assert!(r["grids"][0]["analysis"]["diameter_profile"]["exponent"].is_number());
}
