use std::path::Path;
use std::process::{Command, Output};

use crsnas::archbuilder::NetworkIR;
use crsnas::objective::{read_trajectory, TRAJECTORY_HEADER};

fn crsnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crsnas"))
        .args(args)
        .env_remove("CRSNAS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn space_info_segnas11() {
    let o = crsnas(&["space-info", "--space", "segnas11"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("cardinality: 141178800"), "{text}");
    assert!(text.contains("population: 120"), "{text}");
}

#[test]
fn space_info_from_definition_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("space.json");
    std::fs::write(
        &path,
        crsnas::SearchSpace::preset("segnas4").unwrap().to_json(),
    )
    .unwrap();
    let o = crsnas(&["space-info", "--space", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("cardinality: 400"));

    std::fs::write(&path, r#"{"variant": "broken", "dimensions": []}"#).unwrap();
    let o = crsnas(&["space-info", "--space", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_reports_violations() {
    let o = crsnas(&["validate", "--ops", "0,2,2", "--nodes", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    assert!(text.contains(" 0  0  2"), "{text}");
    assert!(text.contains("node 2"), "{text}");
}

#[test]
fn usage_errors() {
    assert_eq!(crsnas(&[]).status.code(), Some(1));
    assert_eq!(crsnas(&["search"]).status.code(), Some(1));
    assert_eq!(crsnas(&["search", "--space", "segnas4", "--evaluator", "magic"]).status.code(), Some(1));
    assert_eq!(crsnas(&["search", "--space", "segnas4", "--evaluator", "external"]).status.code(), Some(1));
    assert_eq!(crsnas(&["--version"]).status.code(), Some(0));
}

#[test]
fn build_writes_ir_file() {
    let dir = tempfile::tempdir().unwrap();
    let ir_path = dir.path().join("ir.json");
    let o = crsnas(&[
        "build",
        "--space",
        "segnas7",
        "--config",
        "n=16;p=4;sup=0;res=1;nodes=4;ops=6,2,3,0,4,3",
        "--shape",
        "64,32,32",
        "--ir-out",
        ir_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ir = NetworkIR::from_json(&std::fs::read_to_string(&ir_path).unwrap()).unwrap();
    assert_eq!(ir.megablock_channels(), vec![16, 32, 64, 128, 256, 128, 64, 32, 16]);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["resources"]["oom"], false);
}

#[test]
fn search_too_small_budget_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = crsnas(&["search", "--space", "segnas11", "--iters", "50", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn read_run(dir: &Path) -> (serde_json::Value, Vec<crsnas::objective::TrajectoryRow>, String) {
    let manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let csv = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), TRAJECTORY_HEADER.join(","));
    let rows = read_trajectory(csv.as_bytes()).unwrap();
    (manifest, rows, csv)
}

#[test]
fn search_writes_run_directory_and_plot() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_crsnas"))
        .args(["search", "--space", "segnas4", "--evaluator", "arch-surrogate", "--seed", "5", "--iters", "120"])
        .args(["--shape", "64", "--classes", "4"])
        .env("CRSNAS_OUT_DIR", root.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.path().join("segnas4-arch-surrogate-s5");
    let (manifest, rows, _) = read_run(&dir);
    assert_eq!(rows.len(), 120);
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["evaluator"]["id"], "arch-surrogate");
    assert_eq!(manifest["evaluator"]["parameters"]["target_params"], 5e6);
    assert_eq!(manifest["budget_bytes"], 16u64 << 30);
    let best = rows.iter().map(|r| r.f).fold(f64::INFINITY, f64::min);
    assert_eq!(manifest["summary"]["best_f"].as_f64().unwrap(), best);
    // segnas4 fixes a legal block, so every point trains
    assert!(rows.iter().all(|r| r.outcome == "trained"));
    assert!(rows.iter().any(|r| r.cache_hit), "400 points in 120 draws should repeat");
    assert!(dir.join("best_ir.json").is_file());

    let plot = dir.join("plot.csv");
    let o = crsnas(&["export-plot", "--trajectory", dir.join("trajectory.csv").to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(plot).unwrap();
    assert_eq!(text.lines().count(), 121);
    assert!(text.starts_with("iteration,outcome,f,best_f,dice,best_dice,cache_hit,effective\n"));
}

#[test]
fn analytic_search_skips_network_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = crsnas(&["search", "--space", "segnas11", "--evaluator", "step-sphere", "--seed", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (_, rows, _) = read_run(dir.path());
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r.outcome == "trained"));
    assert!(rows.iter().all(|r| r.wall_seconds == 0.0));
}

#[test]
fn no_mutation_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = crsnas(&["search", "--space", "segnas4", "--evaluator", "sphere", "--no-mutation", "--iters", "80", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (manifest, rows, _) = read_run(dir.path());
    assert_eq!(manifest["mutation"], false);
    assert_eq!(rows.len(), 80);
}

#[test]
fn external_search_with_mock_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("trainer.sh");
    std::fs::write(&script, "#!/bin/sh\ncat >/dev/null\necho '{\"status\":\"ok\",\"dice\":0.25}'\n").unwrap();
    let out = dir.path().join("run");
    let o = crsnas(&[
        "search", "--space", "segnas4", "--evaluator", "external", "--iters", "60", "--shape", "32",
        "--trainer", "/bin/sh", "--trainer-arg", script.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (manifest, rows, _) = read_run(&out);
    assert_eq!(manifest["evaluator"]["kind"], "external_trainer");
    assert!(rows.iter().all(|r| (r.f - 4f64.ln()).abs() < 1e-12));
}

#[test]
fn segnas4_search_is_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let csvs: Vec<String> = dirs
        .iter()
        .map(|d| {
            let o = crsnas(&[
                "search", "--space", "segnas4", "--evaluator", "arch-surrogate", "--seed", "7", "--iters", "50",
                "--out", d.path().to_str().unwrap(),
            ]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
            read_run(d.path()).2
        })
        .collect();
    assert_eq!(csvs[0], csvs[1]);
}
