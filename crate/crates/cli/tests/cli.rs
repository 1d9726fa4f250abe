use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use fspm_core::engine::SimConfig;
use fspm_core::ingest::{canonical_json, Dataset};
use fspm_core::synthetic;

fn fspm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fspm")).args(args).output().expect("run fspm")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ingest_fixtures(out: &Path) -> Output {
    fspm(&[
        "ingest",
        "--axes",
        s(&fixture("axes.csv")),
        "--gus",
        s(&fixture("gus.csv")),
        "--internodes",
        s(&fixture("internodes.csv")),
        "--leaves",
        s(&fixture("leaves.csv")),
        "--out",
        s(out),
    ])
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn ingest_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tree.json");
    let o = ingest_fixtures(&out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("tree.json")).unwrap());
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "ingest");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = fspm(&["simulate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(o.stdout.is_empty());
}

#[test]
fn validation_error_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let bad = dir.path().join("axes.csv");
    fs::write(&bad, "tree_id,axis_id,insertion_ca\nt,m,0\n").unwrap();
    let o = fspm(&[
        "ingest",
        "--axes",
        s(&bad),
        "--gus",
        s(&fixture("gus.csv")),
        "--internodes",
        s(&fixture("internodes.csv")),
        "--leaves",
        s(&fixture("leaves.csv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parent_axis_id"));
    assert!(!out.exists());
}

#[test]
fn pipeline_stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ingest_fixtures(&d.join("ingest")).status.success());
    let tree = d.join("ingest/tree.json");
    let classify = |out: &Path| fspm(&["classify-pa", "--tree", s(&tree), "--k", "5", "--out", s(out)]);
    assert!(classify(&d.join("c1")).status.success());
    assert!(classify(&d.join("c2")).status.success());
    for f in ["pa_map.json", "targets.json", "clusters.json"] {
        assert_eq!(fs::read(d.join("c1").join(f)).unwrap(), fs::read(d.join("c2").join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_json(&d.join("c1/manifest.json"))["config_hash"], read_json(&d.join("c2/manifest.json"))["config_hash"]);
    assert_eq!(fs::read(d.join("c1/pa_map.json")).unwrap(), fs::read(fixture("pa_map.json")).unwrap());
    assert_eq!(fs::read(d.join("c1/targets.json")).unwrap(), fs::read(fixture("targets.json")).unwrap());

    let pa = d.join("c1/pa_map.json");
    let o = fspm(&["estimate", "--tree", s(&tree), "--pa-map", s(&pa), "--out", s(&d.join("est"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let params = d.join("est/direct_params.json");
    let hidden = d.join("hidden.json");
    fs::write(&hidden, r#"{"q0": {"tree1": 14.23, "tree2": 0.97, "tree3": 47.23, "tree4": 10.94}, "rp": 6.4319, "pc": 0.13882}"#).unwrap();

    let simulate = |out: &Path| {
        fspm(&["simulate", "--tree", s(&tree), "--pa-map", s(&pa), "--params", s(&params), "--hidden", s(&hidden), "--out", s(out)])
    };
    assert!(simulate(&d.join("s1")).status.success());
    assert!(simulate(&d.join("s2")).status.success());
    for t in ["tree1", "tree2", "tree3", "tree4"] {
        for kind in ["trace", "organs"] {
            let f = format!("{t}.{kind}.csv");
            assert_eq!(fs::read(d.join("s1").join(&f)).unwrap(), fs::read(d.join("s2").join(&f)).unwrap());
        }
    }

    let skeleton = |out: &Path, seed: &str| {
        fspm(&[
            "export-skeleton",
            "--tree",
            s(&tree),
            "--pa-map",
            s(&pa),
            "--params",
            s(&params),
            "--hidden",
            s(&hidden),
            "--seed",
            seed,
            "--out",
            s(out),
        ])
    };
    assert!(skeleton(&d.join("k1"), "5").status.success());
    assert!(skeleton(&d.join("k2"), "5").status.success());
    assert!(skeleton(&d.join("k3"), "6").status.success());
    let a = fs::read_to_string(d.join("k1/tree2.skeleton.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("k2/tree2.skeleton.csv")).unwrap());
    assert_ne!(a, fs::read_to_string(d.join("k3/tree2.skeleton.csv")).unwrap());
    assert!(a.starts_with("segment_id,parent_id,x0,y0,z0,x1,y1,z1,radius_cm\n"));
    let entries: Vec<_> = fs::read_dir(d.join("k1")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries.iter().filter(|n| *n == "manifest.json").count(), 1);
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dp = synthetic::fixture_direct_params();
    let hidden: Vec<_> = (0..4).map(synthetic::reference_hidden).collect();
    let m = synthetic::noiseless_measurements(&dp, &hidden, &SimConfig::default());
    fs::write(d.join("tree.json"), canonical_json(&Dataset::from_measurements(m).unwrap())).unwrap();
    fs::write(d.join("pa_map.json"), canonical_json(&synthetic::reference_pa_map())).unwrap();
    fs::write(d.join("direct_params.json"), canonical_json(&dp)).unwrap();

    let out = d.join("fit");
    let o = fspm(&[
        "fit",
        "--tree",
        s(&d.join("tree.json")),
        "--pa-map",
        s(&d.join("pa_map.json")),
        "--params",
        s(&d.join("direct_params.json")),
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = read_json(&out.join("fit_result.json"));
    assert_eq!(fit["converged"], true);
    assert!(rel(fit["rp"].as_f64().unwrap(), synthetic::REFERENCE_RP) < 0.01);
    assert!(rel(fit["pc"].as_f64().unwrap(), synthetic::REFERENCE_PC) < 0.01);
    for (i, t) in ["tree1", "tree2", "tree3", "tree4"].iter().enumerate() {
        assert!(rel(fit["q0"][t].as_f64().unwrap(), synthetic::REFERENCE_Q0[i]) < 0.02, "{t}");
        for family in ["diameter_per_gu", "mass_per_gu", "cum_internode", "cum_blade"] {
            let csv = fs::read_to_string(out.join(format!("{t}.{family}.csv"))).unwrap();
            let mut lines = csv.lines();
            assert_eq!(lines.next(), Some("key,measured,simulated"));
            // Relative RMSE of simulated against measured, recomputed from the file.
            let errs: Vec<f64> = lines
                .map(|l| {
                    let f: Vec<&str> = l.split(',').collect();
                    let (m, v): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
                    (v - m) / m
                })
                .collect();
            assert!(!errs.is_empty());
            let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            assert!(rmse < 1e-3, "{t} {family}: {rmse}");
        }
    }
    for key in ["sse", "iterations", "per_tree_sse"] {
        assert!(fit.get(key).is_some(), "{key}");
    }
}

#[test]
fn fit_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ingest_fixtures(&d.join("in")).status.success());
    let tree = d.join("in/tree.json");
    let dp = synthetic::fixture_direct_params();
    fs::write(d.join("direct_params.json"), canonical_json(&dp)).unwrap();
    fs::write(d.join("pa_map.json"), canonical_json(&synthetic::reference_pa_map())).unwrap();
    let o = fspm(&[
        "fit",
        "--tree",
        s(&tree),
        "--pa-map",
        s(&d.join("pa_map.json")),
        "--params",
        s(&d.join("direct_params.json")),
        "--n-starts",
        "0",
        "--max-iterations",
        "1",
        "--out",
        s(&d.join("fit")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&d.join("fit/fit_result.json"))["converged"], false);
}

#[test]
fn bench_substructure_reports_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = fspm(&["bench-substructure", "--cycles", "30", "--k", "5", "--branching", "2", "--out", s(dir.path())]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let organs: u64 = stdout.lines().find_map(|l| l.strip_prefix("organs ")).unwrap().parse().unwrap();
    assert!(organs > 1_000_000);
    assert!(dir.path().join("organs.csv").exists());
}

#[test]
fn pipe_mode_rejected_by_factored_bench() {
    let o = fspm(&["bench-substructure", "--ring-mode", "pipe"]);
    assert_eq!(o.status.code(), Some(1));
}
