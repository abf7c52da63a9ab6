use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ensemble-fem"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn converge_single_level_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.csv");
    let o = run(&["converge", "--levels", "1", "--degree", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "level,h,dt,member,E_L2,rate_L2,E_H1,rate_H1");
    assert_eq!(lines.len(), 4);
    for (j, line) in lines[1..].iter().enumerate() {
        let cells: Vec<_> = line.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], "1");
        assert_eq!(cells[3], (j + 1).to_string());
        assert!(cells[4].parse::<f64>().unwrap() > 0.0);
        assert!(cells[5].is_empty() && cells[7].is_empty());
    }
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["factorizations"], 10);
}

#[test]
fn converge_independent_to_stdout() {
    let o = run(&["converge", "--mode", "independent", "--levels", "1", "--degree", "1"]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("level,h,dt,member"));
    let stats: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(stats["factorizations"], 30);
}

#[test]
fn emc_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let plot = dir.path().join("plot.dat");
    for path in [&a, &b] {
        let o = run(&[
            "emc", "--j", "16", "--seed", "3", "--nx", "6", "--dt", "0.05", "--out", path.to_str().unwrap(), "--plot",
            plot.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ja, jb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ja, jb);
    let v: serde_json::Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(v["qoi_samples"].as_array().unwrap().len(), 16);
    assert_eq!(v["mean_field"].as_array().unwrap().len(), 49);
    let rows = std::fs::read_to_string(&plot).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 49);
}

#[test]
fn rate_rejects_sample_count_at_benchmark() {
    let o = run(&["rate", "--j-list", "10,40", "--j0", "40"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("J0"));
}

#[test]
fn rate_small_study() {
    let o = run(&["rate", "--j-list", "2,4", "--j0", "8", "--replicas", "2", "--nx", "4", "--dt", "0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("J,E_L2,E_H1"));
    assert!(lines.next().unwrap().starts_with("2,"));
    assert!(lines.next().unwrap().starts_with("4,"));
}

#[test]
fn unknown_flag_exits_one() {
    let o = run(&["emc", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn refusal_exits_two_with_report() {
    let o = run(&["emc", "--j", "640", "--nx", "4", "--dt", "0.1", "--refuse-unstable"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let report = err.lines().find(|l| l.starts_with('{')).expect("report line");
    let v: serde_json::Value = serde_json::from_str(report).unwrap();
    assert_eq!(v["satisfied"], false);
    assert!(v["margin"].as_f64().unwrap() < 0.0);
}

#[test]
fn unstable_ensemble_is_split_by_default() {
    let o = run(&["emc", "--j", "640", "--nx", "4", "--dt", "0.1"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["groups"].as_array().unwrap().len() >= 2);
}

#[test]
fn bad_thread_count_exits_one() {
    let o = bin()
        .args(["converge", "--levels", "1", "--degree", "1"])
        .env("ENSEMBLE_FEM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_writes_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp.json");
    let o = run(&["compare", "--j", "6", "--nx", "4", "--dt", "0.1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let gap = v["mean_gap"].as_f64().unwrap();
    assert!(gap > 0.0 && gap < 1e-3);
    assert_eq!(v["qoi_gaps"].as_array().unwrap().len(), 6);
    assert_eq!(v["stats"]["independent"]["factorizations"], 30);
}
