use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DATA: &str = "3,8,3.0,300,96,300";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1, "one JSON line expected: {text}");
    serde_json::from_str(&text).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// train + capture + score in `dir`; returns (checkpoint, dumps, report).
fn prepare(dir: &Path, extra: &[&str]) -> (String, String, String) {
    let net = s(&dir.join("net.fpm"));
    let dumps = s(&dir.join("dumps"));
    let rep = s(&dir.join("report.json"));
    let with = |args: &[&str]| -> Vec<String> {
        extra.iter().chain(args).map(|a| a.to_string()).collect()
    };
    let call = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&[
        "train",
        "--synthetic",
        DATA,
        "--hidden",
        "16,8",
        "--epochs",
        "5",
        "--checkpoint",
        &net,
    ]));
    call(with(&[
        "capture",
        "--synthetic",
        DATA,
        "--checkpoint",
        &net,
        "--dumps",
        &dumps,
    ]));
    call(with(&["score", "--dumps", &dumps, "--report", &rep]));
    (net, dumps, rep)
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (net, _, rep) = prepare(tmp.path(), &[]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0]["J"], 16);
    assert_eq!(layers[1]["J"], 8);

    let plan = s(&tmp.path().join("plan.json"));
    let out = ok(&["plan", "--report", &rep, "--tod", "0.1", "--plan", &plan]);
    let pr = out["pruning_rate"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&pr));

    let pruned = s(&tmp.path().join("pruned.fpm"));
    let applied = ok(&[
        "apply",
        "--checkpoint",
        &net,
        "--plan",
        &plan,
        "--output",
        &pruned,
    ]);
    assert_eq!(applied["report"]["pruning_rate"].as_f64().unwrap(), pr);

    let eval = ok(&["eval", "--synthetic", DATA, "--checkpoint", &net, &pruned]);
    let rows = eval["results"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1]["params"].as_u64() <= rows[0]["params"].as_u64());
}

#[test]
fn missing_bias_gradient_dump_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dumps, _) = prepare(tmp.path(), &[]);
    std::fs::remove_file(Path::new(&dumps).join("layer2_bgrad.fpd")).unwrap();
    let out = run(&[
        "score",
        "--dumps",
        &dumps,
        "--report",
        &s(&tmp.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layer 2"), "{err}");
    assert!(err.contains("kind 2"), "{err}");
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--deterministic", "--seed", "11"];
    prepare(a.path(), &flags);
    prepare(b.path(), &flags);
    for name in [
        "net.fpm",
        "report.json",
        "dumps/layer1_act.fpd",
        "dumps/layer2_wgrad.fpd",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between reruns");
    }
}

#[test]
fn out_of_range_level_is_a_usage_error() {
    let out = run(&[
        "plan", "--report", "r.json", "--tod", "1.5", "--plan", "p.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1.5"));
}

#[test]
fn sweep_pruning_rate_is_monotone_in_level() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, rep) = prepare(tmp.path(), &[]);
    let dir = s(&tmp.path().join("plans"));
    let out = ok(&[
        "sweep",
        "--report",
        &rep,
        "--tod",
        "0.05,0.1,0.3",
        "--plan",
        &dir,
    ]);
    let prs: Vec<f64> = out["plans"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["pruning_rate"].as_f64().unwrap())
        .collect();
    assert_eq!(prs.len(), 3);
    assert!(prs.windows(2).all(|w| w[0] <= w[1]), "{prs:?}");
    assert_eq!(std::fs::read_dir(&dir).unwrap().count(), 3);
}

#[test]
fn plan_for_another_network_is_a_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, rep) = prepare(tmp.path(), &[]);
    let plan = s(&tmp.path().join("plan.json"));
    ok(&["plan", "--report", &rep, "--tod", "0.3", "--plan", &plan]);
    let other = s(&tmp.path().join("other.fpm"));
    ok(&[
        "train",
        "--synthetic",
        DATA,
        "--hidden",
        "12,8",
        "--epochs",
        "1",
        "--checkpoint",
        &other,
    ]);
    let out = run(&[
        "apply",
        "--checkpoint",
        &other,
        "--plan",
        &plan,
        "--output",
        &s(&tmp.path().join("x.fpm")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn iterate_accumulates_pruning() {
    let tmp = tempfile::tempdir().unwrap();
    let (net, _, _) = prepare(tmp.path(), &[]);
    let out_net = s(&tmp.path().join("iter.fpm"));
    let out = ok(&[
        "iterate",
        "--synthetic",
        DATA,
        "--checkpoint",
        &net,
        "--tod",
        "0.5",
        "--rounds",
        "2",
        "--epochs",
        "1",
        "--output",
        &out_net,
    ]);
    let rounds = out["rounds"].as_array().unwrap();
    assert!(!rounds.is_empty());
    let cumulative: Vec<f64> = rounds
        .iter()
        .map(|r| r["cumulative_pr"].as_f64().unwrap())
        .collect();
    assert!(
        cumulative.windows(2).all(|w| w[0] <= w[1]),
        "{cumulative:?}"
    );
    assert!(Path::new(&out_net).exists());
}

#[test]
fn converge_on_gaussian_units_writes_both_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let prefix = tmp.path().join("conv");
    let out = ok(&[
        "--deterministic",
        "converge",
        "--gaussian",
        "1.0,0.0",
        "--pool-per-class",
        "512",
        "--sizes",
        "32,128",
        "--resamples",
        "4",
        "--out",
        &s(&prefix),
    ]);
    assert_eq!(out["command"], "converge");
    assert!(prefix.with_extension("json").exists());
    assert!(prefix.with_extension("csv").exists());
}
