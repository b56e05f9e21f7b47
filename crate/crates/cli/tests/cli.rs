use std::fs;
use std::path::Path;

use owod_cli::run_cli;

const SMALL: &str = r#"{
  "dataset": {"scenes_per_split": {"train": 60, "test": 30}},
  "train": {"epochs": 2, "lr_drop_epoch": 1, "finetune_epochs": 1}
}"#;

fn run(args: &[&str]) -> (u8, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("owod").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.contains("frobnicate"));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["--version"]).0, 0);
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"lr": -1}}"#).unwrap();
    let (code, _, err) = run(&["--config", s(&cfg), "--out", s(dir.path()), "generate"]);
    assert_eq!(code, 2);
    assert!(err.contains("lr"));

    fs::write(&cfg, r#"{"nonsense": true}"#).unwrap();
    assert_eq!(run(&["--config", s(&cfg), "generate"]).0, 2);
}

#[test]
fn empty_config_is_runnable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    fs::write(&cfg, "{}").unwrap();
    let (code, _, err) = run(&["--config", s(&cfg), "--out", s(dir.path()), "-q", "generate"]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert!(text.lines().count() > 1);
}

#[test]
fn benchmark_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, _, err) = run(&["--config", &cfg, "--seed", "3", "--out", s(out), "-q", "benchmark"]);
        assert_eq!(code, 0, "{err}");
    }
    for name in [
        "summary.csv",
        "report_task0.json",
        "report_task1.json",
        "checkpoint.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let csv = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "task,map_prev,map_current,map_both,u_recall,a_ose,wi,tau,seed"
    );
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn multi_seed_benchmark_writes_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("multi.json");
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    v["protocol"] = serde_json::json!({"seeds": [1, 2]});
    fs::write(&cfg, v.to_string()).unwrap();
    let (code, _, err) = run(&["--config", s(&cfg), "--out", s(dir.path()), "-q", "benchmark"]);
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(
        header.contains("map_both_mean") && header.contains("map_both_std"),
        "{header}"
    );
    for seed in [1, 2] {
        for task in [0, 1] {
            assert!(dir.path().join(format!("report_seed{seed}_task{task}.json")).exists());
        }
    }
}

#[test]
fn train_eval_sweep_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = d.join("dataset.jsonl");
    assert_eq!(run(&["--config", &cfg, "--out", s(d), "-q", "generate"]).0, 0);
    assert_eq!(
        run(&[
            "--config",
            &cfg,
            "--out",
            s(d),
            "-q",
            "train",
            "--task",
            "0",
            "--dataset",
            s(&data)
        ])
        .0,
        0
    );

    // Task 1 without its predecessor is rejected.
    let (code, _, _) = run(&[
        "--config",
        &cfg,
        "--out",
        s(d),
        "-q",
        "train",
        "--task",
        "1",
        "--dataset",
        s(&data),
    ]);
    assert_eq!(code, 1);

    let ck0 = d.join("checkpoint_task0.json");
    let (code, _, err) = run(&[
        "--config",
        &cfg,
        "--out",
        s(d),
        "-q",
        "train",
        "--task",
        "1",
        "--checkpoint",
        s(&ck0),
        "--dataset",
        s(&data),
    ]);
    assert_eq!(code, 0, "{err}");

    // Re-evaluating the saved detector reproduces the training report.
    let ck1 = d.join("checkpoint_task1.json");
    let ev = d.join("eval");
    assert_eq!(
        run(&[
            "--out",
            s(&ev),
            "-q",
            "eval",
            "--checkpoint",
            s(&ck1),
            "--dataset",
            s(&data)
        ])
        .0,
        0
    );
    assert_eq!(
        fs::read(d.join("report_task1.json")).unwrap(),
        fs::read(ev.join("report_task1.json")).unwrap()
    );

    let sw = d.join("sweep");
    let (code, _, err) = run(&[
        "--out",
        s(&sw),
        "-q",
        "sweep",
        "--checkpoint",
        s(&ck1),
        "--taus",
        "0.5,1.3,2",
    ]);
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let taus: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(7).unwrap()).collect();
    assert_eq!(taus, ["0.5", "1.3", "2"]);
    let svg = fs::read_to_string(sw.join("sweep.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let panels = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("panel"))
        .count();
    assert_eq!(panels, 4);

    let rep = d.join("report");
    let r0 = d.join("report_task0.json");
    let r1 = d.join("report_task1.json");
    assert_eq!(run(&["--out", s(&rep), "-q", "report", s(&r0), s(&r1)]).0, 0);
    assert_eq!(fs::read_to_string(rep.join("summary.csv")).unwrap().lines().count(), 3);
    for name in ["pr_task0.svg", "pr_task1.svg", "sweep.svg"] {
        let text = fs::read_to_string(rep.join(name)).unwrap();
        roxmltree::Document::parse(&text).unwrap();
    }
}

#[test]
fn checkpoint_version_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    assert_eq!(
        run(&["--config", &cfg, "--out", s(d), "-q", "train", "--task", "0"]).0,
        0
    );
    let text = fs::read_to_string(d.join("checkpoint_task0.json")).unwrap();
    let bad = d.join("bad.json");
    fs::write(&bad, text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1)).unwrap();
    let (code, _, err) = run(&["--out", s(d), "eval", "--checkpoint", s(&bad)]);
    assert_eq!(code, 1);
    assert!(err.contains("version"), "{err}");

    fs::write(&bad, text.replacen("\"config_version\": 1", "\"config_version\": 5", 1)).unwrap();
    let (code, _, err) = run(&["--out", s(d), "eval", "--checkpoint", s(&bad)]);
    assert_eq!(code, 1);
    assert!(err.contains("version"), "{err}");
    let leftovers: Vec<_> = fs::read_dir(d)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn gradcheck_passes() {
    let (code, out, err) = run(&["gradcheck", "--configs", "4"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().filter(|l| l.starts_with("config ")).count(), 4);
}

#[test]
fn single_report_sweep_has_one_point_per_series() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    assert_eq!(
        run(&["--config", &cfg, "--out", s(d), "-q", "train", "--task", "0"]).0,
        0
    );
    let ck = d.join("checkpoint_task0.json");
    let (code, _, err) = run(&["--out", s(d), "-q", "sweep", "--checkpoint", s(&ck), "--taus", "1.3"]);
    assert_eq!(code, 0, "{err}");
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("sweep_reports.json")).unwrap()).unwrap();
    let report = &reports[0];
    let svg = fs::read_to_string(d.join("sweep.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    for series in ["u_recall", "map_both", "a_ose", "wi"] {
        let panel = doc
            .descendants()
            .find(|n| n.attribute("data-series") == Some(series))
            .unwrap();
        let points = panel
            .descendants()
            .filter(|n| n.attribute("class") == Some("point"))
            .count();
        let expected = usize::from(!report[series].is_null());
        assert_eq!(points, expected, "{series}");
    }
}
