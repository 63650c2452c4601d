use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mlcc::io::{read_predictions, read_reliability, read_soft_labels};
use mlcc::table::BenchmarkTable;
use mlcc_core::metrics::evaluate;
use mlcc_core::trainer::RunRecord;

fn mlcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlcc"))
        .args(args)
        .env("MLCC_NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small preset, short training, three seeds, the default roster.
fn quick_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("quick.json");
    let text = format!(
        r#"{{
  "dataset": {{"preset": "small"}},
  "cscl": {{"epochs": 2}},
  "mlr": {{"epochs": 3, "hidden": 0{extra}}},
  "out": "{}",
  "seeds": [0, 1, 2]
}}"#,
        s(&dir.join("bench"))
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_writes_identical_files_for_identical_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mlcc(&["gen", "--preset", "small", "--seed", "7", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("N=600"));
    }
    for f in ["dataset.jsonl", "dataset.meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let o = mlcc(&["gen", "--avg-labels", "25", "--categories", "20", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
    assert!(!String::from_utf8_lossy(&o.stderr).contains('\x1b'));
    assert_eq!(code(&mlcc(&["train-cscl", "--data", "/no/such/file", "--out", out])), 2);
    assert_eq!(code(&mlcc(&["--config", "/no/such/config.json", "benchmark"])), 2);
    assert_eq!(code(&mlcc(&["bogus"])), 2);
    assert_eq!(code(&mlcc(&["--loss", "softmax", "benchmark"])), 2);
    fs::write(dir.path().join("bad.json"), r#"{"seeds": []}"#).unwrap();
    assert_eq!(code(&mlcc(&["--config", s(&dir.path().join("bad.json")), "benchmark"])), 2);
}

#[test]
fn eval_reproduces_the_adaptive_hand_case() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    fs::write(&log, "{\"id\":0,\"p\":[0.6,0.7,0.9,1.0],\"y\":[1,0,1,1]}\n").unwrap();
    let out = dir.path().join("eval");
    let o = mlcc(&["--out", s(&out), "eval", s(&log), "--adaptive-bins", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ace"].as_f64().unwrap(), 10.0);
    for c in 0..4 {
        let bins = read_reliability(&out.join("reliability").join(format!("class_{c}.csv"))).unwrap();
        assert_eq!(bins.len(), 15);
    }
    assert!(out.join("reliability/global.svg").exists());
}

#[test]
fn malformed_logs_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    fs::write(&log, "{\"id\":0,\"p\":[0.6],\"y\":[1]}\n{\"id\":1,\"p\":[0.6],\"y\":[7]}\n").unwrap();
    let o = mlcc(&["--out", s(dir.path()), "eval", s(&log)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn perfectly_calibrated_log_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut text = String::new();
    for i in 0..10 {
        let y = u8::from(i < 7);
        text.push_str(&format!("{{\"id\":{i},\"p\":[0.7,1.0],\"y\":[{y},1]}}\n"));
    }
    fs::write(&log, text).unwrap();
    let o = mlcc(&["--out", s(dir.path()), "eval", s(&log)]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["ece"].as_f64().unwrap().abs() < 1e-9);
}

#[test]
fn train_cscl_soft_labels_respect_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&mlcc(&["gen", "--preset", "small", "--seed", "1", "--out", out])), 0);
    let o = mlcc(&["train-cscl", "--epochs", "2", "--seed", "1", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ins = read_soft_labels(&dir.path().join("soft_ins.jsonl")).unwrap();
    let pro = read_soft_labels(&dir.path().join("soft_pro.jsonl")).unwrap();
    let ds = mlcc::io::read_dataset(&dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(ins.ids.len(), 480);
    for soft in [&ins, &pro] {
        assert_eq!(soft.alpha, 0.05);
        for (r, id) in soft.ids.iter().enumerate() {
            let y = ds.labels.row(*id as usize);
            for (k, &v) in soft.values.row(r).iter().enumerate() {
                if y[k] == 1 {
                    assert_eq!(v, 0.95);
                } else {
                    assert!((0.0..=0.05 * y.len() as f64).contains(&v));
                }
            }
        }
    }

    // Re-softening the saved bank with α = 0 gives back the hard labels.
    let zero = dir.path().join("zero");
    let o = mlcc(&["soften", "--bank", s(&dir.path().join("bank.jsonl")), "--alpha", "0", "--seed", "1", "--out", s(&zero)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hard = read_soft_labels(&zero.join("soft_pro.jsonl")).unwrap();
    for (r, id) in hard.ids.iter().enumerate() {
        let y = ds.labels.row(*id as usize);
        assert!(hard.values.row(r).iter().zip(y).all(|(&v, &t)| v == t as f64));
    }

    // Softening the saved bank with the training seed reproduces train-cscl's files.
    let again = dir.path().join("again");
    assert_eq!(code(&mlcc(&["soften", "--bank", s(&dir.path().join("bank.jsonl")), "--seed", "1", "--out", s(&again)])), 0);
    for f in ["soft_ins.jsonl", "soft_pro.jsonl", "correlation/pro.csv"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn benchmark_emits_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "");
    let o = mlcc(&["--config", s(&cfg), "benchmark"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bench = dir.path().join("bench");

    let runs: Vec<_> = fs::read_dir(bench.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    assert_eq!(runs.len(), 9);
    let table = BenchmarkTable::read_csv(&bench.join("table.csv")).unwrap();
    assert_eq!(table, BenchmarkTable::read_json(&bench.join("table.json")).unwrap());
    assert_eq!(table.rows.iter().map(|r| r.loss.as_str()).collect::<Vec<_>>(), ["nll", "ls", "dclr"]);
    assert!(table.rows.iter().all(|r| r.runs == 3));

    // Standalone evaluation of a saved log matches the run record.
    let record: RunRecord = serde_json::from_slice(&fs::read(bench.join("runs/nll_1.json")).unwrap()).unwrap();
    let log = read_predictions(&bench.join("runs/nll_1.predictions.jsonl")).unwrap();
    assert_eq!(evaluate(&log, 15, 15).unwrap(), record.report);
    let ev = dir.path().join("ev");
    let o = mlcc(&["--out", s(&ev), "eval", s(&bench.join("runs/nll_1.predictions.jsonl"))]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ece"].as_f64().unwrap(), record.report.ece);

    // The table's nll ECE median is the median of the three run values.
    let mut eces: Vec<f64> = (0..3)
        .map(|seed| {
            let r: RunRecord = serde_json::from_slice(&fs::read(bench.join(format!("runs/nll_{seed}.json"))).unwrap()).unwrap();
            r.report.ece
        })
        .collect();
    eces.sort_by(f64::total_cmp);
    assert_eq!(table.row("nll").unwrap().ece.median, eces[1]);

    // ECE recomputed from the emitted reliability CSV.
    let bins = read_reliability(&bench.join("reliability/dclr_2_global.csv")).unwrap();
    let total: usize = bins.iter().map(|b| b.count).sum();
    let recomputed: f64 = bins.iter().filter(|b| b.count > 0).map(|b| b.count as f64 / total as f64 * b.gap()).sum();
    let dclr: RunRecord = serde_json::from_slice(&fs::read(bench.join("runs/dclr_2.json")).unwrap()).unwrap();
    assert!((recomputed - dclr.report.ece).abs() < 1e-9);
    assert!(bench.join("reliability/dclr_2_global.svg").exists());
    assert!(bench.join("reliability/dclr_2_class_7.csv").exists());
    assert!(bench.join("correlation/pro_0.csv").exists());

    let o = mlcc(&["report", s(&bench)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("dclr"));
}

#[test]
fn single_commands_agree_with_the_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "");
    let c = s(&cfg);
    let step = dir.path().join("steps");
    let st = s(&step);
    assert_eq!(code(&mlcc(&["--config", c, "--seed", "2", "--out", st, "gen"])), 0);
    assert_eq!(code(&mlcc(&["--config", c, "--seed", "2", "--out", st, "train-cscl"])), 0);
    let o = mlcc(&["--config", c, "--seed", "2", "--out", st, "--loss", "dclr", "train-mlr"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&mlcc(&["--config", c, "--seed", "2", "benchmark"])), 0);
    let bench = dir.path().join("bench");
    for f in ["runs/dclr_2.json", "reliability/dclr_2_global.csv", "reliability/dclr_2_class_3.csv"] {
        assert_eq!(fs::read(step.join(f)).unwrap(), fs::read(bench.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn failed_runs_leave_partial_results_and_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("huge.jsonl");
    let mut ds = mlcc_core::datagen::generate(&mlcc_core::GenConfig::small_preset(mlcc_core::Seed(0))).unwrap();
    for v in ds.inputs.as_mut_slice() {
        *v *= 1e307;
    }
    mlcc::io::write_dataset(&data, &ds, None).unwrap();
    let cfg = dir.path().join("huge.json");
    let text = format!(
        r#"{{"dataset": {{"path": "{}"}}, "roster": [{{"kind": "nll"}}], "mlr": {{"epochs": 2}}, "seeds": [0], "out": "{}"}}"#,
        s(&data),
        s(&dir.path().join("bench"))
    );
    fs::write(&cfg, text).unwrap();
    let o = mlcc(&["--config", s(&cfg), "benchmark"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let partial: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("bench/partial.json")).unwrap()).unwrap();
    assert!(partial["error"].as_str().unwrap().contains("diverged"), "{partial}");
    assert!(!dir.path().join("bench/table.csv").exists());
}

#[test]
fn train_mlr_requires_a_loss() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mlcc(&["train-mlr", "--out", s(dir.path())])), 2);
}
