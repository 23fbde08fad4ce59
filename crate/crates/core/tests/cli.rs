use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neuroclip"));
    c.env_remove("NEUROCLIP_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--classes", "10", "--per-class", "6", "--held-out", "5", "--val-samples", "6", "--channels", "4", "--times", "20",
    "--image-size", "16",
];

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", p(dir)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn dataset() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("data");
    gen(&d, &[]);
    (tmp, d)
}

fn log_lines(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("log.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_data_is_deterministic_and_guards_paths() {
    let (tmp, d) = dataset();
    let again = tmp.path().join("again");
    gen(&again, &[]);
    for f in ["manifest.json", "train.bin", "val.bin", "test.bin"] {
        assert_eq!(fs::read(d.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    let mut args = vec!["gen-data", "--out", p(&d)];
    args.extend_from_slice(SMALL);
    assert!(!run(&args).status.success());
    args.extend_from_slice(&["--force", "--seed", "3"]);
    ok(&args);
    assert_ne!(fs::read(d.join("train.bin")).unwrap(), fs::read(again.join("train.bin")).unwrap());
}

#[test]
fn held_out_classes_become_the_test_split() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    ok(&["gen-data", "--out", p(&d), "--classes", "50", "--held-out", "10", "--channels", "2", "--times", "8", "--image-size", "8", "--backbone.patch", "4"]);
    let ds = neuroclip::data::load_dataset(&d).unwrap();
    let (train, val, test) = (ds.split("train").unwrap(), ds.split("val").unwrap(), ds.split("test").unwrap());
    assert_eq!(test.len(), 10);
    assert!(test.classes().is_disjoint(&train.classes()));
    assert!(test.classes().is_disjoint(&val.classes()));
}

#[test]
fn zero_epochs_saves_the_initial_state() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "0"]);
    let c = neuroclip::checkpoint::Checkpoint::load(&out).unwrap();
    assert_eq!(c.epoch, 0);
    assert_eq!(c.dims.image_size, 16);
    let log = log_lines(&out);
    assert_eq!(log.len(), 1);
    assert_eq!(log[0]["kind"], "epoch");
}

#[test]
fn pure_clip_weights_log_total_equal_to_clip() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "2", "--loss.mu", "1", "--loss.alpha", "0", "--loss.lambda", "0"]);
    let steps: Vec<_> = log_lines(&out).into_iter().filter(|e| e["kind"] == "step").collect();
    assert!(!steps.is_empty());
    for s in steps {
        assert_eq!(s["l_total"], s["l_clip"], "{s}");
    }
}

#[test]
fn bilinear_ablation_trains() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "1", "--fusion.strategy", "bilinear"]);
    let c = neuroclip::checkpoint::Checkpoint::load(&out).unwrap();
    assert!(c.params.get(neuroclip::fusion::MIX_LOGIT).is_some());
    assert!(c.params.get("fusion.wq").is_none());
}

#[test]
fn config_file_from_environment() {
    let (tmp, d) = dataset();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[trainer]\nepochs = 1\n").unwrap();
    let out = tmp.path().join("run");
    let res = bin().env("NEUROCLIP_CONFIG", &cfg).args(["train", "--data", p(&d), "--out", p(&out)]).output().unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let c = neuroclip::checkpoint::Checkpoint::load(&out).unwrap();
    assert_eq!((c.config.seed, c.config.trainer.epochs), (5, 1));
}

#[test]
fn invalid_config_fails_with_key_and_leaves_nothing() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    let res = run(&["train", "--data", p(&d), "--out", p(&out), "--loss.beta", "1.5"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("loss.beta"));
    let res = run(&["train", "--data", p(&d), "--out", p(&out), "--loss.gamma", "1"]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("loss.gamma"));
    assert!(!out.exists());

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[trainer]\nepoch = 3\n").unwrap();
    let res = run(&["--config", p(&bad), "train", "--data", p(&d), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("epoch"));
}

#[test]
fn failed_training_removes_partial_output() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    // exp(-log(tau)) overflows, so the very first loss is non-finite.
    let res = run(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "1", "--loss.tau_init", "1e-310"]);
    let err = String::from_utf8_lossy(&res.stderr);
    assert_eq!(res.status.code(), Some(1), "{err}");
    assert!(err.contains("non-finite"), "{err}");
    assert!(!out.exists());
}

#[test]
fn eval_and_export() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "1"]);
    let a = ok(&["eval", "--checkpoint", p(&out), "--data", p(&d)]).stdout;
    let b = ok(&["eval", "--checkpoint", p(&out), "--data", p(&d)]).stdout;
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    for k in ["top1", "top3", "top5"] {
        assert!(report["top_k"][k].is_f64(), "{report}");
    }
    assert!(report["mAP"].is_f64());

    let csv = tmp.path().join("sim").join("s.csv");
    ok(&["export-sim", "--checkpoint", p(&out), "--data", p(&d), "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 5));
    let side: Value = serde_json::from_str(&fs::read_to_string(csv.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["mAP"], report["mAP"]);
    assert!(!run(&["export-sim", "--checkpoint", p(&out), "--data", p(&d), "--out", p(&csv)]).status.success());
}

#[test]
fn eval_rejects_mismatched_data() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "0"]);
    let other = tmp.path().join("other");
    ok(&["gen-data", "--out", p(&other), "--classes", "10", "--per-class", "6", "--held-out", "5", "--val-samples", "6", "--channels", "6", "--times", "20", "--image-size", "16"]);
    let report = tmp.path().join("r.json");
    let res = run(&["eval", "--checkpoint", p(&out), "--data", p(&other), "--out", p(&report)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!report.exists());
}

#[test]
fn repeats_write_one_run_per_seed() {
    let (tmp, d) = dataset();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&d), "--out", p(&out), "--epochs", "1", "--repeats", "2", "--seed", "4"]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let seeds: Vec<_> = summary["runs"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, [4, 5]);
    assert!(summary["mean"]["top1"].is_f64());
    for r in 0..2 {
        assert!(out.join(format!("run-{r}")).join("checkpoint.json").exists());
    }
}

#[test]
fn gradcheck_selectors() {
    let res = ok(&["gradcheck", "fusion", "--seed", "0"]);
    let r: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(r["component"], "fusion");
    assert!(r["tensors"].as_array().unwrap().iter().all(|t| {
        let name = t[0].as_str().unwrap();
        name.starts_with("fusion.") || name.ends_with("tokens")
    }));
    let all = ok(&["gradcheck", "--all"]);
    assert_eq!(String::from_utf8_lossy(&all.stdout).lines().count(), 12 * 3);
    assert_eq!(run(&["gradcheck", "--all", "--fault", "gelu"]).status.code(), Some(1));
    assert_eq!(run(&["gradcheck", "attention"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck"]).status.code(), Some(2));
}
