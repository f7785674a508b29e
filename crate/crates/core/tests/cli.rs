use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use symmpo::policy::PolicyParams;

fn symmpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symmpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = symmpo(args);
    assert!(
        out.status.success(),
        "symmpo {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn small_data(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let data = dir.join("data");
    let mut args = vec!["gen-data", "--n-images", "96", "--out", s(&data)];
    args.extend_from_slice(extra);
    ok(&args);
    data
}

#[test]
fn gen_data_is_byte_reproducible_and_accounts_for_drops() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(&dir.path().join("a"), &[]);
    let b = small_data(&dir.path().join("b"), &[]);
    for f in ["train.jsonl", "heldout.jsonl", "meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let meta: Value = serde_json::from_str(&fs::read_to_string(a.join("meta.json")).unwrap()).unwrap();
    let drops = &meta["drops"];
    let dropped = drops["dropped_same_response"].as_u64().unwrap() + drops["dropped_no_neighbor"].as_u64().unwrap();
    let lines = fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count()
        + fs::read_to_string(a.join("heldout.jsonl")).unwrap().lines().count();
    assert_eq!(lines as u64, 96 * 4 - dropped);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn black_mode_zeroes_every_contrastive_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &["--contrastive-mode", "black"]);
    for rec in jsonl(&fs::read_to_string(data.join("train.jsonl")).unwrap()) {
        assert!(rec["image_c"]
            .as_array()
            .unwrap()
            .iter()
            .all(|v| v.as_f64() == Some(0.0)));
        assert_eq!(rec["neighbor_id"], -1);
    }
}

#[test]
fn zero_epochs_leave_the_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&out), "--epochs", "0"]);
    let params = PolicyParams::load(&out.join("checkpoint.bin")).unwrap();
    assert!(params.weights().as_slice().iter().all(|&w| w == 0.0));
}

#[test]
fn train_prints_the_summary_and_writes_a_headed_metrics_stream() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = dir.path().join("run");
    let stdout = ok(&["train", "--data", s(&data), "--out", s(&out), "--eval-every", "2"]).stdout;
    let printed: Value = serde_json::from_slice(&stdout).unwrap();
    let saved: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    let records = jsonl(&fs::read_to_string(out.join("metrics.jsonl")).unwrap());
    assert_eq!(records[0]["kind"], "run");
    assert_eq!(records[0]["config_hash"], saved["config_hash"]);
    assert!(records.iter().any(|r| r["kind"] == "eval"));
    assert!(records.iter().any(|r| r["kind"] == "step"));
}

#[test]
fn reduced_symmpo_reproduces_dpo_and_ablate_is_an_alias() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--eval-every", "3"];
        args.extend_from_slice(extra);
        ok(&args);
        (
            fs::read(out.join("metrics.jsonl")).unwrap(),
            fs::read(out.join("checkpoint.bin")).unwrap(),
        )
    };
    let dpo = run("dpo", &["--objective", "dpo"]);
    let reduced = run("reduced", &["--lambda", "0", "--gamma", "0", "--eta", "0"]);
    assert_eq!(dpo, reduced);

    let ablated = run("ablated", &["--ablate", "pair"]);
    let named = run("named", &["--objective", "symmpo_wo_pair"]);
    assert_eq!(ablated, named);
    assert_ne!(ablated, run("full", &[]));
}

#[test]
fn eval_reports_rates_for_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&out)]);
    let stdout = ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
    ])
    .stdout;
    let report: Value = serde_json::from_slice(&stdout).unwrap();
    for key in [
        "hallucination_rate",
        "mention_hallucination_rate",
        "contrastive_accuracy",
    ] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn gradcheck_default_battery_passes() {
    let out = ok(&["gradcheck"]);
    let reports = jsonl(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(reports.len(), 700);
    assert!(reports.iter().all(|r| r["passed"] == true));
}

#[test]
fn gradcheck_below_oracle_precision_fails_with_exit_one() {
    let out = symmpo(&["gradcheck", "--instances", "10", "--tolerance", "1e-12"]);
    assert_eq!(out.status.code(), Some(1));
    let reports = jsonl(&String::from_utf8(out.stdout).unwrap());
    assert!(reports.iter().any(|r| r["passed"] == false));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
}

#[test]
fn gradcheck_can_be_restricted_to_one_loss() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.jsonl");
    let out = ok(&["gradcheck", "--instances", "12", "--loss", "margin", "--out", s(&path)]);
    assert!(out.stdout.is_empty());
    let reports = jsonl(&fs::read_to_string(&path).unwrap());
    assert_eq!(reports.len(), 12);
    assert!(reports.iter().all(|r| r["loss_id"] == "margin"));
}

fn partition_records(data: &Path, checkpoint: &Path, extra: &[&str]) -> Vec<Value> {
    let mut args = vec!["partition-report", "--data", s(data), "--checkpoint", s(checkpoint)];
    args.extend_from_slice(extra);
    jsonl(&String::from_utf8(ok(&args).stdout).unwrap())
}

#[test]
fn partition_offset_vanishes_without_reward_or_contrast() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run)]);
    let trained = run.join("checkpoint.bin");

    let zero_reward = partition_records(&data, &trained, &["--reward-scale", "0"]);
    assert!(!zero_reward.is_empty());
    assert!(zero_reward.iter().all(|r| r["c"].as_f64() == Some(0.0)));

    // Identical images on both arms: ln Z cancels and the corrected loss is the plain one.
    let shared = dir.path().join("shared");
    fs::create_dir_all(&shared).unwrap();
    for f in ["train.jsonl", "heldout.jsonl"] {
        let text: String = jsonl(&fs::read_to_string(data.join(f)).unwrap())
            .into_iter()
            .map(|mut rec| {
                rec["image_c"] = rec["image"].clone();
                format!("{rec}\n")
            })
            .collect();
        fs::write(shared.join(f), text).unwrap();
    }
    fs::copy(data.join("meta.json"), shared.join("meta.json")).unwrap();
    for rec in partition_records(&shared, &trained, &["--policy", s(&trained)]) {
        assert_eq!(rec["c"].as_f64(), Some(0.0));
        assert_eq!(rec["loss_vco"], rec["loss_vco_star"]);
    }
}

#[test]
fn trained_reference_gives_nonzero_offsets_and_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run)]);
    let report = dir.path().join("partition.jsonl");
    ok(&[
        "partition-report",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--out",
        s(&report),
    ]);
    let records = jsonl(&fs::read_to_string(&report).unwrap());
    assert!(records.iter().any(|r| r["c"].as_f64().unwrap().abs() > 1e-3));
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("partition.jsonl.meta.json")).unwrap()).unwrap();
    assert!(meta["config_hash"].is_string());
}

#[test]
fn single_cell_sweep_matches_a_plain_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    let grid = ["--lambdas", "0.5", "--gammas", "0.0001", "--lrs", "0.1"];
    let mut args = vec!["sweep", "--n-images", "96", "--out", s(&sweep)];
    args.extend_from_slice(&grid);
    ok(&args);
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&sweep.join("data").join("similar")),
        "--out",
        s(&run),
    ]);
    let cell = sweep.join("cells").join("0000");
    for f in ["summary.json", "checkpoint.bin", "metrics.jsonl"] {
        assert_eq!(fs::read(cell.join(f)).unwrap(), fs::read(run.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_rows_follow_the_grid_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    let args = [
        "sweep",
        "--n-images",
        "96",
        "--lambdas",
        "0.5",
        "--gammas",
        "0.0001",
        "--lrs",
        "0.1,0.05,0.01",
        "--out",
        s(&sweep),
    ];
    ok(&args);
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "cell,loss,hallucination_rate,contrastive_accuracy");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..]
        .iter()
        .all(|l| l.starts_with("mode=similar;lambda=0.5;gamma=0.0001;lr=")));

    ok(&args);
    assert_eq!(fs::read_to_string(sweep.join("sweep.csv")).unwrap(), csv);
}

#[test]
fn input_errors_exit_two_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = symmpo(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    assert_eq!(symmpo(&["train", "--objective", "nonsense"]).status.code(), Some(2));
    assert_eq!(
        symmpo(&["gen-data", "--n-images", "0", "--out", s(&missing)])
            .status
            .code(),
        Some(2)
    );
    let help = symmpo(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gradcheck"));
}
