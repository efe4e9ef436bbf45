use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
n_layers = 2
d_model = 32
n_heads = 2
state_size = 8
ffn_hidden = 48
vocab = 16
task = copy
seq_len = 12
task_vocab = 8
batch_size = 2
val_batch = 4
steps = 20
seed = 5
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transmamba"))
        .args(args)
        .env("TM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.conf");
    std::fs::write(&p, format!("{CONFIG}{extra}")).unwrap();
    p.display().to_string()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = bin(&["train", "--out", "/tmp/never-created"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "wobble = 1\n");
    let out = dir.path().join("run");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn plan_reports_optimum_and_curve() {
    let o = bin(&["plan", "--T", "8192", "--N", "1536", "--kappa-ratio", "2.67"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("optimal P = 2051"));
    let o = bin(&["plan", "--kappa-ratio", "1"]);
    assert!(stdout(&o).contains("optimal P = 768"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan");
    let o = bin(&["plan", "--T", "8192", "--N", "1536", "--step", "64", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("P,cost"));
    assert_eq!(lines.count(), 129);
    let sched = std::fs::read_to_string(out.join("schedule.txt")).unwrap();
    assert_eq!(sched, "# cycle=1 T=8192\n2051\n");
    assert!(out.join("manifest.json").is_file());

    assert_eq!(code(&bin(&["plan", "--kappa-ratio", "0"])), 2);
    assert_eq!(code(&bin(&["plan", "--T", "0"])), 2);
}

#[test]
fn verify_suites_pass() {
    let o = bin(&["verify", "--suite", "degeneracy", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.ends_with("PASS")));
    assert_eq!(code(&bin(&["verify", "--suite", "nope"])), 2);
}

#[test]
fn train_writes_run_directory_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = |name: &str, steps: &str| {
        let out = dir.path().join(name);
        let o = bin(&["train", "--config", &cfg, "--schedule", "v9", "--task", "copy", "--steps", steps, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "200");
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,ppl"));
    assert_eq!(csv.lines().count(), 201);
    for f in ["checkpoint.tmam", "manifest.json", "run.jsonl", "schedule.txt", "config.txt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);

    let b = run("b", "30");
    let c = run("c", "30");
    assert_eq!(std::fs::read(b.join("metrics.csv")).unwrap(), std::fs::read(c.join("metrics.csv")).unwrap());

    let o = bin(&["train", "--config", &cfg, "--steps", "1", "--out", b.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "existing run directories are never reused");
}

#[test]
fn eval_reproduces_training_validation_and_checks_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    assert_eq!(code(&bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let ckpt = out.join("checkpoint.tmam");
    let ckpt = ckpt.to_str().unwrap();

    let trained = std::fs::read_to_string(out.join("run.jsonl")).unwrap();
    let loss_line = |text: &str| text.lines().find(|l| l.contains("\"loss\"")).unwrap().to_string();
    let o = bin(&["eval", "--checkpoint", ckpt]);
    assert_eq!(code(&o), 0);
    assert_eq!(loss_line(&stdout(&o)), loss_line(&trained));

    let log = dir.path().join("eval.jsonl");
    let o = bin(&[
        "eval", "--checkpoint", ckpt,
        "--inference-schedule", "all-transformer",
        "--inference-schedule", "all-mamba",
        "--inference-schedule", "hybrid",
        "--log", log.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 9);
    assert!(lines.iter().all(|v| v["value"].as_f64().unwrap().is_finite()));

    assert_eq!(code(&bin(&["eval", "--checkpoint", ckpt, "--inference-schedule", "1,2,3"])), 2);
    assert_eq!(code(&bin(&["eval", "--checkpoint", "/nonexistent.tmam"])), 2);
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr = 1e30\nmin_lr = 1e30\nclip = 1e30\n");
    let out = dir.path().join("run");
    let o = bin(&["train", "--config", &cfg, "--steps", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn schedule_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sched = dir.path().join("mine.txt");
    std::fs::write(&sched, "# cycle=2 T=24\n0\n24\n").unwrap();
    let out = dir.path().join("run");
    let o = bin(&["train", "--config", &cfg, "--schedule", sched.to_str().unwrap(), "--steps", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("schedule.txt")).unwrap(), "# cycle=2 T=12\n0\n12\n");
}
