use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SMALL: &[&str] = &["synth.n=1000", "epochs=5", "rnf.epochs=2"];

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, command: &str, sets: &[&str], extra: &[&str]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_rnf"));
        c.arg(command).env("RNF_OUT_DIR", self.out());
        for s in SMALL.iter().chain(sets) {
            c.args(["--set", s]);
        }
        c.args(extra).output().unwrap()
    }

    fn ok(&self, command: &str, sets: &[&str]) -> String {
        let o = self.run(command, sets, &[]);
        assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> String {
        self.out().join(rel).display().to_string()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn full_sequence_on_synthetic_data() {
    let env = Env::new();
    let start = Instant::now();
    env.ok("synth-data", &[]);
    env.ok("train-teacher", &[]);
    env.ok("train-bias-amplified", &[]);
    let bias = format!("bias_model={}", env.path("train-bias-amplified-s0/model.ckpt"));
    env.ok("gen-proxy", &[&bias]);
    let teacher = format!("teacher={}", env.path("train-teacher-s0/model.ckpt"));
    let proxy = format!("proxy={}", env.path("gen-proxy-s0/proxy.csv"));
    env.ok("train-rnf", &[&teacher, &proxy]);
    let model = format!("model={}", env.path("train-rnf-s0/model.ckpt"));
    let printed = env.ok("evaluate", &[&model]);
    env.ok("train-baseline", &["baseline=adversarial"]);
    let o = env.run("sweep", &["sweep.seeds=2", "sweep.grid=0,1"], &["--svg"]);
    assert!(o.status.success());
    env.ok("probe", &[&model]);
    let bound = env.ok("verify-bound", &[&model]);
    assert!(start.elapsed().as_secs() < 60);

    let lines: Vec<&str> = printed.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "run_id,method,seed,alpha,beta,q,gamma,T,accuracy,dp,delta_eo,gap1,gap2,undefined_flags");
    assert!(bound.contains("verdict="));

    for (run, files) in [
        ("train-teacher-s0", &["config.txt", "run.log", "model.ckpt", "metrics.csv"][..]),
        ("train-rnf-s0", &["config.txt", "run.log", "model.ckpt", "metrics.csv"]),
        ("sweep-s0", &["metrics.csv", "curve.csv", "curve.svg"]),
        ("probe-s0", &["kpca.csv", "probe.txt"]),
        ("synth-data-s0", &["data.csv", "data.schema"]),
    ] {
        for f in files {
            assert!(env.out().join(run).join(f).exists(), "{run}/{f}");
        }
    }
    let kpca = fs::read_to_string(env.out().join("probe-s0/kpca.csv")).unwrap();
    assert_eq!(kpca.lines().count(), 501);
    let sweep = fs::read_to_string(env.out().join("sweep-s0/metrics.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    let proxy = fs::read_to_string(env.out().join("gen-proxy-s0/proxy.csv")).unwrap();
    assert_eq!(proxy.lines().count(), 601);
}

#[test]
fn written_data_round_trips_through_schema() {
    let env = Env::new();
    env.ok("synth-data", &["run_name=gen"]);
    let data = format!("data={}", env.path("gen/data.csv"));
    let schema = format!("schema={}", env.path("gen/data.schema"));
    env.ok("train-teacher", &[&data, &schema, "run_name=from-file"]);
    env.ok("train-teacher", &["run_name=direct"]);
    let a = fs::read_to_string(env.out().join("from-file/metrics.csv")).unwrap();
    let b = fs::read_to_string(env.out().join("direct/metrics.csv")).unwrap();
    // Same data and split; only the run id differs.
    assert_eq!(a.replace("from-file", "x"), b.replace("direct", "x"));
}

#[test]
fn config_snapshot_reproduces_metrics_bit_for_bit() {
    let env = Env::new();
    env.ok("train-teacher", &["seed=3", "run_name=first"]);
    let snap = env.out().join("first/config.txt");
    let mut c = Command::new(env!("CARGO_BIN_EXE_rnf"));
    let o = c
        .args(["train-teacher", "--config"])
        .arg(&snap)
        .args(["--set", "run_name=first"])
        .env("RNF_OUT_DIR", env.dir.path().join("again"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read(snap.with_file_name("metrics.csv")).unwrap();
    let b = fs::read(env.dir.path().join("again/first/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let ca = fs::read(snap.with_file_name("model.ckpt")).unwrap();
    let cb = fs::read(env.dir.path().join("again/first/model.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn config_file_comments_and_unknown_keys() {
    let env = Env::new();
    let file = env.dir.path().join("run.cfg");
    fs::write(&file, "# teacher only\nseed=2\n\nepochs = 3\n").unwrap();
    let o = env.run("train-teacher", &[], &["--config", file.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env.out().join("train-teacher-s2/model.ckpt").exists());

    fs::write(&file, "seed=2\nlearning_rate=0.1\n").unwrap();
    let o = env.run("train-teacher", &[], &["--config", file.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = env.run("train-teacher", &["q=1.5"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains('q'));
}

#[test]
fn stage_two_without_annotations_names_the_source() {
    let env = Env::new();
    env.ok("train-teacher", &[]);
    let teacher = format!("teacher={}", env.path("train-teacher-s0/model.ckpt"));
    let o = env.run("train-rnf", &[&teacher], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`proxy`"));
    assert!(!env.out().join("train-rnf-s0").exists());
}

#[test]
fn missing_or_corrupt_checkpoints_are_config_errors() {
    let env = Env::new();
    let o = env.run("evaluate", &["model=/nonexistent/model.ckpt"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`model`"));
    let o = env.run("evaluate", &[], &[]);
    assert_eq!(code(&o), 1);

    let bad = env.dir.path().join("bad.ckpt");
    fs::write(&bad, b"RNF1\x01\0\0\0").unwrap();
    let o = env.run("evaluate", &[&format!("model={}", bad.display())], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt checkpoint"));
}

/// Rewrites the label column so no sample has the favorable outcome.
fn no_favorable_labels(src: &Path, dst: &Path) {
    let text = fs::read_to_string(src).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            let mut cells: Vec<&str> = line.split(',').collect();
            let y = cells.len() - 3;
            cells[y] = "0";
            out.push_str(&cells.join(","));
        }
        out.push('\n');
    }
    fs::write(dst, out).unwrap();
}

#[test]
fn undefined_fairness_metrics_exit_3() {
    let env = Env::new();
    env.ok("synth-data", &["run_name=gen"]);
    let neg = env.dir.path().join("neg.csv");
    no_favorable_labels(&env.out().join("gen/data.csv"), &neg);
    let data = format!("data={}", neg.display());
    let schema = format!("schema={}", env.path("gen/data.schema"));
    env.ok("train-teacher", &[&data, &schema]);
    let model = format!("model={}", env.path("train-teacher-s0/model.ckpt"));
    let o = env.run("evaluate", &[&data, &schema, &model], &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let row = String::from_utf8(o.stdout).unwrap();
    assert!(row.lines().nth(1).unwrap().contains("dp;delta_eo"));
}

#[test]
fn bad_arguments_exit_1_and_help_exits_0() {
    let o = Command::new(env!("CARGO_BIN_EXE_rnf")).arg("no-such-command").output().unwrap();
    assert_eq!(code(&o), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_rnf")).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("train-rnf"));
}
