use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmamba")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "input_size=32\nstem_patch=4\nstage_depths=1,1\nstage_dims=8,16\nssm_state_dim=4\ndcconv_k=3\nwfem_channels=4\n\
batch_size=8\nlog_every=2\neval_every=2\ncheckpoint_every=2\n";

fn synth(dir: &Path, n: &str) -> String {
    let o = wmamba(&["synth", "--n", n, "--size", "32", "--seed", "5", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o).lines().find_map(|l| l.strip_prefix("fingerprint ").map(str::to_string)).unwrap()
}

#[test]
fn synth_is_reproducible_and_validates_n() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), "20");
    let b = synth(&dir.path().join("b"), "20");
    assert_eq!(a, b);
    assert_eq!(fs::read_dir(dir.path().join("a")).unwrap().count(), 21);
    assert_eq!(code(&wmamba(&["synth", "--n", "7", "--out", p(&dir.path().join("c"))])), 2);
    assert_eq!(code(&wmamba(&["synth", "--n", "8", "--size", "31", "--out", p(&dir.path().join("c"))])), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&wmamba(&[])), 2);
    assert_eq!(code(&wmamba(&["frobnicate"])), 2);
    assert_eq!(code(&wmamba(&["verify", "--filter", "no-such-suite"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour=blue\n").unwrap();
    assert_eq!(code(&wmamba(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(dir.path())])), 2);
    assert_eq!(code(&wmamba(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--gate-mode", "sideways"])), 2);
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = wmamba(&["train", "--data", p(&dir.path().join("nothing")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "40");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, format!("# small model\n{TINY}steps=4\n")).unwrap();

    let run = dir.path().join("run");
    let o = wmamba(&["--threads", "2", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--gate-mode", "add"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("gate_mode=add") && echo.contains("steps=4"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,auc\n"));
    let final_auc: f64 = stdout(&o)
        .lines()
        .find(|l| l.starts_with("final step"))
        .and_then(|l| l.split("heldout_auc ").nth(1))
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();

    // the echo alone reproduces the run
    let rerun = dir.path().join("rerun");
    let o = wmamba(&["train", "--config", p(&run.join("config.txt")), "--data", p(&data), "--out", p(&rerun)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(rerun.join("metrics.csv")).unwrap(), metrics);

    // eval on the held-out split reproduces the training-time number
    let scores = dir.path().join("scores.csv");
    let o = wmamba(&["eval", "--ckpt", p(&run.join("final.wmbk")), "--data", p(&data), "--split", "heldout", "--scores", p(&scores)]);
    assert_eq!(code(&o), 0);
    let auc: f64 = stdout(&o).lines().find_map(|l| l.strip_prefix("auc ")).unwrap().parse().unwrap();
    assert!((auc - final_auc).abs() < 1e-4);
    let csv = fs::read_to_string(&scores).unwrap();
    assert_eq!(csv.lines().next(), Some("path,label,score"));
    assert_eq!(csv.lines().count(), 1 + 8);
    let o = wmamba(&["eval", "--ckpt", p(&run.join("final.wmbk")), "--data", p(&data), "--scores", p(&scores)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 1 + 40);

    // what an interruption right after step 2 leaves on disk
    let split = dir.path().join("split");
    fs::create_dir_all(&split).unwrap();
    fs::copy(run.join("ckpt_000002.wmbk"), split.join("latest.wmbk")).unwrap();
    let head: String = metrics.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(split.join("metrics.csv"), head).unwrap();
    let o = wmamba(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&split), "--gate-mode", "add", "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("resuming from step 2"));
    assert_eq!(fs::read_to_string(split.join("metrics.csv")).unwrap(), metrics);
    // a different configuration cannot pick up the checkpoint
    let o = wmamba(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&split), "--resume"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn single_class_data_fails_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "8");
    let run = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}steps=1\n")).unwrap();
    assert_eq!(code(&wmamba(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)])), 0);
    // keep only the real rows
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    let reals: String = manifest.lines().filter(|l| l.contains("\t0\t") || l.starts_with("# fp=")).map(|l| format!("{l}\n")).collect();
    let only = dir.path().join("reals");
    fs::create_dir_all(&only).unwrap();
    for l in reals.lines().filter(|l| !l.starts_with('#')) {
        let f = l.split('\t').next().unwrap();
        fs::copy(data.join(f), only.join(f)).unwrap();
    }
    fs::write(only.join("manifest.txt"), reals).unwrap();
    let o = wmamba(&["eval", "--ckpt", p(&run.join("final.wmbk")), "--data", p(&only), "--scores", p(&dir.path().join("s.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("AUC"));
}

#[test]
fn verify_filter_selects_suites() {
    let o = wmamba(&["verify", "--filter", "wavelet"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("wavelet") && out.contains("PASS"));
    assert!(!out.contains("gradients"));
}

#[test]
fn bench_writes_the_requested_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("patches.csv");
    let o = wmamba(&["bench", "--kind", "patches", "--trials", "1", "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let patches: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(patches, ["64", "256", "1024"]);
}
