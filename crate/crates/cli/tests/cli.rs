use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn corrnet(args: &[&str], run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrnet"))
        .args(args)
        .arg("--run-dir")
        .arg(run_dir)
        .env_remove("CORRNET_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failure(out: &Output) -> (i32, String) {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "one-line error: {err}");
    (out.status.code().unwrap(), err)
}

fn synth(dir: &Path, extra: &[&str]) {
    let data = dir.join("data");
    let mut args = vec![
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--train",
        "6",
        "--val",
        "2",
        "--test",
        "3",
        "--n-correspondences",
        "64",
        "--seed",
        "4",
    ];
    args.extend_from_slice(extra);
    ok(&corrnet(&args, &dir.join("synth-run")));
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), &[]);
    synth(b.path(), &[]);
    for split in ["train", "val", "test"] {
        let f = format!("data/{split}.bin");
        assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap());
    }
}

#[test]
fn oracle_is_exact_on_noise_free_data() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--noise", "0"]);
    let data = t.path().join("data");
    let run = t.path().join("eval");
    let out = ok(&corrnet(&["eval", "--data", data.to_str().unwrap(), "--methods", "oracle,ransac"], &run));
    let oracle = out.lines().find(|l| l.starts_with("oracle")).unwrap();
    assert_eq!(oracle.split('\t').nth(3), Some("1.0000"), "{out}");
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,n_pairs,failures,map5,map10,map20"));
    let per_pair = fs::read_to_string(run.join("per_pair.csv")).unwrap();
    assert_eq!(per_pair.lines().count(), 1 + 2 * 3);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_corrnet"))
        .args(["eval", "--methods", "oracle", "--run-dir"])
        .arg(t.path().join("eval"))
        .env("CORRNET_DATA_DIR", t.path().join("data"))
        .output()
        .unwrap();
    ok(&out);
}

#[test]
fn train_infer_eval_bench_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &[]);
    let data = t.path().join("data");
    let d = data.to_str().unwrap();
    let run = t.path().join("train");
    let small = [
        "--width", "8", "--blocks", "1", "--steps", "6", "--batch-size", "2", "--val-every", "3",
    ];
    let mut args = vec!["train", "--data", d, "--variant", "classification"];
    args.extend_from_slice(&small);
    let out = ok(&corrnet(&args, &run));
    assert!(out.contains("best step"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "step,loss_total,loss_cls,loss_ess,val_f1,val_map5,val_map10,val_map20,degenerate_count"
    ));
    let ckpt = run.join("best.ckpt");
    let c = ckpt.to_str().unwrap();

    let inf = t.path().join("infer");
    let test = data.join("test.bin");
    ok(&corrnet(&["infer", "--checkpoint", c, "--pairs", test.to_str().unwrap()], &inf));
    assert_eq!(fs::read_to_string(inf.join("weights.csv")).unwrap().lines().count(), 1 + 3 * 64);
    assert_eq!(fs::read_to_string(inf.join("essentials.csv")).unwrap().lines().count(), 1 + 3);

    let ev = t.path().join("eval");
    let out = ok(&corrnet(
        &["eval", "--data", d, "--checkpoint", c, "--methods", "net_8pt,net_ransac,ransac"],
        &ev,
    ));
    assert_eq!(out.lines().count(), 4);

    let bench = t.path().join("bench");
    let out = ok(&corrnet(
        &["bench", "--data", d, "--checkpoint", c, "--methods", "ransac,net_ransac", "--repetitions", "1"],
        &bench,
    ));
    assert!(out.lines().any(|l| l.starts_with("net_ransac")));
    assert!(bench.join("timing.csv").exists());
}

#[test]
fn ablate_writes_a_table() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &[]);
    let d = t.path().join("data");
    let run = t.path().join("ablate");
    ok(&corrnet(
        &[
            "ablate", "--data", d.to_str().unwrap(), "--variants", "ours,direct", "--width", "8", "--blocks",
            "1", "--steps", "3", "--batch-size", "2", "--beta-activation-step", "1",
        ],
        &run,
    ));
    let table = fs::read_to_string(run.join("ablation.csv")).unwrap();
    // baseline + two methods per variant
    assert_eq!(table.lines().count(), 1 + 1 + 4);
    assert!(run.join("ours/best.ckpt").exists() && run.join("direct/best.ckpt").exists());
}

#[test]
fn dump_config_round_trips() {
    let t = tempfile::tempdir().unwrap();
    let first = ok(&corrnet(
        &["--dump-config", "--seed", "11", "train", "--lr", "0.0003", "--variant", "essential"],
        &t.path().join("a"),
    ));
    assert!(first.contains("variant = \"essential\""));
    let file = t.path().join("run.toml");
    fs::write(&file, &first).unwrap();
    let second = ok(&corrnet(
        &["--dump-config", "--config", file.to_str().unwrap(), "train"],
        &t.path().join("b"),
    ));
    assert_eq!(first, second);
}

#[test]
fn errors_have_distinct_classes_and_codes() {
    let t = tempfile::tempdir().unwrap();
    let bad_cfg = t.path().join("bad.toml");
    fs::write(&bad_cfg, "[train]\nstepz = 1\n").unwrap();
    let (code, err) = failure(&corrnet(&["--config", bad_cfg.to_str().unwrap(), "train"], t.path()));
    assert!(err.starts_with("error=config "), "{err}");
    let config_code = code;

    let missing = t.path().join("nope.bin");
    let (code, err) = failure(&corrnet(&["eval", "--data", missing.to_str().unwrap()], t.path()));
    assert!(err.starts_with("error=io "), "{err}");
    let io_code = code;

    let corrupt = t.path().join("corrupt.bin");
    fs::write(&corrupt, b"CNETPAIR\x01\x00\x00\x00garbage").unwrap();
    let (code, err) = failure(&corrnet(&["eval", "--data", corrupt.to_str().unwrap()], t.path()));
    assert!(err.starts_with("error=format "), "{err}");
    let format_code = code;

    synth(t.path(), &[]);
    let test = t.path().join("data/test.bin");
    let (code, err) = failure(&corrnet(
        &["eval", "--data", test.to_str().unwrap(), "--methods", "net_8pt"],
        t.path(),
    ));
    assert!(err.starts_with("error=config "), "{err}");
    assert_eq!(code, config_code);

    let mut codes = vec![config_code, io_code, format_code];
    codes.dedup();
    assert_eq!(codes.len(), 3);
    assert!(codes.iter().all(|&c| c != 0 && c != 2));
}
