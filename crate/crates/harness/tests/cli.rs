use std::path::Path;
use std::process::{Command, Output};

use cdkd_core::synth::{read_dump, Split};

fn cdkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdkd")).args(args).output().unwrap()
}

fn tiny(out: &Path) -> Vec<String> {
    ["data.n_train=32", "data.n_val=16", "optim.batch_size=16", "optim.epochs=1"]
        .iter()
        .map(|s| s.to_string())
        .chain([format!("paths.out_dir={}", out.display())])
        .flat_map(|s| ["--set".to_string(), s])
        .collect()
}

fn run_with(sub: &str, flags: &[String], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = vec![sub];
    args.extend(flags.iter().map(String::as_str));
    args.extend(extra);
    cdkd(&args)
}

#[test]
fn config_errors_exit_with_two() {
    let out = cdkd(&["train-teacher", "--set", "optim.unknown=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.cfg");
    std::fs::write(&file, "data.m = 5\n").unwrap();
    let out = cdkd(&["train-student", "--config", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn incompatible_checkpoints_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = cdkd(&["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let flags = tiny(dir.path());
    let mut with_teacher = flags.clone();
    with_teacher.extend(["--set".into(), format!("paths.teacher={}", junk.display())]);
    assert_eq!(run_with("train-student", &with_teacher, &[]).status.code(), Some(4));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with("train-teacher", &tiny(dir.path()), &["--set", "optim.lr=1e300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_evaluate_and_report_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let out = run_with("train-teacher", &tiny(&teacher_dir), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = teacher_dir.join("best.ckpt");

    let student_dir = dir.path().join("student");
    let mut flags = tiny(&student_dir);
    flags.extend(["--set".into(), format!("paths.teacher={}", ckpt.display())]);
    let out = run_with("train-student", &flags, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = cdkd(&["eval", "--checkpoint", student_dir.join("best.ckpt").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("student on val (16 samples)"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("pck@")).count(), 3);

    let out = cdkd(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "train"]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("teacher on train (32 samples)"));

    let out = cdkd(&["report", student_dir.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["summary.txt", "losses.svg", "tau.svg", "xi.svg", "pck.svg"] {
        assert!(student_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn gen_data_writes_readable_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with("gen-data", &tiny(dir.path()), &[]);
    assert!(out.status.success());
    let train = read_dump(&mut std::fs::File::open(dir.path().join("train.bin")).unwrap()).unwrap();
    let val = read_dump(&mut std::fs::File::open(dir.path().join("val.bin")).unwrap()).unwrap();
    assert_eq!((train.len(), train.split), (32, Split::Train));
    assert_eq!((val.len(), val.split), (16, Split::Val));
}

#[test]
fn grad_check_passes() {
    let out = cdkd(&["grad-check"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 20);
    assert!(!text.contains("FAIL"));
}
