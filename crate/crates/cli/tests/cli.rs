use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hmlstm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmlstm"))
        .args(args)
        .current_dir(dir)
        .env_remove("HMLSTM_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_corpus(dir: &Path) {
    let words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];
    let mut text = String::new();
    let mut x: u64 = 7;
    for _ in 0..2500 {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        text.push_str(words[(x >> 33) as usize % words.len()]);
        text.push(' ');
    }
    fs::write(dir.join("corpus.txt"), text).unwrap();
}

const SMALL: &[&str] = &[
    "--layers", "2", "--dims", "12", "--embed-dim", "6", "--out-embed-dim", "6", "--batch", "4", "--window", "20",
];

fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let mut args = vec!["train", "--corpus", "corpus.txt", "--epochs", "2", "--out", "run", "--seed", "3"];
    args.extend_from_slice(SMALL);
    let o = hmlstm(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn train_writes_a_log_and_checkpoints() {
    let dir = trained();
    let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join("run/best.ckpt").exists());
    assert!(dir.path().join("run/last.ckpt").exists());
}

#[test]
fn eval_is_repeatable_and_matches_the_logged_validation_bpc() {
    let dir = trained();
    let args = ["eval", "--corpus", "corpus.txt", "--checkpoint", "run/best.ckpt", "--split", "valid"];
    let a = hmlstm(&args, dir.path());
    let b = hmlstm(&args, dir.path());
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));

    let bpc: f64 = stdout(&a).split_whitespace().nth(3).unwrap().parse().unwrap();
    let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let best = log
        .lines()
        .skip(1)
        .map(|l| {
            let v = l.split("\"val_bpc\":").nth(1).unwrap();
            v[..v.find(',').unwrap()].parse::<f64>().unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    assert!((bpc - best).abs() <= 1e-10, "eval {bpc} logged {best}");
}

#[test]
fn resume_continues_from_a_checkpoint() {
    let dir = trained();
    let o = hmlstm(
        &["train", "--corpus", "corpus.txt", "--checkpoint", "run/last.ckpt", "--epochs", "1", "--out", "more"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("more/train_log.jsonl")).unwrap();
    let epochs: Vec<&str> = log.lines().map(|l| &l[..11]).collect();
    assert_eq!(epochs, ["{\"epoch\":2,", "{\"epoch\":3,"]);
}

#[test]
fn trace_of_270_characters_prints_three_panels() {
    let dir = trained();
    let o = hmlstm(
        &["trace", "--checkpoint", "run/best.ckpt", "--corpus", "corpus.txt", "--split", "train", "--out", "heat.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let panels: Vec<&str> = out.split("\n\n").collect();
    assert!(panels.len() >= 3);
    for p in &panels[..3] {
        assert_eq!(p.lines().count(), 2, "{p}");
        assert!(p.lines().all(|l| l.chars().count() == 90));
    }
    assert!(out.contains("reduction"));
    let heat = fs::read_to_string(dir.path().join("heat.csv")).unwrap();
    assert_eq!(heat.lines().count(), 3);
}

#[test]
fn sample_starts_with_the_prime() {
    let dir = trained();
    let o = hmlstm(&["sample", "--checkpoint", "run/best.ckpt", "--prime", "the ", "--length", "30"], dir.path());
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("the "));
    assert_eq!(s.trim_end_matches('\n').chars().count(), 34);
}

#[test]
fn data_dir_resolves_relative_corpus_paths() {
    let dir = trained();
    let elsewhere = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run/best.ckpt");
    let o = Command::new(env!("CARGO_BIN_EXE_hmlstm"))
        .args(["eval", "--corpus", "corpus.txt", "--checkpoint", ck.to_str().unwrap()])
        .current_dir(elsewhere.path())
        .env("HMLSTM_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_and_oracle_pass() {
    let dir = tempfile::tempdir().unwrap();
    let g = hmlstm(&["gradcheck", "--probes", "60"], dir.path());
    assert_eq!(g.status.code(), Some(0), "{}", stdout(&g));
    assert!(stdout(&g).contains("PASS"));
    let o = hmlstm(&["oracle"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn oracle_reports_failure_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = hmlstm(&["oracle", "--seeds", "1", "--tolerance=-1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    assert_eq!(hmlstm(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(hmlstm(&["train", "--corpus", "missing.txt"], dir.path()).status.code(), Some(3));
    let mut args = vec!["train", "--corpus", "corpus.txt", "--layers", "1", "--out", "x"];
    args.extend_from_slice(&SMALL[2..]);
    assert_eq!(hmlstm(&args, dir.path()).status.code(), Some(2));
    let o = hmlstm(&["train", "--corpus", "corpus.txt", "--dims", "4,4", "--layers", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(hmlstm(&["eval", "--corpus", "corpus.txt", "--checkpoint", "nope.ckpt"], dir.path()).status.code(), Some(3));
}
