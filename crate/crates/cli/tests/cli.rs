use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semgraph::losses::ScorerParams;
use semgraph::selftest::{LIST_STATES_GRAMMAR, LIST_STATES_SENTENCE, LIST_STATES_WEIGHTS};

fn semgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn put(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn list_states(dir: &Path) {
    put(dir, "g.txt", LIST_STATES_GRAMMAR);
    put(dir, "w.txt", LIST_STATES_WEIGHTS);
    put(dir, "s.txt", &format!("{LIST_STATES_SENTENCE}\n"));
}

#[test]
fn parse_list_states() {
    let dir = tempfile::tempdir().unwrap();
    list_states(dir.path());
    let o = semgraph(
        dir.path(),
        &["parse", "--grammar", "g.txt", "--weights", "w.txt", "--input", "s.txt", "-o", "out.txt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = fs::read_to_string(dir.path().join("out.txt")).unwrap();
    let fields: Vec<&str> = out.trim_end().split('\t').collect();
    assert_eq!(fields[0], "state_all");
    assert_eq!(fields[2], "integral=true");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out.txt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "parse");
    assert_eq!(manifest["grammar"], "g.txt");
    assert_eq!(manifest["inputs"], serde_json::json!(["w.txt", "s.txt"]));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["timing"]["items"], 1);
}

#[test]
fn parse_without_rounding_reports_the_relaxation() {
    let dir = tempfile::tempdir().unwrap();
    list_states(dir.path());
    let o = semgraph(
        dir.path(),
        &["parse", "--grammar", "g.txt", "--weights", "w.txt", "--input", "s.txt", "--no-round", "--iters", "20"],
    );
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("FAIL\t"), "{out}");
    assert!(out.contains("integral=false"));
    assert!(out.contains("support=") && out.contains("ROOT->state_all@2=1.0000"));
}

#[test]
fn verbose_prints_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    list_states(dir.path());
    let o = semgraph(
        dir.path(),
        &["parse", "--grammar", "g.txt", "--weights", "w.txt", "--input", "s.txt", "--verbose", "--iters", "3"],
    );
    assert!(o.status.success());
    assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("[1] iter=")).count(), 4);
}

#[test]
fn empty_input_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    list_states(dir.path());
    put(dir.path(), "empty.txt", "");
    let o = semgraph(
        dir.path(),
        &["parse", "--grammar", "g.txt", "--weights", "w.txt", "--input", "empty.txt"],
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");
}

#[test]
fn weights_beyond_the_sentence_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    list_states(dir.path());
    put(dir.path(), "short.txt", "states\n");
    let o = semgraph(
        dir.path(),
        &["parse", "--grammar", "g.txt", "--weights", "w.txt", "--input", "short.txt"],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mentions word 2"));
}

#[test]
fn missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = semgraph(dir.path(), &["eval", "--gold", "nope.txt", "--pred", "nope.txt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.txt"));
}

#[test]
fn eval_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    put(d, "gold.txt", "a\nb\nf(a,b)\nc\n");
    put(d, "same.txt", "a\nb\nf(a,b)\nc\n");
    put(d, "one_off.txt", "a\nb\nf(a,b)\nFAIL\n");
    put(d, "permuted.txt", "a\tgap=0\nb\nf(b,a)\nc\n");
    put(d, "short.txt", "a\nb\n");
    let acc = |pred: &str| stdout(&semgraph(d, &["eval", "--gold", "gold.txt", "--pred", pred]));
    assert_eq!(acc("same.txt"), "1.0000\n");
    assert_eq!(acc("one_off.txt"), "0.7500\n");
    assert_eq!(acc("permuted.txt"), "1.0000\n");
    let o = semgraph(d, &["eval", "--gold", "gold.txt", "--pred", "short.txt"]);
    assert!(!o.status.success());
}

#[test]
fn align_forced_and_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    put(d, "g.txt", "type e\ntag A e\ntag P e e=1\n");
    put(d, "w.txt", "");
    put(d, "data.tsv", "x\tA\nx y\tP(A)\nx\tP(A)\n");
    let o = semgraph(d, &["align", "--grammar", "g.txt", "--weights", "w.txt", "--data", "data.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("0:1\t"));
    let pairs = lines[1].split('\t').next().unwrap();
    assert!(pairs == "0:1 1:2" || pairs == "0:2 1:1", "{pairs}");
    assert!(lines[2].starts_with("FAIL\t"));
}

#[test]
fn bad_dataset_lines_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    put(d, "g.txt", "type e\ntag A e\n");
    put(d, "w.txt", "");
    put(d, "data.tsv", "x\tA\nno program here\n");
    let o = semgraph(d, &["align", "--grammar", "g.txt", "--weights", "w.txt", "--data", "data.tsv"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn gen_train_parse_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = semgraph(d, &["gen", "--out-dir", "c", "--train", "60", "--test", "20", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("c/corpus.manifest.json").exists());
    let o = semgraph(
        d,
        &[
            "train", "--grammar", "c/grammar.txt", "--data", "c/train.tsv", "--dev", "c/test.tsv", "--epochs", "3",
            "--iters", "100", "-o", "m.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stdout(&o);
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.starts_with("epoch=") && l.contains("dev_exact=")));
    assert!(d.join("m.ckpt.manifest.json").exists());
    let o = semgraph(
        d,
        &[
            "parse", "--grammar", "c/grammar.txt", "--checkpoint", "m.ckpt", "--input", "c/test.sentences",
            "--iters", "100", "-o", "pred.txt",
        ],
    );
    assert!(o.status.success());
    let o = semgraph(d, &["eval", "--gold", "c/test.gold", "--pred", "pred.txt"]);
    let acc: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(semgraph(d, &["gen", "--out-dir", "c", "--train", "5", "--test", "1"]).status.success());
    let o = semgraph(
        d,
        &["train", "--grammar", "c/grammar.txt", "--data", "c/train.tsv", "--epochs", "0", "--lr", "0.25", "-o", "m.ckpt"],
    );
    assert!(o.status.success());
    let fresh = ScorerParams::new(ScorerParams::DEFAULT_SLOTS, 0.25, 7).to_text();
    assert_eq!(fs::read_to_string(d.join("m.ckpt")).unwrap(), fresh);
}

#[test]
fn output_order_and_bytes_do_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(semgraph(d, &["gen", "--out-dir", "c", "--train", "40", "--test", "30"]).status.success());
    let args = |jobs: &'static str| {
        [
            "train", "--grammar", "c/grammar.txt", "--data", "c/train.tsv", "--mode", "weak", "--epochs", "2",
            "--iters", "100", "--jobs", jobs, "-o",
        ]
    };
    let mut a = args("1").to_vec();
    a.push("m1.ckpt");
    let mut b = args("4").to_vec();
    b.push("m4.ckpt");
    assert_eq!(stdout(&semgraph(d, &a)), stdout(&semgraph(d, &b)));
    let c1 = fs::read_to_string(d.join("m1.ckpt")).unwrap();
    assert_eq!(c1, fs::read_to_string(d.join("m4.ckpt")).unwrap());
    let parse = |jobs: &str| {
        stdout(&semgraph(
            d,
            &[
                "parse", "--grammar", "c/grammar.txt", "--checkpoint", "m1.ckpt", "--input", "c/test.tsv",
                "--iters", "100", "--jobs", jobs,
            ],
        ))
    };
    let one = parse("1");
    assert_eq!(one.lines().count(), 30);
    assert_eq!(one, parse("4"));
}

#[test]
fn selftest_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |scale: &str| {
        semgraph(
            dir.path(),
            &["selftest", "--instances", "12", "--seed", "7", "--tolerance-scale", scale],
        )
    };
    let a = run("1");
    let b = run("1");
    assert_eq!(stdout(&a), stdout(&b));
    let report = stdout(&a);
    assert!(report.starts_with("selftest seed=7 instances=12"));
    assert!(report.lines().last().unwrap().starts_with("summary passed="));
    // tolerances shrunk to nothing: the numeric checks must fail
    let tight = run("1e-30");
    assert!(!tight.status.success());
    let report = stdout(&tight);
    assert!(report.lines().any(|l| l.starts_with("FAIL 3 ")), "{report}");
}

#[test]
fn rejects_conflicting_scorers() {
    let dir = tempfile::tempdir().unwrap();
    list_states(dir.path());
    let o = semgraph(
        dir.path(),
        &["parse", "--grammar", "g.txt", "--weights", "w.txt", "--checkpoint", "w.txt", "--input", "s.txt"],
    );
    assert!(!o.status.success());
}
