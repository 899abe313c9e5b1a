use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rnmt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(rnmt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rnmt(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(rnmt(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_nonzero() {
    let out = rnmt(&["evaluate", "--hyp", "/nonexistent/h", "--reference", "/nonexistent/r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn evaluate_identical_files_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("ref.txt");
    fs::write(&f, "the cat sat on the mat\na quick brown fox\n").unwrap();
    let out = ok(&["evaluate", "--hyp", p(&f), "--reference", p(&f)]);
    assert_eq!(out.trim(), "BLEU\t100.00");
}

#[test]
fn align_then_filter_follows_the_ceiling_rule() {
    let dir = tempfile::tempdir().unwrap();
    let auto = dir.path().join("auto");
    let manual = dir.path().join("manual");
    fs::write(&auto, "hello world how are you\n\nfine thanks and you\n").unwrap();
    fs::write(&manual, "Hello, world!\nHow are you?\n\nFine, thanks.\nAnd you?\n").unwrap();
    let aligned = dir.path().join("aligned.tsv");
    let out = ok(&["align", "--auto", p(&auto), "--manual", p(&manual), "-o", p(&aligned)]);
    assert!(out.contains("pairs\t4"), "{out}");
    let rows = fs::read_to_string(&aligned).unwrap();
    assert!(rows.starts_with("hello world\thello world\t0.000000"));

    let kept = dir.path().join("kept.tsv");
    let out = ok(&["filter", "-i", p(&aligned), "--drop-fraction", "0.001", "-o", p(&kept)]);
    // ceil(0.001 * 4) = 1 dropped
    assert_eq!(out.trim(), "kept\t3\tof\t4");
    assert_eq!(fs::read_to_string(&kept).unwrap().lines().count(), 3);

    let cfg = dir.path().join("tool.toml");
    fs::write(&cfg, "[filter]\ndrop_fraction = 0.5\n").unwrap();
    let out = ok(&["filter", "--config", p(&cfg), "-i", p(&aligned), "-o", p(&kept)]);
    assert_eq!(out.trim(), "kept\t2\tof\t4");
}

#[test]
fn make_noise_honours_seed_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let lines: Vec<String> = (0..200).map(|i| format!("w{} w{} w{} w{}", i % 7, i % 5, i % 3, i % 11)).collect();
    fs::write(&clean, lines.join("\n")).unwrap();
    let cfg = dir.path().join("noise.toml");
    fs::write(&cfg, "p_delete = 0.05\np_substitute = 0.1\nseed = 3\n").unwrap();
    let run = |seed: &str, out: &Path| {
        ok(&["make-noise", "--config", p(&cfg), "--seed", seed, "-i", p(&clean), "-o", p(out)])
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let report = run("7", &a);
    run("7", &b);
    run("8", &c);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let wer: f64 = report.trim().rsplit('\t').next().unwrap().parse().unwrap();
    assert!(wer > 0.05 && wer < 0.3, "{report}");
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["toy-data", "-o", p(d), "--pairs", "300", "--transcriptions", "200", "--test", "20"]);
    ok(&[
        "align",
        "--auto",
        p(&d.join("transcripts.auto")),
        "--manual",
        p(&d.join("transcripts.manual")),
        "-o",
        p(&d.join("aligned.tsv")),
    ]);
    ok(&["filter", "-i", p(&d.join("aligned.tsv")), "-o", p(&d.join("transcripts.tsv"))]);
    ok(&["train", "--config", p(&d.join("baseline.toml")), "--steps", "20"]);
    let base = d.join("runs/baseline/ckpt-20");
    assert!(base.exists());
    let out = ok(&[
        "train",
        "--config",
        p(&d.join("adversarial.toml")),
        "--steps",
        "5",
        "--baseline",
        p(&base),
        "--seed",
        "4",
    ]);
    assert!(out.contains("l_enc"));
    let echoed = fs::read_to_string(d.join("runs/adversarial/config.toml")).unwrap();
    assert!(echoed.contains("seed = 4"));

    let ckpt = d.join("runs/adversarial/ckpt-5");
    let hyp = d.join("hyp.txt");
    ok(&["translate", "--checkpoint", p(&ckpt), "-i", p(&d.join("test.noisy")), "-o", p(&hyp)]);
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 20);
    let evals = d.join("evals.tsv");
    for cond in ["clean", "noisy"] {
        ok(&[
            "evaluate",
            "--checkpoint",
            p(&ckpt),
            "--input",
            p(&d.join(format!("test.{cond}"))),
            "--reference",
            p(&d.join("test.ref")),
            "--report",
            p(&evals),
            "--condition",
            cond,
            "--alpha",
            "0.5",
            "--beta",
            "0.5",
        ]);
    }
    let report = d.join("report");
    ok(&[
        "report",
        "--evals",
        p(&evals),
        "--loss-log",
        p(&d.join("runs/baseline/loss.tsv")),
        p(&d.join("runs/adversarial/loss.tsv")),
        "-o",
        p(&report),
    ]);
    let curves = fs::read_to_string(report.join("bleu_curves.tsv")).unwrap();
    assert!(curves.starts_with("step\tbleu\tcondition\talpha\tbeta\n"));
    assert_eq!(curves.trim_end().split("\n\n").count(), 2);
    let losses = fs::read_to_string(report.join("loss_curves.tsv")).unwrap();
    assert_eq!(losses.lines().filter(|l| l.starts_with("adversarial\t")).count(), 5);
}

#[test]
fn report_without_evaluations_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["report", "-o", p(tmp.path())]);
    assert_eq!(
        fs::read_to_string(tmp.path().join("bleu_curves.tsv")).unwrap(),
        "step\tbleu\tcondition\talpha\tbeta\n"
    );
}
