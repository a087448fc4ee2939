//! End-to-end tests of the `tunegen` binary: exit codes, printed seeds and
//! digests, and byte-level reproducibility of every artifact-producing
//! subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tunegen"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_tunebook(dir: &Path) -> PathBuf {
    let path = dir.join("tunes.abc");
    let book = "\
X:1
T:First
M:4/4
K:D
|:fd|ec:|fd|ec|]

X:2
K:G
ga|bg|ed|Be|]

X:3
K:C
ab|cd|ef|]

X:4
K:Am
|:ea|ge:|dB|GB|]

X:5
L:1/8
K:Em
BE|GA|FD|E2|]

X:6
K:Bad Tune With No Body
";
    std::fs::write(&path, book).unwrap();
    path
}

#[test]
fn preprocess_reports_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_tunebook(dir.path());
    let out1 = dir.path().join("a.txt");
    let out2 = dir.path().join("b.txt");

    let args = |out: &Path| {
        vec![
            "preprocess".to_string(),
            "--in".into(),
            input.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--val-frac".into(),
            "0.2".into(),
            "--seed".into(),
            "9".into(),
        ]
    };
    let r1 = bin().args(args(&out1)).output().unwrap();
    assert!(r1.status.success(), "{}", stderr(&r1));
    let text = stdout(&r1);
    assert!(text.contains("config digest:"));
    assert!(text.contains("seed: 9"));
    assert!(text.contains("accepted: 5"));
    assert!(text.contains("skipped[parse:EmptyBody]: 1"));

    let r2 = bin().args(args(&out2)).output().unwrap();
    assert!(r2.status.success());
    assert_eq!(
        std::fs::read(&out1).unwrap(),
        std::fs::read(&out2).unwrap(),
        "corpus bytes differ between identical runs"
    );
    let val1 = dir.path().join("a.txt.val");
    let val2 = dir.path().join("b.txt.val");
    assert_eq!(
        std::fs::read(val1).unwrap(),
        std::fs::read(val2).unwrap()
    );
}

#[test]
fn full_pipeline_train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_tunebook(dir.path());
    let corpus = dir.path().join("corpus.txt");
    let r = run(&[
        "preprocess",
        "--in",
        input.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
        "--val-frac",
        "0.2",
        "--seed",
        "3",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));

    // Two identical short training runs produce byte-identical checkpoints.
    let ckpt1 = dir.path().join("m1.ckpt");
    let ckpt2 = dir.path().join("m2.ckpt");
    for ckpt in [&ckpt1, &ckpt2] {
        let r = run(&[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--preset",
            "toy",
            "--steps",
            "10",
            "--batch",
            "4",
            "--seed",
            "5",
            "--eval-every",
            "5",
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
        let text = stdout(&r);
        assert!(text.contains("config digest:"));
        assert!(text.contains("seed: 5"));
    }
    assert_eq!(
        std::fs::read(&ckpt1).unwrap(),
        std::fs::read(&ckpt2).unwrap(),
        "checkpoints differ between identical runs"
    );
    // Loss curves too.
    assert_eq!(
        std::fs::read(dir.path().join("m1.ckpt.curve.tsv")).unwrap(),
        std::fs::read(dir.path().join("m2.ckpt.curve.tsv")).unwrap()
    );

    // Generation: reproducible bytes for tune and metadata sidecar.
    let prompt = dir.path().join("prompt.txt");
    std::fs::write(&prompt, "S:1\nB:4\nX:2\nK:G\n").unwrap();
    let gen1 = dir.path().join("g1.abc");
    let gen2 = dir.path().join("g2.abc");
    for gen in [&gen1, &gen2] {
        let r = run(&[
            "generate",
            "--ckpt",
            ckpt1.to_str().unwrap(),
            "--prompt",
            prompt.to_str().unwrap(),
            "--temperature",
            "0.9",
            "--top-p",
            "0.95",
            "--seed",
            "12",
            "--max-patches",
            "16",
            "--out",
            gen.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    assert_eq!(
        std::fs::read(&gen1).unwrap(),
        std::fs::read(&gen2).unwrap(),
        "generations differ between identical runs"
    );
    let meta = std::fs::read_to_string(dir.path().join("g1.abc.meta")).unwrap();
    assert!(meta.contains("seed=12"));
    assert!(meta.contains("form_similarity="));
    let tune = std::fs::read_to_string(&gen1).unwrap();
    assert!(tune.starts_with("S:1\nB:4\nX:2\nK:G\n"));

    // Eval produces a report file.
    let report = dir.path().join("report.txt");
    let r = run(&[
        "eval",
        "--ckpt",
        ckpt1.to_str().unwrap(),
        "--metric",
        "controllability",
        "--n",
        "3",
        "--corpus",
        corpus.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("controllability="));
    assert!(report_text.contains("config_digest="));
}

#[test]
fn usage_errors_exit_1() {
    // Unknown flag.
    let r = run(&["eval", "--bogus"]);
    assert_eq!(r.status.code(), Some(1));
    // Zero sample count.
    let dir = tempfile::tempdir().unwrap();
    let fake = dir.path().join("x.ckpt");
    std::fs::write(&fake, b"junk").unwrap();
    let r = run(&[
        "eval",
        "--ckpt",
        fake.to_str().unwrap(),
        "--metric",
        "efficiency",
        "--n",
        "0",
        "--corpus",
        fake.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1), "{}", stderr(&r));
    // Bad top-p.
    let prompt = dir.path().join("p.txt");
    std::fs::write(&prompt, "S:1\nB:1\n").unwrap();
    let r = run(&[
        "generate",
        "--ckpt",
        fake.to_str().unwrap(),
        "--prompt",
        prompt.to_str().unwrap(),
        "--top-p",
        "1.5",
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = dir.path().join("p.txt");
    std::fs::write(&prompt, "S:1\nB:1\n").unwrap();
    let missing = dir.path().join("missing.ckpt");
    let r = run(&[
        "generate",
        "--ckpt",
        missing.to_str().unwrap(),
        "--prompt",
        prompt.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(
        stderr(&r).contains("missing.ckpt"),
        "message must name the path: {}",
        stderr(&r)
    );

    // A corrupt checkpoint is a data error, not a crash.
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"not a checkpoint at all").unwrap();
    let r = run(&[
        "generate",
        "--ckpt",
        corrupt.to_str().unwrap(),
        "--prompt",
        prompt.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn help_exits_0_and_documents_subcommands() {
    let r = run(&["--help"]);
    assert_eq!(r.status.code(), Some(0));
    let text = stdout(&r);
    for sub in ["preprocess", "train", "generate", "eval", "bench"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    // Per-subcommand help documents the flags.
    let r = run(&["generate", "--help"]);
    assert_eq!(r.status.code(), Some(0));
    let text = stdout(&r);
    for flag in ["--ckpt", "--prompt", "--temperature", "--top-p", "--seed"] {
        assert!(text.contains(flag), "generate help lacks {flag}");
    }
}

#[test]
fn data_dir_env_supplies_default_paths() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_tunebook(dir.path());
    let data_dir = dir.path().join("data");
    let r = bin()
        .env("TUNEGEN_DATA_DIR", &data_dir)
        .args([
            "preprocess",
            "--in",
            input.to_str().unwrap(),
            "--val-frac",
            "0",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(data_dir.join("corpus.txt").is_file());

    // Without the variable and without --out, it's a usage error.
    let r = bin()
        .env_remove("TUNEGEN_DATA_DIR")
        .args([
            "preprocess",
            "--in",
            input.to_str().unwrap(),
            "--val-frac",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bench_prints_accounting_table() {
    let r = run(&[
        "bench",
        "--preset",
        "toy",
        "--mode",
        "dual",
        "--lens",
        "64,128",
        "--seed",
        "4",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let text = stdout(&r);
    assert!(text.contains("analytic attention cost"));
    assert!(text.contains("dual-measured"));
    assert!(text.contains("config digest:"));
}
