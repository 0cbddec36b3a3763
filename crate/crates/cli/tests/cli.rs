//! End-to-end tests driving the `ctnmt` binary as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ctnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnmt"))
        .args(args)
        .output()
        .expect("failed to spawn ctnmt")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

fn write(path: &Path, contents: &str) {
    fs::write(path, contents).unwrap();
}

/// Tiny identity corpus over a five-letter alphabet.
fn copy_corpus(dir: &Path) -> (String, String) {
    let lines = [
        "abcde", "edcba", "aabb", "bccd", "deab", "cade", "bead", "fade",
        "decaf", "beef", "cab", "ace", "bad", "dab", "fed", "cafe",
    ]
    .join("\n");
    let src = dir.join("train.src");
    let tgt = dir.join("train.tgt");
    write(&src, &lines);
    write(&tgt, &lines);
    (src.display().to_string(), tgt.display().to_string())
}

/// Train a micro char-transformer for a few updates; returns the out dir.
fn train_micro(dir: &Path, out_name: &str, max_updates: usize) -> String {
    let (src, tgt) = copy_corpus(dir);
    let out = dir.join(out_name).display().to_string();
    let run = ctnmt(&[
        "train",
        "--mode",
        "char-transformer",
        "--train-src",
        &src,
        "--train-tgt",
        &tgt,
        "--out-dir",
        &out,
        "--set",
        "d_model=16",
        "--set",
        "enc_emb=16",
        "--set",
        "dec_emb=16",
        "--set",
        "heads=2",
        "--set",
        "d_ff=32",
        "--set",
        "enc_layers=1",
        "--set",
        "dec_layers=1",
        "--set",
        &format!("max_updates={max_updates}"),
        "--set",
        "eval_interval=2",
        "--set",
        "token_budget=64",
        "--set",
        "warmup_steps=10",
    ]);
    assert_eq!(exit_code(&run), 0, "train failed: {}", stderr(&run));
    out
}

fn update_lines(log: &str) -> Vec<&str> {
    log.lines()
        .filter(|l| {
            l.split('\t').next().map_or(false, |first| {
                !first.is_empty() && first.chars().all(|c| c.is_ascii_digit())
            })
        })
        .collect()
}

#[test]
fn help_lists_subcommands() {
    let out = ctnmt(&["--help"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for sub in ["bpe-learn", "train", "translate", "score", "benchmark", "vocab"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_flag_exits_1() {
    let out = ctnmt(&["train", "--bogus-flag"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn missing_input_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = ctnmt(&[
        "bpe-learn",
        "--input",
        &dir.path().join("nope.txt").display().to_string(),
        "--output",
        &dir.path().join("merges.txt").display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    write(&cfg, "bogus_key=1\n");
    let (src, tgt) = copy_corpus(dir.path());
    let out = ctnmt(&[
        "train",
        "--config",
        &cfg.display().to_string(),
        "--mode",
        "char-transformer",
        "--train-src",
        &src,
        "--train-tgt",
        &tgt,
        "--out-dir",
        &dir.path().join("run").display().to_string(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("bogus_key"));
}

#[test]
fn bpe_learn_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    write(&corpus, "low lower lowest\nnew newer newest\nwide wider widest\n");
    let merges_a = dir.path().join("a.merges");
    let merges_b = dir.path().join("b.merges");
    for (path, ops) in [(&merges_a, "30"), (&merges_b, "30")] {
        let out = ctnmt(&[
            "bpe-learn",
            "--input",
            &corpus.display().to_string(),
            "--output",
            &path.display().to_string(),
            "--num-ops",
            ops,
        ]);
        assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("merges"));
    }
    assert_eq!(fs::read(&merges_a).unwrap(), fs::read(&merges_b).unwrap());

    let empty = dir.path().join("zero.merges");
    let out = ctnmt(&[
        "bpe-learn",
        "--input",
        &corpus.display().to_string(),
        "--output",
        &empty.display().to_string(),
        "--num-ops",
        "0",
    ]);
    assert_eq!(exit_code(&out), 0);
    assert!(empty.exists());
}

#[test]
fn train_logs_checkpoints_and_config() {
    let dir = TempDir::new().unwrap();
    let (src, tgt) = copy_corpus(dir.path());
    let out_dir = dir.path().join("run").display().to_string();
    let run = ctnmt(&[
        "train",
        "--mode",
        "char-transformer",
        "--train-src",
        &src,
        "--train-tgt",
        &tgt,
        "--dev-src",
        &src,
        "--dev-tgt",
        &tgt,
        "--out-dir",
        &out_dir,
        "--set",
        "d_model=16",
        "--set",
        "enc_emb=16",
        "--set",
        "dec_emb=16",
        "--set",
        "heads=2",
        "--set",
        "d_ff=32",
        "--set",
        "enc_layers=1",
        "--set",
        "dec_layers=1",
        "--set",
        "max_updates=5",
        "--set",
        "eval_interval=2",
        "--set",
        "token_budget=64",
        "--set",
        "warmup_steps=10",
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    let log = stdout(&run);
    assert_eq!(update_lines(&log).len(), 5, "log:\n{log}");
    assert!(log.contains("# dev\tstep="));
    let out_path = Path::new(&out_dir);
    assert!(out_path.join("latest.ckpt").exists());
    assert!(out_path.join("best.ckpt").exists());
    let resolved = fs::read_to_string(out_path.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("mode=char-transformer"));
    assert!(resolved.contains("seed=13"));
    assert!(resolved.contains("d_model=16"));
    assert!(resolved.contains("max_updates=5"));
}

#[test]
fn resolved_config_refeeds_identically() {
    let dir = TempDir::new().unwrap();
    let out_a = train_micro(dir.path(), "a", 4);
    let run_a = fs::read_to_string(Path::new(&out_a).join("resolved.cfg")).unwrap();

    let out_b = dir.path().join("b").display().to_string();
    let run = ctnmt(&[
        "train",
        "--config",
        &Path::new(&out_a).join("resolved.cfg").display().to_string(),
        "--set",
        &format!("out_dir={out_b}"),
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    let run_b = fs::read_to_string(Path::new(&out_b).join("resolved.cfg")).unwrap();
    let strip_out_dir = |text: &str| {
        text.lines()
            .filter(|l| !l.starts_with("out_dir="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_out_dir(&run_a), strip_out_dir(&run_b));

    let log_b = stdout(&run);
    let losses: Vec<String> = update_lines(&log_b)
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(losses.len(), 4);
}

#[test]
fn resume_matches_straight_run() {
    let dir = TempDir::new().unwrap();
    let short = train_micro(dir.path(), "short", 3);
    let resume_out = dir.path().join("resumed").display().to_string();
    let resumed = ctnmt(&[
        "train",
        "--mode",
        "char-transformer",
        "--config",
        &Path::new(&short).join("resolved.cfg").display().to_string(),
        "--resume",
        &Path::new(&short).join("latest.ckpt").display().to_string(),
        "--set",
        &format!("out_dir={resume_out}"),
        "--set",
        "max_updates=5",
    ]);
    assert_eq!(exit_code(&resumed), 0, "{}", stderr(&resumed));
    let resumed_lines = update_lines(&stdout(&resumed))
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>();
    assert_eq!(resumed_lines.len(), 2, "resume should run steps 4 and 5");

    let full = train_micro(dir.path(), "full", 5);
    let _ = full;
    let full_run = fs::read_to_string(dir.path().join("full/resolved.cfg")).unwrap();
    assert!(full_run.contains("max_updates=5"));

    // The loss/lr columns of the resumed steps must match the straight run.
    let straight = ctnmt(&[
        "train",
        "--config",
        &dir.path().join("full/resolved.cfg").display().to_string(),
        "--set",
        &format!("out_dir={}", dir.path().join("full2").display()),
    ]);
    assert_eq!(exit_code(&straight), 0);
    let straight_lines: Vec<String> = update_lines(&stdout(&straight))
        .iter()
        .map(|l| l.to_string())
        .collect();
    let key = |line: &str| {
        let mut parts = line.split('\t');
        (
            parts.next().unwrap().to_string(),
            parts.next().unwrap().to_string(),
            parts.next().unwrap().to_string(),
        )
    };
    let straight_tail: Vec<_> = straight_lines[3..].iter().map(|l| key(l)).collect();
    let resumed_keys: Vec<_> = resumed_lines.iter().map(|l| key(l)).collect();
    assert_eq!(straight_tail, resumed_keys);
}

#[test]
fn translate_runs_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let out = train_micro(dir.path(), "model", 5);
    let ckpt = Path::new(&out).join("latest.ckpt").display().to_string();
    let input = dir.path().join("in.txt");
    write(&input, "abcde\ncab\n");
    let trans_a = dir.path().join("out_a.txt");
    let trans_b = dir.path().join("out_b.txt");
    for path in [&trans_a, &trans_b] {
        let run = ctnmt(&[
            "translate",
            "--checkpoint",
            &ckpt,
            "--input",
            &input.display().to_string(),
            "--output",
            &path.display().to_string(),
            "--beam",
            "3",
        ]);
        assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
        assert!(stdout(&run).contains("beam=3"));
    }
    let text_a = fs::read_to_string(&trans_a).unwrap();
    assert_eq!(text_a.lines().count(), 2);
    assert_eq!(fs::read(&trans_a).unwrap(), fs::read(&trans_b).unwrap());
}

#[test]
fn translate_uses_mode_default_beam() {
    let dir = TempDir::new().unwrap();
    let out = train_micro(dir.path(), "model", 3);
    let input = dir.path().join("in.txt");
    write(&input, "ace\n");
    let run = ctnmt(&[
        "translate",
        "--checkpoint",
        &Path::new(&out).join("latest.ckpt").display().to_string(),
        "--input",
        &input.display().to_string(),
        "--output",
        &dir.path().join("out.txt").display().to_string(),
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    assert!(stdout(&run).contains("beam=20"), "char mode defaults to beam 20");
}

#[test]
fn translate_empty_input_gives_empty_output() {
    let dir = TempDir::new().unwrap();
    let out = train_micro(dir.path(), "model", 3);
    let input = dir.path().join("empty.txt");
    write(&input, "");
    let output = dir.path().join("out.txt");
    let run = ctnmt(&[
        "translate",
        "--checkpoint",
        &Path::new(&out).join("latest.ckpt").display().to_string(),
        "--input",
        &input.display().to_string(),
        "--output",
        &output.display().to_string(),
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    assert_eq!(fs::read_to_string(&output).unwrap(), "");
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    write(&ckpt, "CTNMT1 this is not a checkpoint");
    let input = dir.path().join("in.txt");
    write(&input, "a\n");
    let run = ctnmt(&[
        "translate",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--input",
        &input.display().to_string(),
        "--output",
        &dir.path().join("out.txt").display().to_string(),
    ]);
    assert_eq!(exit_code(&run), 3, "{}", stderr(&run));
}

#[test]
fn score_identity_and_error_codes() {
    let dir = TempDir::new().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    write(&hyp, "the cat sat on the mat\na b c d\n");
    write(&reference, "the cat sat on the mat\na b c d\n");
    let run = ctnmt(&[
        "score",
        "--hyp",
        &hyp.display().to_string(),
        "--ref",
        &reference.display().to_string(),
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    let report = stdout(&run);
    assert!(report.contains("BLEU=100.0000"));
    assert!(report.contains("CHRF=100.0000"));
    assert!(report.contains("CharacTER=0.0000"));
    assert!(report.contains("BLEU\u{2191}"));
    assert!(report.contains("C-TER\u{2193}"));

    let short = dir.path().join("short.txt");
    write(&short, "just one line\n");
    let misaligned = ctnmt(&[
        "score",
        "--hyp",
        &hyp.display().to_string(),
        "--ref",
        &short.display().to_string(),
    ]);
    assert_eq!(exit_code(&misaligned), 3);

    let unknown = ctnmt(&[
        "score",
        "--hyp",
        &hyp.display().to_string(),
        "--ref",
        &reference.display().to_string(),
        "--metrics",
        "meteor",
    ]);
    assert_eq!(exit_code(&unknown), 1);
}

#[test]
fn vocab_reports_and_writes() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    write(&corpus, "abc\nbcd\n");
    let vocab_file = dir.path().join("vocab.txt");
    let run = ctnmt(&[
        "vocab",
        "--input",
        &corpus.display().to_string(),
        "--output",
        &vocab_file.display().to_string(),
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    assert!(stdout(&run).contains("vocabulary:"));
    let text = fs::read_to_string(&vocab_file).unwrap();
    assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\n"));
}

#[test]
fn benchmark_smoke() {
    let run = ctnmt(&[
        "benchmark",
        "--d-model",
        "64",
        "--updates",
        "5",
        "--warmup",
        "0",
        "--pairs",
        "1",
    ]);
    assert_eq!(exit_code(&run), 0, "{}", stderr(&run));
    let report = stdout(&run);
    assert!(report.contains("char-transformer"));
    assert!(report.contains("char-reduction-transformer"));
    assert!(report.contains("ratio="));
    assert!(report.contains("d_model=64"));
}
