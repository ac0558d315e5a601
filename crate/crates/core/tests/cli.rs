//! End-to-end exercise of the command-line surface: corpus generation,
//! training, translation, evaluation, diagnostics, comparison, and the
//! exit-code contract (0 success, 1 usage, 2 data, 3 numeric).

use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bridgemt"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn stdout_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn usage_problems_exit_one_and_help_exits_zero() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout_of(&help).contains("translate"));

    let bogus = bin().arg("frobnicate").output().unwrap();
    assert_eq!(bogus.status.code(), Some(1));

    let missing_flag = bin().args(["translate", "--model", "x.ckpt"]).output().unwrap();
    assert_eq!(missing_flag.status.code(), Some(1), "required flags absent");

    let no_config = bin().args(["train", "does-not-exist.toml"]).output().unwrap();
    assert_eq!(no_config.status.code(), Some(2), "missing config file is a data error");
}

#[test]
fn the_cli_round_trip_covers_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let corpus = root.join("corpus");
    let run = root.join("run");

    // --- gen-data ------------------------------------------------------
    write(
        &root.join("gen.toml"),
        &format!(
            r#"
out_dir = "{}"

[corpus]
seed = 5
train_sentences = 40
valid_sentences = 8
test_sentences = 4
zeroshot_sentences = 4
"#,
            corpus.display()
        ),
    );
    let out = bin().arg("gen-data").arg(root.join("gen.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(corpus.join("vocab.txt").exists());
    assert!(corpus.join("meta.toml").exists());
    assert!(corpus.join("train.en-xa.src").exists());
    assert!(corpus.join("zs.xa-xb.clen").exists());

    // --- train -----------------------------------------------------------
    let train_toml = format!(
        r#"
data_dir = "{}"
out_dir = "{}"

[model]
mode = "variable"
d_model = 16
heads = 2
ffn_hidden = 24
enc_layers = 1
bridge_layers = 1
dec_layers = 1
max_slots = 12
len_classes = 12

[train]
epochs = 1
batch_size = 8
seed = 1
"#,
        corpus.display(),
        run.display()
    );
    write(&root.join("train.toml"), &train_toml);
    let out = bin().arg("train").arg(root.join("train.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("last.ckpt").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("selected epoch"), "train reports the selected epoch: {stdout}");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,l_nmt,l_ia,l_lp,total,split"));
    assert!(metrics.contains(",valid"));

    // --- train --resume --------------------------------------------------
    let out = bin()
        .arg("train")
        .arg(root.join("train.toml"))
        .arg("--resume")
        .arg(run.join("last.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // --- translate (file input, stdin, pivot, gold) -----------------------
    let src_file = corpus.join("test.xa-en.src");
    let n_lines = std::fs::read_to_string(&src_file).unwrap().lines().count();
    let out = bin()
        .args(["translate", "--beam", "1", "--src-lang", "xa", "--tgt-lang", "en"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--input")
        .arg(&src_file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_of(&out);
    assert_eq!(text.lines().count(), n_lines, "one output line per input line");
    assert!(text.lines().all(|l| !l.trim().is_empty()));

    let mut child = bin()
        .args(["translate", "--beam", "1", "--src-lang", "xa", "--tgt-lang", "xb", "--pivot"])
        .arg("--model")
        .arg(&ckpt)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let first = std::fs::read_to_string(&src_file).unwrap().lines().next().unwrap().to_string();
    child.stdin.take().unwrap().write_all(first.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_of(&out).lines().count(), 1);

    let out = bin()
        .args(["translate", "--beam", "1", "--src-lang", "xa", "--tgt-lang", "en"])
        .args(["--gold-length", "4"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--input")
        .arg(&src_file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // A gold length beyond the slot table is a data error.
    let out = bin()
        .args(["translate", "--beam", "1", "--src-lang", "xa", "--tgt-lang", "en"])
        .args(["--gold-length", "99"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--input")
        .arg(&src_file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Zero beam is rejected on the command line.
    let out = bin()
        .args(["translate", "--beam", "0", "--src-lang", "xa", "--tgt-lang", "en"])
        .arg("--model")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // A token outside the vocabulary is a data error.
    let mut child = bin()
        .args(["translate", "--beam", "1", "--src-lang", "xa", "--tgt-lang", "en"])
        .arg("--model")
        .arg(&ckpt)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"definitely-not-a-token\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // --- evaluate ----------------------------------------------------------
    let csv = root.join("eval.csv");
    let out = bin()
        .args(["evaluate", "--beam", "1"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--testset")
        .arg(&corpus)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout_of(&out);
    assert!(table.contains("system"));
    assert!(table.contains("variable"));
    assert!(table.contains("length predictor"));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("system,seed,section,src,tgt,bleu"));
    assert!(csv_text.contains("supervised"));
    assert!(csv_text.contains("zeroshot"));

    // --- analyze-length ----------------------------------------------------
    let out = bin()
        .arg("analyze-length")
        .arg("--model")
        .arg(&ckpt)
        .arg("--testset")
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_of(&out);
    assert!(text.contains("accuracy"));
    assert!(text.lines().count() >= 3, "per-language rows plus the pooled row");
    assert!(text.lines().last().unwrap().starts_with("all"));

    // --- compare -------------------------------------------------------------
    let exp_dir = root.join("exp");
    let exp_toml = format!(
        r#"
data_dir = "{}"
out_dir = "{}"
systems = ["variable"]
seeds = [1]
beam = 1

[model]
d_model = 16
heads = 2
ffn_hidden = 24
enc_layers = 1
bridge_layers = 1
dec_layers = 1
max_slots = 12
len_classes = 12

[train]
epochs = 1
batch_size = 8
"#,
        corpus.display(),
        exp_dir.display()
    );
    write(&root.join("exp.toml"), &exp_toml);
    let out = bin().arg("compare").arg(root.join("exp.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_of(&out).contains("mean"));
    assert!(exp_dir.join("report.csv").exists());
    assert!(exp_dir.join("variable_seed1.ckpt").exists());
    assert!(exp_dir.join("variable_seed1.metrics.csv").exists());

    // Re-running with training disabled reuses the checkpoints.
    let reuse = exp_toml.replace("beam = 1", "beam = 1\ntrain_systems = false");
    write(&root.join("reuse.toml"), &reuse);
    let out = bin().arg("compare").arg(root.join("reuse.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // With the checkpoint gone, disabled training is a data error.
    std::fs::remove_file(exp_dir.join("variable_seed1.ckpt")).unwrap();
    let out = bin().arg("compare").arg(root.join("reuse.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
