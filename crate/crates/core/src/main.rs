//! Command-line surface: corpus generation, training, translation,
//! evaluation, length-predictor diagnostics, and multi-system comparison.
//!
//! Exit codes: 0 success, 1 command-line usage error, 2 data/config error,
//! 3 numeric failure.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use bridgemt::checkpoint;
use bridgemt::corpus::{self, CorpusConfig, Meta};
use bridgemt::data::{load_split, Vocab};
use bridgemt::decode::{DecodeOptions, Translator};
use bridgemt::error::{Error, Result};
use bridgemt::model::{Mode, ModelConfig};
use bridgemt::report::{
    evaluate_system, length_report, load_eval_data, run_experiment, write_report_csv,
    ExperimentConfig, ExperimentReport,
};
use bridgemt::training::{write_metrics_csv, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "bridgemt",
    version,
    about = "Multilingual translation with a variable-width interlingua bridge"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus from a config file.
    GenData {
        /// TOML file: `out_dir` plus a `[corpus]` table.
        config: PathBuf,
    },
    /// Train one system and save its checkpoint and loss curves.
    Train {
        /// TOML file: `data_dir`, `out_dir`, `[model]`, `[train]`.
        config: PathBuf,
        /// Continue from this checkpoint (typically last.ckpt) for the
        /// configured number of epochs.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Translate lines of text (from a file or standard input).
    Translate {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long)]
        src_lang: String,
        #[arg(long)]
        tgt_lang: String,
        /// Read source sentences from this file instead of standard input.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Force the interlingua width to this centric-side length.
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        gold_length: Option<u64>,
        /// Decode in two hops through the centric language.
        #[arg(long)]
        pivot: bool,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        beam: u64,
        /// Cap on decoded tokens (defaults to the model's position limit).
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        max_len: Option<u64>,
    },
    /// Score a trained system over every direction of a test corpus.
    Evaluate {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// Corpus directory holding the test and zero-shot splits.
        #[arg(long, value_name = "DIR")]
        testset: PathBuf,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        beam: u64,
        /// Also write the scores to this CSV file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Report length-predictor accuracy per source language.
    AnalyzeLength {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// Corpus directory holding the test split.
        #[arg(long, value_name = "DIR")]
        testset: PathBuf,
    },
    /// Train and evaluate several systems and seeds, then compare them.
    Compare {
        /// TOML file: `data_dir`, `out_dir`, `systems`, `seeds`, `[model]`,
        /// `[train]`.
        config: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataFile {
    out_dir: PathBuf,
    #[serde(default)]
    corpus: CorpusConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    data_dir: PathBuf,
    out_dir: PathBuf,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    data_dir: PathBuf,
    out_dir: PathBuf,
    systems: Vec<Mode>,
    seeds: Vec<u64>,
    #[serde(default = "default_beam")]
    beam: usize,
    /// When false, checkpoints already in `out_dir` are evaluated as-is.
    #[serde(default = "default_true")]
    train_systems: bool,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn default_beam() -> usize {
    5
}

fn default_true() -> bool {
    true
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.cmd {
        Cmd::GenData { config } => cmd_gen_data(&config),
        Cmd::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Cmd::Translate {
            model,
            src_lang,
            tgt_lang,
            input,
            gold_length,
            pivot,
            beam,
            max_len,
        } => {
            let opts = DecodeOptions {
                beam: beam as usize,
                max_len: max_len.map(|n| n as usize),
                gold_centric_len: gold_length.map(|n| n as usize),
                ..DecodeOptions::default()
            };
            cmd_translate(&model, &src_lang, &tgt_lang, input.as_deref(), pivot, &opts)
        }
        Cmd::Evaluate { model, testset, beam, out } => {
            cmd_evaluate(&model, &testset, beam as usize, out.as_deref())
        }
        Cmd::AnalyzeLength { model, testset } => cmd_analyze_length(&model, &testset),
        Cmd::Compare { config } => cmd_compare(&config),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and cross-checks it against a corpus directory so a
/// model is never scored on data it cannot represent.
fn load_model_for(dir: &Path, ckpt: &Path) -> Result<(Trainer, Vocab, Meta)> {
    let (trainer, vocab) = checkpoint::load(ckpt)?;
    let meta = Meta::load(dir)?;
    let corpus_vocab = Vocab::load(&dir.join("vocab.txt"))?;
    if corpus_vocab.tokens != vocab.tokens {
        return Err(Error::Data(format!(
            "vocabulary mismatch between {} and {}",
            ckpt.display(),
            dir.display()
        )));
    }
    if meta.langs != trainer.cfg.langs || meta.centric != trainer.cfg.centric {
        return Err(Error::Data(format!(
            "language mismatch: the model was trained on {:?} (centric {}), the corpus holds {:?} (centric {})",
            trainer.cfg.langs, trainer.cfg.centric, meta.langs, meta.centric
        )));
    }
    Ok((trainer, vocab, meta))
}

fn cmd_gen_data(config: &Path) -> Result<()> {
    let file: GenDataFile = read_toml(config)?;
    let built = corpus::build(&file.corpus)?;
    std::fs::create_dir_all(&file.out_dir)?;
    built.write_dir(&file.out_dir)?;
    let meta = Meta::load(&file.out_dir)?;
    println!("wrote corpus to {}", file.out_dir.display());
    println!("languages: {} (centric: {})", meta.langs.join(" "), meta.centric);
    println!("vocabulary: {} tokens", meta.vocab_size);
    for (name, n) in &meta.partitions {
        println!("  {name}: {n} sentences per direction");
    }
    for (lang, f) in &meta.length_change_fraction {
        println!("  length differs from centric in {lang}: {:.1}%", f * 100.0);
    }
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let file: TrainFile = read_toml(config)?;
    let meta = Meta::load(&file.data_dir)?;
    let vocab = Vocab::load(&file.data_dir.join("vocab.txt"))?;
    let dirs = meta.supervised_directions();
    let train_pairs = load_split(&file.data_dir, "train", &dirs, &vocab)?;
    let valid_pairs = load_split(&file.data_dir, "valid", &dirs, &vocab)?;

    let mut trainer = match resume {
        Some(ckpt) => {
            let (mut t, ckpt_vocab) = checkpoint::load(ckpt)?;
            if ckpt_vocab.tokens != vocab.tokens {
                return Err(Error::Data(format!(
                    "checkpoint {} was trained on a different vocabulary",
                    ckpt.display()
                )));
            }
            // Everything but the epoch budget comes from the checkpoint.
            t.train_cfg.epochs = file.train.epochs;
            log::info!("resuming from epoch {} of {}", t.epoch, ckpt.display());
            t
        }
        None => {
            let mut cfg = file.model.clone();
            cfg.vocab_size = vocab.len();
            cfg.langs = meta.langs.clone();
            cfg.centric = meta.centric.clone();
            Trainer::new(cfg, file.train.clone())?
        }
    };

    let mut rows = Vec::new();
    trainer.run(&train_pairs, &valid_pairs, &vocab, &mut rows)?;

    std::fs::create_dir_all(&file.out_dir)?;
    let metrics_path = file.out_dir.join("metrics.csv");
    let ckpt_path = file.out_dir.join("model.ckpt");
    let last_path = file.out_dir.join("last.ckpt");
    write_metrics_csv(&metrics_path, &rows)?;
    // model.ckpt is the run's result: the epoch with the lowest validation
    // translation loss. last.ckpt is the final state, the resume target.
    let selected = trainer.selected();
    checkpoint::save(&ckpt_path, &selected, &vocab)?;
    checkpoint::save(&last_path, &trainer, &vocab)?;
    if let Some(r) = rows.iter().rev().find(|r| r.split == "valid") {
        println!(
            "final validation loss {:.4} (translation {:.4}, alignment {:.4}, length {:.4})",
            r.losses.total, r.losses.l_nmt, r.losses.l_ia, r.losses.l_lp
        );
    }
    if let Some((epoch, l_nmt)) = trainer.selected_epoch() {
        println!("selected epoch {epoch} (validation translation loss {l_nmt:.4})");
    }
    println!("wrote {}", metrics_path.display());
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", last_path.display());
    Ok(())
}

fn cmd_translate(
    model: &Path,
    src_lang: &str,
    tgt_lang: &str,
    input: Option<&Path>,
    pivot: bool,
    opts: &DecodeOptions,
) -> Result<()> {
    let (trainer, vocab) = checkpoint::load(model)?;
    let translator = Translator::new(&trainer.store, &trainer.cfg, &vocab)?;
    let reader: Box<dyn BufRead> = match input {
        Some(path) => {
            let f = std::fs::File::open(path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            Box::new(std::io::BufReader::new(f))
        }
        None => Box::new(std::io::BufReader::new(std::io::stdin())),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.split_whitespace().next().is_none() {
            return Err(Error::Data(format!("line {} is empty", i + 1)));
        }
        let ids = vocab.encode_line(&line)?;
        let t = if pivot {
            translator.translate_pivot(&ids, src_lang, &trainer.cfg.centric, tgt_lang, opts)?
        } else {
            translator.translate(&ids, src_lang, tgt_lang, opts)?
        };
        if t.truncated {
            log::warn!("line {}: output truncated at the decode length cap", i + 1);
        }
        if let Some(n) = t.predicted_centric_len {
            log::debug!("line {}: predicted centric length {n}", i + 1);
        }
        writeln!(out, "{}", vocab.decode(&t.tokens)?)?;
    }
    Ok(())
}

fn cmd_evaluate(model: &Path, testset: &Path, beam: usize, out: Option<&Path>) -> Result<()> {
    let (trainer, vocab, meta) = load_model_for(testset, model)?;
    let dirs = meta.supervised_directions();
    let valid_pairs = load_split(testset, "valid", &dirs, &vocab)?;
    let data = load_eval_data(testset, &meta, &vocab)?;
    let eval = evaluate_system(&trainer, &vocab, &data, &valid_pairs, beam)?;
    let report = ExperimentReport { runs: vec![eval] };
    print!("{}", report.render());
    if let Some(path) = out {
        write_report_csv(path, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_analyze_length(model: &Path, testset: &Path) -> Result<()> {
    let (trainer, vocab, meta) = load_model_for(testset, model)?;
    if !trainer.cfg.mode.has_length_predictor() {
        return Err(Error::Config(format!(
            "the {} system has no length predictor",
            trainer.cfg.mode.as_str()
        )));
    }
    let dirs = meta.supervised_directions();
    let test_pairs = load_split(testset, "test", &dirs, &vocab)?;
    let translator = Translator::new(&trainer.store, &trainer.cfg, &vocab)?;
    let rep = length_report(&translator, &test_pairs, &trainer.cfg.centric)?;
    println!("{:<10} {:>10} {:>10} {:>12}", "source", "sentences", "accuracy", "mean |err|");
    for (lang, s) in &rep.per_language {
        println!("{:<10} {:>10} {:>10.3} {:>12.3}", lang, s.count, s.accuracy, s.mean_abs_diff);
    }
    let s = &rep.overall;
    println!("{:<10} {:>10} {:>10.3} {:>12.3}", "all", s.count, s.accuracy, s.mean_abs_diff);
    Ok(())
}

fn cmd_compare(config: &Path) -> Result<()> {
    let file: ExperimentFile = read_toml(config)?;
    if file.systems.is_empty() || file.seeds.is_empty() {
        return Err(Error::Config("systems and seeds must both be non-empty".into()));
    }
    let exp = ExperimentConfig {
        data_dir: file.data_dir,
        systems: file.systems,
        seeds: file.seeds,
        model: file.model,
        train: file.train,
        beam: file.beam,
        out_dir: Some(file.out_dir.clone()),
        train_systems: file.train_systems,
    };
    let report = run_experiment(&exp)?;
    print!("{}", report.render());
    let csv_path = file.out_dir.join("report.csv");
    write_report_csv(&csv_path, &report)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
