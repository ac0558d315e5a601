//! Experiment orchestration: train each system on each seed, score every
//! translation direction, and aggregate the results.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bleu::corpus_bleu;
use crate::corpus::Meta;
use crate::data::{load_pairs, SentencePair, Vocab};
use crate::decode::{DecodeOptions, Translator};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::training::{write_metrics_csv, LossBreakdown, TrainConfig, Trainer};
use crate::{checkpoint, tensor::Tape};

#[derive(Debug, Clone, Serialize)]
pub struct DirectionScore {
    pub src: String,
    pub tgt: String,
    pub bleu: f64,
}

/// Predicted-length decoding against gold-length decoding for one direction.
#[derive(Debug, Clone, Serialize)]
pub struct GoldComparison {
    pub src: String,
    pub tgt: String,
    pub predicted_bleu: f64,
    pub gold_bleu: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LengthStats {
    /// Fraction of sentences whose predicted centric length is exactly right.
    pub accuracy: f64,
    /// Mean absolute difference between predicted and true centric length.
    pub mean_abs_diff: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LengthReport {
    pub per_language: Vec<(String, LengthStats)>,
    /// Pooled over every non-centric sentence.
    pub overall: LengthStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemEvaluation {
    pub mode: Mode,
    pub seed: u64,
    pub supervised: Vec<DirectionScore>,
    pub zeroshot: Vec<DirectionScore>,
    /// Two-hop decoding through the centric language (baseline system only).
    pub pivot: Vec<DirectionScore>,
    /// Gold-length decoding per direction with a non-centric source
    /// (variable mode only).
    pub gold: Vec<GoldComparison>,
    pub length: Option<LengthReport>,
    pub final_valid: LossBreakdownReport,
}

/// Serializable mirror of the loss breakdown.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdownReport {
    pub l_nmt: f64,
    pub l_ia: f64,
    pub l_lp: f64,
    pub total: f64,
}

impl From<LossBreakdown> for LossBreakdownReport {
    fn from(b: LossBreakdown) -> Self {
        LossBreakdownReport { l_nmt: b.l_nmt, l_ia: b.l_ia, l_lp: b.l_lp, total: b.total }
    }
}

impl SystemEvaluation {
    pub fn supervised_mean(&self) -> f64 {
        mean(self.supervised.iter().map(|d| d.bleu))
    }

    pub fn zeroshot_mean(&self) -> f64 {
        mean(self.zeroshot.iter().map(|d| d.bleu))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Test and zero-shot pairs, grouped per direction.
pub struct EvalData {
    pub test: Vec<(String, String, Vec<SentencePair>)>,
    pub zeroshot: Vec<(String, String, Vec<SentencePair>)>,
}

pub fn load_eval_data(dir: &Path, meta: &Meta, vocab: &Vocab) -> Result<EvalData> {
    let mut test = Vec::new();
    for (s, t) in meta.supervised_directions() {
        let pairs = load_pairs(dir, "test", &s, &t, vocab)?;
        test.push((s, t, pairs));
    }
    let mut zeroshot = Vec::new();
    for (s, t) in meta.zeroshot_directions() {
        let pairs = load_pairs(dir, "zs", &s, &t, vocab)?;
        zeroshot.push((s, t, pairs));
    }
    Ok(EvalData { test, zeroshot })
}

/// BLEU for one direction. `gold_lengths` switches the slot count to the
/// stored centric length; `pivot_via` decodes in two hops instead of one.
fn bleu_direction(
    translator: &Translator,
    pairs: &[SentencePair],
    opts: &DecodeOptions,
    gold_lengths: bool,
    pivot_via: Option<&str>,
) -> Result<f64> {
    let mut candidates = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut o = opts.clone();
        if gold_lengths {
            o.gold_centric_len = Some(p.centric_len);
        }
        let t = match pivot_via {
            Some(via) => translator.translate_pivot(&p.src, &p.src_lang, via, &p.tgt_lang, &o)?,
            None => translator.translate(&p.src, &p.src_lang, &p.tgt_lang, &o)?,
        };
        candidates.push(t.tokens);
        references.push(p.tgt.clone());
    }
    Ok(corpus_bleu(&candidates, &references)?.score)
}

/// Aggregates `(language, predicted, gold)` triples into per-language and
/// pooled statistics.
pub fn length_stats(samples: &[(String, usize, usize)]) -> Result<LengthReport> {
    if samples.is_empty() {
        return Err(Error::Data("no sentences to measure".into()));
    }
    let stats = |subset: &[&(String, usize, usize)]| {
        let exact = subset.iter().filter(|(_, p, g)| p == g).count();
        let abs: f64 = subset.iter().map(|(_, p, g)| (*p as f64 - *g as f64).abs()).sum();
        LengthStats {
            accuracy: exact as f64 / subset.len() as f64,
            mean_abs_diff: abs / subset.len() as f64,
            count: subset.len(),
        }
    };
    let mut langs: Vec<String> = Vec::new();
    for (l, _, _) in samples {
        if !langs.contains(l) {
            langs.push(l.clone());
        }
    }
    let per_language = langs
        .into_iter()
        .map(|l| {
            let subset: Vec<&(String, usize, usize)> =
                samples.iter().filter(|(sl, _, _)| *sl == l).collect();
            let s = stats(&subset);
            (l, s)
        })
        .collect();
    let all: Vec<&(String, usize, usize)> = samples.iter().collect();
    Ok(LengthReport { per_language, overall: stats(&all) })
}

/// Accuracy of the centric-length predictor over non-centric source
/// sentences.
pub fn length_report(
    translator: &Translator,
    pairs: &[SentencePair],
    centric: &str,
) -> Result<LengthReport> {
    let mut samples = Vec::new();
    for p in pairs {
        if p.src_lang == centric {
            continue;
        }
        let predicted = translator.predict_centric_len(&p.src, &p.src_lang)?;
        samples.push((p.src_lang.clone(), predicted, p.centric_len));
    }
    length_stats(&samples)
}

/// Scores one trained system over every direction.
pub fn evaluate_system(
    trainer: &Trainer,
    vocab: &Vocab,
    data: &EvalData,
    valid_pairs: &[SentencePair],
    beam: usize,
) -> Result<SystemEvaluation> {
    let cfg = &trainer.cfg;
    let translator = Translator::new(&trainer.store, cfg, vocab)?;
    let opts = DecodeOptions { beam, ..Default::default() };

    let mut supervised = Vec::new();
    for (s, t, pairs) in &data.test {
        let bleu = bleu_direction(&translator, pairs, &opts, false, None)?;
        supervised.push(DirectionScore { src: s.clone(), tgt: t.clone(), bleu });
    }

    let mut zeroshot = Vec::new();
    let mut pivot = Vec::new();
    let mut gold = Vec::new();
    for (s, t, pairs) in &data.zeroshot {
        let bleu = bleu_direction(&translator, pairs, &opts, false, None)?;
        zeroshot.push(DirectionScore { src: s.clone(), tgt: t.clone(), bleu });
        if cfg.mode == Mode::Mnmt {
            let via = bleu_direction(&translator, pairs, &opts, false, Some(&cfg.centric))?;
            pivot.push(DirectionScore { src: s.clone(), tgt: t.clone(), bleu: via });
        }
        if cfg.mode == Mode::Variable {
            let g = bleu_direction(&translator, pairs, &opts, true, None)?;
            gold.push(GoldComparison {
                src: s.clone(),
                tgt: t.clone(),
                predicted_bleu: bleu,
                gold_bleu: g,
            });
        }
    }
    // Supervised directions into the centric language also depend on the
    // length predictor; include them in the gold comparison.
    if cfg.mode == Mode::Variable {
        for (s, t, pairs) in &data.test {
            if s == &cfg.centric {
                continue;
            }
            let predicted = supervised
                .iter()
                .find(|d| &d.src == s && &d.tgt == t)
                .map(|d| d.bleu)
                .unwrap();
            let g = bleu_direction(&translator, pairs, &opts, true, None)?;
            gold.push(GoldComparison {
                src: s.clone(),
                tgt: t.clone(),
                predicted_bleu: predicted,
                gold_bleu: g,
            });
        }
    }

    let length = if cfg.mode.has_length_predictor() {
        let all_test: Vec<SentencePair> =
            data.test.iter().flat_map(|(_, _, p)| p.iter().cloned()).collect();
        Some(length_report(&translator, &all_test, &cfg.centric)?)
    } else {
        None
    };

    let mut tape = Tape::new();
    let final_valid = trainer.evaluate_loss(&mut tape, valid_pairs, vocab)?;

    Ok(SystemEvaluation {
        mode: cfg.mode,
        seed: trainer.train_cfg.seed,
        supervised,
        zeroshot,
        pivot,
        gold,
        length,
        final_valid: final_valid.into(),
    })
}

/// Starts from the bridge-shaped template and derives the layer layout for a
/// mode: the baseline folds the bridge depth into extra encoder layers so
/// every system has the same total depth.
pub fn config_for_mode(template: &ModelConfig, mode: Mode) -> ModelConfig {
    let mut cfg = template.clone();
    cfg.mode = mode;
    if mode == Mode::Mnmt {
        cfg.enc_layers = template.enc_layers + template.bridge_layers;
        cfg.bridge_layers = 0;
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub systems: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Bridge-shaped template; mode, seed, and vocabulary size are filled in
    /// per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
    /// When set, per-run metrics CSVs and checkpoints are written here.
    pub out_dir: Option<PathBuf>,
    /// When false, checkpoints are loaded from `out_dir` instead of training;
    /// a missing checkpoint is then an error.
    pub train_systems: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<SystemEvaluation>,
}

impl ExperimentReport {
    fn runs_of(&self, mode: Mode) -> impl Iterator<Item = &SystemEvaluation> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    /// Zero-shot BLEU averaged over directions, then over seeds.
    pub fn mean_zeroshot(&self, mode: Mode) -> f64 {
        mean(self.runs_of(mode).map(SystemEvaluation::zeroshot_mean))
    }

    pub fn mean_supervised(&self, mode: Mode) -> f64 {
        mean(self.runs_of(mode).map(SystemEvaluation::supervised_mean))
    }

    pub fn modes(&self) -> Vec<Mode> {
        let mut seen = Vec::new();
        for r in &self.runs {
            if !seen.contains(&r.mode) {
                seen.push(r.mode);
            }
        }
        seen
    }

    /// Human-readable summary table.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "{:<24} {:>6} {:>12} {:>10}", "system", "seed", "supervised", "zero-shot")
            .unwrap();
        for r in &self.runs {
            writeln!(
                out,
                "{:<24} {:>6} {:>12.2} {:>10.2}",
                r.mode.as_str(),
                r.seed,
                r.supervised_mean(),
                r.zeroshot_mean()
            )
            .unwrap();
        }
        writeln!(out, "---").unwrap();
        for mode in self.modes() {
            writeln!(
                out,
                "{:<24} {:>6} {:>12.2} {:>10.2}",
                mode.as_str(),
                "mean",
                self.mean_supervised(mode),
                self.mean_zeroshot(mode)
            )
            .unwrap();
        }
        let pivots: Vec<&SystemEvaluation> =
            self.runs.iter().filter(|r| !r.pivot.is_empty()).collect();
        if !pivots.is_empty() {
            let piv = mean(pivots.iter().map(|r| mean(r.pivot.iter().map(|d| d.bleu))));
            writeln!(out, "{:<24} {:>6} {:>12} {:>10.2}", "pivot (via centric)", "mean", "-", piv)
                .unwrap();
        }
        for r in &self.runs {
            if let Some(l) = &r.length {
                for (lang, s) in &l.per_language {
                    writeln!(
                        out,
                        "length predictor {lang:<6} seed {:>2}: accuracy {:.3}, mean |error| {:.3} ({} sentences)",
                        r.seed, s.accuracy, s.mean_abs_diff, s.count
                    )
                    .unwrap();
                }
                let s = &l.overall;
                writeln!(
                    out,
                    "length predictor all    seed {:>2}: accuracy {:.3}, mean |error| {:.3} ({} sentences)",
                    r.seed, s.accuracy, s.mean_abs_diff, s.count
                )
                .unwrap();
            }
        }
        for r in &self.runs {
            for g in &r.gold {
                writeln!(
                    out,
                    "gold-length {}->{} seed {}: predicted {:.2}, gold {:.2}",
                    g.src, g.tgt, r.seed, g.predicted_bleu, g.gold_bleu
                )
                .unwrap();
            }
        }
        out
    }
}

/// Trains and evaluates every requested system on every seed.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<ExperimentReport> {
    let meta = Meta::load(&exp.data_dir)?;
    let vocab = Vocab::load(&exp.data_dir.join("vocab.txt"))?;
    let dirs = meta.supervised_directions();
    let train_pairs = crate::data::load_split(&exp.data_dir, "train", &dirs, &vocab)?;
    let valid_pairs = crate::data::load_split(&exp.data_dir, "valid", &dirs, &vocab)?;
    let data = load_eval_data(&exp.data_dir, &meta, &vocab)?;

    if let Some(dir) = &exp.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut runs = Vec::new();
    for &mode in &exp.systems {
        for &seed in &exp.seeds {
            let stem = format!("{}_seed{}", mode.as_str(), seed);
            let trainer = if exp.train_systems {
                let mut cfg = config_for_mode(&exp.model, mode);
                cfg.vocab_size = vocab.len();
                cfg.langs = meta.langs.clone();
                cfg.centric = meta.centric.clone();
                let tc = TrainConfig { seed, ..exp.train.clone() };
                let mut trainer = Trainer::new(cfg, tc)?;
                let mut rows = Vec::new();
                trainer.run(&train_pairs, &valid_pairs, &vocab, &mut rows)?;
                // Each run is scored at its lowest-validation-loss epoch.
                let selected = trainer.selected();
                if let Some(dir) = &exp.out_dir {
                    write_metrics_csv(&dir.join(format!("{stem}.metrics.csv")), &rows)?;
                    checkpoint::save(&dir.join(format!("{stem}.ckpt")), &selected, &vocab)?;
                }
                log::info!(
                    "finished training {} seed {seed} (selected epoch {})",
                    mode.as_str(),
                    selected.epoch
                );
                selected
            } else {
                let dir = exp.out_dir.as_ref().ok_or_else(|| {
                    Error::Config("loading trained systems requires an output directory".into())
                })?;
                let path = dir.join(format!("{stem}.ckpt"));
                if !path.exists() {
                    return Err(Error::Data(format!(
                        "training is disabled and {} is missing",
                        path.display()
                    )));
                }
                let (trainer, ckpt_vocab) = checkpoint::load(&path)?;
                if ckpt_vocab.tokens != vocab.tokens {
                    return Err(Error::Data(format!(
                        "checkpoint {} was trained on a different vocabulary",
                        path.display()
                    )));
                }
                trainer
            };
            runs.push(evaluate_system(&trainer, &vocab, &data, &valid_pairs, exp.beam)?);
        }
    }
    Ok(ExperimentReport { runs })
}

/// Machine-readable flat form of the report: one row per scored direction.
pub fn write_report_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut out = String::from("system,seed,section,src,tgt,bleu\n");
    for r in &report.runs {
        let mode = r.mode.as_str();
        for d in &r.supervised {
            out.push_str(&format!("{mode},{},supervised,{},{},{}\n", r.seed, d.src, d.tgt, d.bleu));
        }
        for d in &r.zeroshot {
            out.push_str(&format!("{mode},{},zeroshot,{},{},{}\n", r.seed, d.src, d.tgt, d.bleu));
        }
        for d in &r.pivot {
            out.push_str(&format!("{mode},{},pivot,{},{},{}\n", r.seed, d.src, d.tgt, d.bleu));
        }
        for g in &r.gold {
            out.push_str(&format!(
                "{mode},{},gold_length,{},{},{}\n",
                r.seed, g.src, g.tgt, g.gold_bleu
            ));
        }
    }
    std::fs::write(path, out).map_err(Error::from)
}
