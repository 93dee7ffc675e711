//! Operator entry point for the spanfuse pipeline: corpus generation,
//! pretraining of both stages, joint fine-tuning, evaluation, ablations,
//! candidate-count sweeps, gradient checking, and attention dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use spanfuse_core::eval::VariantRow;
use spanfuse_core::extraction::read_candidate_dump;
use spanfuse_core::rl::top_k_candidates;
use spanfuse_core::{
    attention_csv, diagnostics, evaluate, gen_synthetic, joint_train, load_corpus,
    pretrain_extract, pretrain_select, records_jsonl, report_csv, report_json, run_ablation,
    run_k_sweep, save_corpus, variant_table_csv, Example, FeatureFlags, ModelConfig, StepRecord,
    SynthConfig, TrainConfig, TrainState, Vocab,
};

/// Environment variable that overrides the output directory of every
/// subcommand.
const OUT_DIR_ENV: &str = "SPANFUSE_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "spanfuse",
    version,
    about = "Extract-then-select reading comprehension over multiple passages",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// File of `key = value` lines mapped onto long flags; explicit
    /// command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every artifact of this run.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed. Mandatory: there is no wall-clock default, so runs are
    /// reproducible from (flags, seed, inputs) alone.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct DimOpts {
    /// Word embedding width.
    #[arg(long, default_value_t = 64)]
    d_w: usize,
    /// Hidden units per LSTM direction.
    #[arg(long, default_value_t = 100)]
    d_h: usize,
    /// Candidate/correlation width.
    #[arg(long, default_value_t = 100)]
    d_c: usize,
    /// Common-word feature embedding width.
    #[arg(long, default_value_t = 4)]
    d_common: usize,
    /// Distance feature embedding width.
    #[arg(long, default_value_t = 50)]
    d_dist: usize,
    /// Distance clip radius in tokens.
    #[arg(long, default_value_t = 20)]
    dist_clip: i64,
    /// Optional embedding file: one `token v1 .. vd` line per word; matching
    /// vocabulary rows of both embedding tables start from these vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Minimum corpus frequency for a token to get its own id.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Passages are truncated to this many tokens at ingestion.
    #[arg(long, default_value_t = 60)]
    max_passage_len: usize,
}

#[derive(Args)]
struct TrainOpts {
    /// Candidates extracted per passage (1-3).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Maximum candidate length in tokens.
    #[arg(long, default_value_t = 8)]
    l_max: usize,
    #[arg(long, default_value_t = 30)]
    batch_extract: usize,
    #[arg(long, default_value_t = 20)]
    batch_select: usize,
    #[arg(long, default_value_t = 5)]
    batch_rl: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr_pretrain: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_rl: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 10)]
    epochs_extract: usize,
    #[arg(long, default_value_t = 10)]
    epochs_select: usize,
    #[arg(long, default_value_t = 10)]
    epochs_rl: usize,
    /// Dev evaluations without improvement before the joint loop stops.
    #[arg(long, default_value_t = 3)]
    patience: usize,
    /// Moving-average reward baseline in the score-function term.
    #[arg(long)]
    baseline: bool,
}

impl TrainOpts {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            k: self.k,
            l_max: self.l_max,
            batch_extract: self.batch_extract,
            batch_select: self.batch_select,
            batch_rl: self.batch_rl,
            lr_pretrain: self.lr_pretrain,
            lr_rl: self.lr_rl,
            dropout: self.dropout,
            epochs_extract: self.epochs_extract,
            epochs_select: self.epochs_select,
            epochs_rl: self.epochs_rl,
            patience: self.patience,
            seed,
            baseline: self.baseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-evidence corpus (train/dev/test JSONL).
    GenSynth {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 120)]
        vocab_size: usize,
        #[arg(long, default_value_t = 24)]
        entities: usize,
        /// Passages per question.
        #[arg(long, default_value_t = 5)]
        passages: usize,
        #[arg(long, default_value_t = 12)]
        passage_len: usize,
        /// Fraction of questions that need cross-passage evidence.
        #[arg(long, default_value_t = 0.5)]
        cross_fraction: f64,
        #[arg(long, default_value_t = 1)]
        distractors: usize,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
    },
    /// Likelihood-pretrain the extraction stage.
    PretrainExtract {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        dims: DimOpts,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
    },
    /// Likelihood-pretrain the selection stage on the frozen extractor's
    /// top-K candidates.
    PretrainSelect {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Checkpoint from pretrain-extract.
        #[arg(long)]
        init: PathBuf,
        /// Optional candidate dump for isolated training; otherwise the
        /// extractor in `--init` generates candidates.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        max_passage_len: usize,
    },
    /// Jointly fine-tune both stages with the policy-gradient objective.
    TrainJoint {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Checkpoint from the pretraining phases.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Start from random parameters instead of a checkpoint.
        #[arg(long)]
        cold_start: bool,
        #[command(flatten)]
        dims: DimOpts,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        l_max: usize,
        #[arg(long, default_value_t = 60)]
        max_passage_len: usize,
    },
    /// Retrain the selection stage once per disabled feature and tabulate
    /// dev metrics.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 60)]
        max_passage_len: usize,
    },
    /// Train and evaluate once per candidate count.
    KSweep {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        dims: DimOpts,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Comma-separated candidate counts.
        #[arg(long, default_value = "1,2,3")]
        ks: String,
    },
    /// Finite-difference gradient check over every tensor of both models.
    GradCheck {
        /// RNG seed for the probe parameters.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write per-question candidate-correlation attention maps as CSV.
    DumpAttention {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dump at most this many questions.
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Dump only this question id.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        l_max: usize,
        #[arg(long, default_value_t = 60)]
        max_passage_len: usize,
    },
}

fn main() -> ExitCode {
    let argv = expand_config_args(std::env::args().collect());
    let argv = match argv {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Splice `--config FILE` entries in as flags positioned right after the
/// subcommand, so later (explicit) flags override them.
fn expand_config_args(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let config_pos = argv.iter().position(|a| a == "--config");
    let Some(pos) = config_pos else {
        return Ok(argv);
    };
    let path = argv
        .get(pos + 1)
        .filter(|p| !p.starts_with("--"))
        .context("--config requires a file path")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
    let mut injected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("{path}:{}: expected `key = value`", i + 1))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            bail!("{path}:{}: empty key", i + 1);
        }
        injected.push(format!("--{key}"));
        if !value.is_empty() && value != "true" {
            injected.push(value.to_string());
        }
    }
    // argv = [prog, subcommand, rest...]; config flags go before `rest`
    if argv.len() < 2 {
        return Ok(argv);
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

fn out_dir(common: &CommonOpts) -> anyhow::Result<PathBuf> {
    let dir = match std::env::var_os(OUT_DIR_ENV) {
        Some(v) => PathBuf::from(v),
        None => common.out.clone(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_examples(path: &Path, max_passage_len: usize) -> anyhow::Result<Vec<Example>> {
    let (examples, report) = load_corpus(path, max_passage_len)?;
    eprintln!(
        "{}: {} questions, {:.1} passages/question",
        path.display(),
        report.questions,
        report.mean_passages
    );
    Ok(examples)
}

fn build_vocab(examples: &[Example], min_count: usize) -> Vocab {
    Vocab::build(
        examples.iter().flat_map(|e| {
            std::iter::once(e.question.as_slice()).chain(e.passages.iter().map(Vec::as_slice))
        }),
        min_count,
    )
}

fn vocab_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("vocab.json")
}

fn save_vocab(dir: &Path, vocab: &Vocab) -> anyhow::Result<()> {
    let text = serde_json::to_string(vocab)?;
    fs::write(dir.join("vocab.json"), text + "\n")?;
    Ok(())
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let vocab: Vocab = serde_json::from_str(&text)?;
    Ok(vocab)
}

fn write_records(dir: &Path, records: &[StepRecord]) -> anyhow::Result<()> {
    fs::write(dir.join("report.jsonl"), records_jsonl(records)?)?;
    Ok(())
}

fn apply_embedding_file(state: &TrainState, vocab: &Vocab, path: &Path) -> anyhow::Result<usize> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let d_w = state.cfg.d_word;
    let mut loaded = 0usize;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}:{}: bad vector", path.display(), i + 1))?;
        if values.len() != d_w {
            bail!(
                "{}:{}: vector width {} does not match word width {}",
                path.display(),
                i + 1,
                values.len(),
                d_w
            );
        }
        let id = vocab.id(token);
        if id < 2 {
            continue; // token outside the vocabulary: leave the random init
        }
        for emb in [&state.extraction.emb, &state.selection.emb] {
            let mut t = emb.borrow_mut();
            t.data_mut()[id * d_w..(id + 1) * d_w].copy_from_slice(&values);
        }
        loaded += 1;
    }
    Ok(loaded)
}

fn model_config(dims: &DimOpts, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab: vocab.len(),
        d_word: dims.d_w,
        d_hidden: dims.d_h,
        d_cand: dims.d_c,
        d_common: dims.d_common,
        d_dist: dims.d_dist,
        dist_clip: dims.dist_clip,
    }
}

fn parse_ks(ks: &str) -> anyhow::Result<Vec<usize>> {
    ks.split(',')
        .map(|s| s.trim().parse::<usize>().context("bad K list"))
        .collect()
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenSynth {
            common,
            vocab_size,
            entities,
            passages,
            passage_len,
            cross_fraction,
            distractors,
            train,
            dev,
            test,
        } => {
            let dir = out_dir(&common)?;
            let cfg = SynthConfig {
                vocab_size,
                num_entities: entities,
                passages_per_question: passages,
                passage_len,
                cross_fraction,
                distractors,
                train,
                dev,
                test,
                seed: common.seed,
            };
            let (train_ex, dev_ex, test_ex) = gen_synthetic(&cfg)?;
            save_corpus(&dir.join("train.jsonl"), &train_ex)?;
            save_corpus(&dir.join("dev.jsonl"), &dev_ex)?;
            save_corpus(&dir.join("test.jsonl"), &test_ex)?;
            println!(
                "wrote {} train / {} dev / {} test questions to {}",
                train_ex.len(),
                dev_ex.len(),
                test_ex.len(),
                dir.display()
            );
            Ok(())
        }
        Command::PretrainExtract {
            common,
            dims,
            train_opts,
            train,
            dev,
        } => {
            let dir = out_dir(&common)?;
            let train_ex = load_examples(&train, dims.max_passage_len)?;
            let dev_ex = load_examples(&dev, dims.max_passage_len)?;
            let vocab = build_vocab(&train_ex, dims.min_count);
            let cfg = train_opts.to_config(common.seed);
            let mut state = TrainState::new(
                model_config(&dims, &vocab),
                FeatureFlags::default(),
                common.seed,
            );
            if let Some(path) = &dims.embeddings {
                let n = apply_embedding_file(&state, &vocab, path)?;
                eprintln!("loaded {n} embedding vectors");
            }
            let outcome = pretrain_extract(&mut state, &vocab, &train_ex, &dev_ex, &cfg)?;
            state.save(&dir.join("checkpoint.json"))?;
            save_vocab(&dir, &vocab)?;
            write_records(&dir, &outcome.records)?;
            println!(
                "pretrain-extract done: best dev EM {:.1}, F1 {:.1}",
                outcome.best_dev_em, outcome.best_dev_f1
            );
            Ok(())
        }
        Command::PretrainSelect {
            common,
            train_opts,
            train,
            dev,
            init,
            candidates,
            max_passage_len,
        } => {
            let dir = out_dir(&common)?;
            let train_ex = load_examples(&train, max_passage_len)?;
            let dev_ex = load_examples(&dev, max_passage_len)?;
            let mut state = TrainState::load(&init)?;
            let vocab = load_vocab(&vocab_path_for(&init))?;
            let cfg = train_opts.to_config(common.seed);
            let entries = match &candidates {
                Some(path) => {
                    let file = fs::File::open(path)?;
                    read_candidate_dump(std::io::BufReader::new(file))?
                }
                None => top_k_candidates(&state, &vocab, &train_ex, &cfg)?,
            };
            // persist the candidate sets the selection stage trains on
            let mut buf = Vec::new();
            spanfuse_core::extraction::write_candidate_dump(&mut buf, &entries)?;
            fs::write(dir.join("candidates.jsonl"), buf)?;

            let outcome =
                pretrain_select(&mut state, &vocab, &train_ex, &dev_ex, &cfg, Some(&entries))?;
            state.save(&dir.join("checkpoint.json"))?;
            save_vocab(&dir, &vocab)?;
            write_records(&dir, &outcome.records)?;
            println!(
                "pretrain-select done: best dev EM {:.1}, F1 {:.1}",
                outcome.best_dev_em, outcome.best_dev_f1
            );
            Ok(())
        }
        Command::TrainJoint {
            common,
            train_opts,
            train,
            dev,
            init,
            cold_start,
            dims,
        } => {
            let dir = out_dir(&common)?;
            let train_ex = load_examples(&train, dims.max_passage_len)?;
            let dev_ex = load_examples(&dev, dims.max_passage_len)?;
            let cfg = train_opts.to_config(common.seed);
            let (mut state, vocab) = match (&init, cold_start) {
                (Some(path), _) => {
                    let state = TrainState::load(path)?;
                    let vocab = load_vocab(&vocab_path_for(path))?;
                    (state, vocab)
                }
                (None, true) => {
                    let vocab = build_vocab(&train_ex, dims.min_count);
                    let state = TrainState::new(
                        model_config(&dims, &vocab),
                        FeatureFlags::default(),
                        common.seed,
                    );
                    (state, vocab)
                }
                (None, false) => {
                    bail!("train-joint needs --init CHECKPOINT, or --cold-start to begin from random parameters")
                }
            };
            let outcome = joint_train(&mut state, &vocab, &train_ex, &dev_ex, &cfg)?;
            state.save(&dir.join("checkpoint.json"))?;
            save_vocab(&dir, &vocab)?;
            write_records(&dir, &outcome.records)?;
            println!(
                "train-joint done: best dev EM {:.1}, F1 {:.1}",
                outcome.best_dev_em, outcome.best_dev_f1
            );
            Ok(())
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            k,
            l_max,
            max_passage_len,
        } => {
            let dir = out_dir(&common)?;
            let examples = load_examples(&corpus, max_passage_len)?;
            let state = TrainState::load(&checkpoint)?;
            let vocab = load_vocab(&vocab_path_for(&checkpoint))?;
            let cfg = TrainConfig {
                k,
                l_max,
                seed: common.seed,
                ..TrainConfig::default()
            };
            let report = evaluate(&state, &vocab, &examples, &cfg)?;
            fs::write(dir.join("eval.json"), report_json(&report)? + "\n")?;
            let mut csv_buf = Vec::new();
            report_csv(&report, &mut csv_buf)?;
            fs::write(dir.join("eval.csv"), csv_buf)?;
            println!(
                "EM {:.2} F1 {:.2} over {} questions",
                report.em, report.f1, report.n
            );
            Ok(())
        }
        Command::Ablate {
            common,
            train_opts,
            train,
            dev,
            init,
            max_passage_len,
        } => {
            let dir = out_dir(&common)?;
            let train_ex = load_examples(&train, max_passage_len)?;
            let dev_ex = load_examples(&dev, max_passage_len)?;
            let base = TrainState::load(&init)?;
            let vocab = load_vocab(&vocab_path_for(&init))?;
            let cfg = train_opts.to_config(common.seed);
            let rows = run_ablation(&base, &vocab, &train_ex, &dev_ex, &cfg, None)?;
            write_variant_table(&dir.join("ablation.csv"), &rows)?;
            print_variant_table(&rows);
            Ok(())
        }
        Command::KSweep {
            common,
            dims,
            train_opts,
            train,
            dev,
            ks,
        } => {
            let dir = out_dir(&common)?;
            let train_ex = load_examples(&train, dims.max_passage_len)?;
            let dev_ex = load_examples(&dev, dims.max_passage_len)?;
            let vocab = build_vocab(&train_ex, dims.min_count);
            let cfg = train_opts.to_config(common.seed);
            let model_cfg = model_config(&dims, &vocab);
            let rows = run_k_sweep(&vocab, &train_ex, &dev_ex, &cfg, &model_cfg, &parse_ks(&ks)?)?;
            write_variant_table(&dir.join("ksweep.csv"), &rows)?;
            print_variant_table(&rows);
            Ok(())
        }
        Command::GradCheck { seed } => {
            let report = diagnostics::model_grad_check(seed)?;
            println!(
                "max relative error {:.3e} over {} components",
                report.max_rel_err, report.components
            );
            if report.max_rel_err < 1e-4 {
                Ok(())
            } else {
                bail!(
                    "gradient check failed: max relative error {:.3e} at {:?}",
                    report.max_rel_err,
                    report.worst
                )
            }
        }
        Command::DumpAttention {
            common,
            corpus,
            checkpoint,
            limit,
            id,
            k,
            l_max,
            max_passage_len,
        } => {
            let dir = out_dir(&common)?;
            let examples = load_examples(&corpus, max_passage_len)?;
            let state = TrainState::load(&checkpoint)?;
            let vocab = load_vocab(&vocab_path_for(&checkpoint))?;
            let cfg = TrainConfig {
                k,
                l_max,
                seed: common.seed,
                ..TrainConfig::default()
            };
            let att_dir = dir.join("attention");
            fs::create_dir_all(&att_dir)?;
            let mut written = 0usize;
            for ex in &examples {
                if let Some(want) = &id {
                    if ex.id != *want {
                        continue;
                    }
                } else if written >= limit {
                    break;
                }
                let csv_text = attention_csv(&state, &vocab, ex, &cfg)?;
                fs::write(att_dir.join(format!("{}.csv", ex.id)), csv_text)?;
                written += 1;
            }
            println!("wrote {written} attention maps to {}", att_dir.display());
            Ok(())
        }
    }
}

fn write_variant_table(path: &Path, rows: &[VariantRow]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    variant_table_csv(rows, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn print_variant_table(rows: &[VariantRow]) {
    for r in rows {
        println!(
            "{:<22} EM {:>6.2}  F1 {:>6.2}  (n={})",
            r.variant, r.em, r.f1, r.n
        );
    }
}
