//! Exact-match and token-F1 evaluation, the two-stage predictor, report
//! emission, and the ablation / candidate-count experiment drivers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::TrainState;
use crate::data::{tokenize, Example, Vocab};
use crate::error::{Error, Result};
use crate::extraction::{example_span_tables, extract_top_k, Span};
use crate::rl::{token_f1, TrainConfig};
use crate::selection::{score_candidates, FeatureFlags};

/// One answer prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub span: Span,
    pub prob: f64,
}

/// Two-stage prediction: deterministic top-K extraction per passage, then
/// selection scoring; the argmax candidate wins, ties broken by
/// (passage, begin, end). `None` marks an abstain on degenerate input.
pub fn predict(state: &TrainState, vocab: &Vocab, example: &Example, cfg: &TrainConfig) -> Result<Option<Prediction>> {
    if example.passages.iter().all(|p| p.is_empty()) {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let xvars = state.extraction.bind(&mut tape);
    let mut none = None;
    let tables = example_span_tables(&mut tape, &xvars, vocab, example, cfg.l_max, &mut none)?;
    if tables.iter().all(|t| t.spans.is_empty()) {
        return Ok(None);
    }
    let set = extract_top_k(&mut tape, &tables, cfg.k)?;

    let svars = state.selection.bind(&mut tape);
    let fwd = score_candidates(
        &mut tape,
        &svars,
        vocab,
        example,
        &set.spans,
        state.flags,
        &mut none,
    )?;
    let probs = tape.value(fwd.probs);
    // spans come out passage-major and (begin, end)-sorted, so the first
    // strict maximum realizes the tie-break order
    let mut best = 0;
    for j in 1..probs.len() {
        if probs[j] > probs[best] {
            best = j;
        }
    }
    Ok(Some(Prediction {
        text: set.spans[best].text(&example.passages),
        span: set.spans[best],
        prob: probs[best],
    }))
}

/// Extraction-only prediction: the single highest-probability span across
/// all passages. Used to track the first pretraining phase.
pub fn predict_extraction_only(
    state: &TrainState,
    vocab: &Vocab,
    example: &Example,
    cfg: &TrainConfig,
) -> Result<Option<Prediction>> {
    if example.passages.iter().all(|p| p.is_empty()) {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let xvars = state.extraction.bind(&mut tape);
    let mut none = None;
    let tables = example_span_tables(&mut tape, &xvars, vocab, example, cfg.l_max, &mut none)?;
    let mut best: Option<(Span, f64)> = None;
    for (pi, table) in tables.iter().enumerate() {
        for (i, lp) in tape.value(table.log_probs).iter().enumerate() {
            let p = lp.exp();
            let span = Span {
                passage: pi,
                begin: table.spans[i].0,
                end: table.spans[i].1,
            };
            let better = match &best {
                None => true,
                Some((bs, bp)) => p > *bp || (p == *bp && span < *bs),
            };
            if better {
                best = Some((span, p));
            }
        }
    }
    Ok(best.map(|(span, prob)| Prediction {
        text: span.text(&example.passages),
        span,
        prob,
    }))
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub prediction: String,
    pub best_f1: f64,
    pub em: bool,
}

/// Corpus-level report. EM and F1 are percentages; abstentions score zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    pub records: Vec<ExampleRecord>,
}

/// Score one prediction against the gold answers: exact token match flag and
/// the best token F1 over golds.
pub fn score_prediction(prediction: &str, answers: &[String]) -> (bool, f64) {
    let pred = tokenize(prediction);
    let mut em = false;
    let mut best = 0.0f64;
    for gold in answers {
        let g = tokenize(gold);
        if g == pred && !g.is_empty() {
            em = true;
        }
        best = best.max(token_f1(&pred, &g));
    }
    (em, best)
}

/// Evaluate a corpus with an arbitrary predictor.
pub fn evaluate_with(
    corpus: &[Example],
    mut predictor: impl FnMut(&Example) -> Result<Option<Prediction>>,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(corpus.len());
    let (mut em_sum, mut f1_sum) = (0.0, 0.0);
    for ex in corpus {
        let (text, em, f1) = match predictor(ex)? {
            Some(p) => {
                let (em, f1) = score_prediction(&p.text, &ex.answers);
                (p.text, em, f1)
            }
            None => (String::new(), false, 0.0),
        };
        em_sum += f64::from(em as u8);
        f1_sum += f1;
        records.push(ExampleRecord {
            id: ex.id.clone(),
            prediction: text,
            best_f1: f1,
            em,
        });
    }
    let n = corpus.len();
    Ok(EvalReport {
        em: if n == 0 { 0.0 } else { 100.0 * em_sum / n as f64 },
        f1: if n == 0 { 0.0 } else { 100.0 * f1_sum / n as f64 },
        n,
        records,
    })
}

/// Full two-stage evaluation.
pub fn evaluate(
    state: &TrainState,
    vocab: &Vocab,
    corpus: &[Example],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    evaluate_with(corpus, |ex| predict(state, vocab, ex, cfg))
}

/// Extraction-only evaluation.
pub fn evaluate_extraction_only(
    state: &TrainState,
    vocab: &Vocab,
    corpus: &[Example],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    evaluate_with(corpus, |ex| predict_extraction_only(state, vocab, ex, cfg))
}

// ── Report emission ──────────────────────────────────────────────────

pub fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn report_csv(report: &EvalReport, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["id", "prediction", "best_f1", "em"])?;
    for r in &report.records {
        wtr.write_record([
            r.id.as_str(),
            r.prediction.as_str(),
            &format!("{:.6}", r.best_f1),
            if r.em { "1" } else { "0" },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Rows of an experiment table: variant name, metrics, the run seed.
#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn variant_table_csv(rows: &[VariantRow], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["variant", "em", "f1", "n", "seed"])?;
    for r in rows {
        wtr.write_record([
            r.variant.as_str(),
            &format!("{:.4}", r.em),
            &format!("{:.4}", r.f1),
            &r.n.to_string(),
            &r.seed.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

// ── Attention dump ───────────────────────────────────────────────────

/// Correlation attention of one question as CSV: header row and column of
/// candidate texts, body of row-normalized attention weights.
pub fn attention_csv(
    state: &TrainState,
    vocab: &Vocab,
    example: &Example,
    cfg: &TrainConfig,
) -> Result<String> {
    let mut tape = Tape::new();
    let xvars = state.extraction.bind(&mut tape);
    let mut none = None;
    let tables = example_span_tables(&mut tape, &xvars, vocab, example, cfg.l_max, &mut none)?;
    let set = extract_top_k(&mut tape, &tables, cfg.k)?;
    let svars = state.selection.bind(&mut tape);
    let fwd = score_candidates(
        &mut tape,
        &svars,
        vocab,
        example,
        &set.spans,
        state.flags,
        &mut none,
    )?;
    let texts: Vec<String> = set.spans.iter().map(|s| s.text(&example.passages)).collect();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(texts.iter().cloned());
    wtr.write_record(&header)?;
    for (j, row) in fwd.attention.iter().enumerate() {
        let mut rec = vec![texts[j].clone()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        wtr.write_record(&rec)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

// ── Experiment drivers ───────────────────────────────────────────────

/// Retrain the selection stage once per feature toggle and evaluate each
/// variant on the dev split. The first row retrains with nothing disabled,
/// so it doubles as the base point of comparison. `only` restricts the run
/// to a subset of variant names.
pub fn run_ablation(
    base: &TrainState,
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    only: Option<&[&str]>,
) -> Result<Vec<VariantRow>> {
    let mut rows = Vec::new();
    for (name, flags) in FeatureFlags::all_variants() {
        if let Some(filter) = only {
            if !filter.contains(&name) {
                continue;
            }
        }
        let mut state = clone_state(base)?;
        state.flags = flags;
        state.reinit_selection();
        crate::rl::pretrain_select(&mut state, vocab, train, dev, cfg, None)?;
        let report = evaluate(&state, vocab, dev, cfg)?;
        rows.push(VariantRow {
            variant: name.to_string(),
            em: report.em,
            f1: report.f1,
            n: report.n,
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

/// Full train-and-evaluate once per candidate count. Entries differ only in
/// K; everything else, including the seed, is shared.
pub fn run_k_sweep(
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    model_cfg: &crate::config::ModelConfig,
    ks: &[usize],
) -> Result<Vec<VariantRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        if !(1..=3).contains(&k) {
            return Err(Error::Config(format!("K must be 1, 2 or 3, got {k}")));
        }
        let mut cfg_k = cfg.clone();
        cfg_k.k = k;
        let (state, _) = crate::rl::train_full_pipeline(model_cfg, vocab, train, dev, &cfg_k)?;
        let report = evaluate(&state, vocab, dev, &cfg_k)?;
        rows.push(VariantRow {
            variant: format!("K={k}"),
            em: report.em,
            f1: report.f1,
            n: report.n,
            seed: cfg_k.seed,
        });
    }
    Ok(rows)
}

fn clone_state(base: &TrainState) -> Result<TrainState> {
    let state = TrainState::new(base.cfg.clone(), base.flags, base.seed);
    for ((_, dst), (_, src)) in state.named_params().iter().zip(base.named_params()) {
        dst.set_data(&src.data_vec());
    }
    Ok(state)
}
