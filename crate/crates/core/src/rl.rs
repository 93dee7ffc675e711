//! Reward shaping, the expected-reward objective, the score-function
//! (REINFORCE) gradient step, likelihood pretraining of both stages, and the
//! joint fine-tuning loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{RmsProp, Tape, Var};
use crate::checkpoint::{derive_rng, stable_hash, TrainState};
use crate::config::ModelConfig;
use crate::data::{tokenize, Example, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_extraction_only};
use crate::extraction::{
    candidate_set_log_prob, example_span_tables, extract_top_k, sample_k_without_replacement,
    CandidateDumpEntry, ExtractionVars, Span, SpanTable, TrainCtx,
};
use crate::selection::{mle_select_loss, score_candidates, SelectionVars};

pub const REWARD_EXACT: f64 = 2.0;
pub const REWARD_DISJOINT: f64 = -1.0;

// ── Reward ───────────────────────────────────────────────────────────

/// Word-level F1 over token multisets. Zero when either side is empty or
/// nothing overlaps.
pub fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::HashMap<&str, i64> = std::collections::HashMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Three-branch reward against one gold: exact token match scores 2, partial
/// overlap scores word F1, disjoint scores -1.
fn reward_single(cand: &[String], gold: &[String]) -> f64 {
    if cand == gold && !cand.is_empty() {
        return REWARD_EXACT;
    }
    let f1 = token_f1(cand, gold);
    if f1 > 0.0 {
        f1
    } else {
        REWARD_DISJOINT
    }
}

/// Reward of a candidate against all golds: the maximum single-gold reward.
pub fn reward(cand: &[String], golds: &[Vec<String>]) -> f64 {
    golds
        .iter()
        .map(|g| reward_single(cand, g))
        .fold(f64::NEG_INFINITY, f64::max)
}

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Candidates extracted per passage.
    pub k: usize,
    /// Maximum candidate span length in tokens.
    pub l_max: usize,
    pub batch_extract: usize,
    pub batch_select: usize,
    pub batch_rl: usize,
    pub lr_pretrain: f64,
    pub lr_rl: f64,
    pub dropout: f64,
    pub epochs_extract: usize,
    pub epochs_select: usize,
    pub epochs_rl: usize,
    /// Dev evaluations without improvement before the joint loop stops.
    pub patience: usize,
    pub seed: u64,
    /// Moving-average reward baseline for the score-function term.
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            l_max: 8,
            batch_extract: 30,
            batch_select: 20,
            batch_rl: 5,
            lr_pretrain: 2e-3,
            lr_rl: 1e-4,
            dropout: 0.1,
            epochs_extract: 10,
            epochs_select: 10,
            epochs_rl: 10,
            patience: 3,
            seed: 0,
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.k) {
            return Err(Error::Config(format!("K must be 1, 2 or 3, got {}", self.k)));
        }
        if self.l_max == 0 {
            return Err(Error::Config("l_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.batch_extract == 0 || self.batch_select == 0 || self.batch_rl == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
}

/// What a training phase hands back.
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub best_dev_em: f64,
    pub best_dev_f1: f64,
}

fn tokenized_answers(example: &Example) -> Vec<Vec<String>> {
    example.answers.iter().map(|a| tokenize(a)).collect()
}

// ── Expected reward by exhaustive enumeration ────────────────────────

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Negative expected reward, with the expectation over candidate sets taken
/// exactly by enumerating every per-passage span subset. Refuses instances
/// whose enumeration exceeds `budget` sets.
#[allow(clippy::too_many_arguments)]
pub fn expected_reward_loss(
    tape: &mut Tape,
    xvars: &ExtractionVars,
    svars: &SelectionVars,
    vocab: &Vocab,
    example: &Example,
    cfg: &TrainConfig,
    budget: usize,
) -> Result<Var> {
    let mut none = None;
    let tables = example_span_tables(tape, xvars, vocab, example, cfg.l_max, &mut none)?;
    let per_passage: Vec<Vec<Vec<usize>>> = tables
        .iter()
        .map(|t| combinations(t.spans.len(), cfg.k.min(t.spans.len())))
        .collect();
    let total: usize = per_passage.iter().map(Vec::len).product();
    if total == 0 {
        return Err(Error::InvalidParam("no candidate sets to enumerate".into()));
    }
    if total > budget {
        return Err(Error::EnumerationBudget { size: total, budget });
    }
    let golds = tokenized_answers(example);

    let mut acc: Option<Var> = None;
    let mut odo = vec![0usize; per_passage.len()];
    loop {
        let chosen: Vec<Vec<usize>> = odo
            .iter()
            .zip(&per_passage)
            .map(|(&i, subsets)| subsets[i].clone())
            .collect();
        let spans = flatten_spans(&tables, &chosen);
        let set_lp = candidate_set_log_prob(tape, &tables, &chosen)?;
        let p_set = tape.exp(set_lp);
        let fwd = score_candidates(tape, svars, vocab, example, &spans, Default::default(), &mut none)?;
        let rewards: Vec<f64> = spans
            .iter()
            .map(|s| reward(s.tokens(&example.passages), &golds))
            .collect();
        let r_const = tape.vector(rewards);
        let er = tape.dot(fwd.probs, r_const)?;
        let contrib = tape.mul(p_set, er)?;
        acc = Some(match acc {
            None => contrib,
            Some(a) => tape.add(a, contrib)?,
        });

        // odometer increment
        let mut d = 0;
        loop {
            if d == odo.len() {
                let acc = acc.expect("at least one set");
                return Ok(tape.scale(acc, -1.0));
            }
            odo[d] += 1;
            if odo[d] < per_passage[d].len() {
                break;
            }
            odo[d] = 0;
            d += 1;
        }
    }
}

fn flatten_spans(tables: &[SpanTable], chosen: &[Vec<usize>]) -> Vec<Span> {
    let mut spans = Vec::new();
    for (pi, (table, idxs)) in tables.iter().zip(chosen).enumerate() {
        for &i in idxs {
            spans.push(Span {
                passage: pi,
                begin: table.spans[i].0,
                end: table.spans[i].1,
            });
        }
    }
    spans
}

// ── Score-function gradient ──────────────────────────────────────────

/// Loss for one example under a fixed candidate choice: the differentiable
/// selection term plus the score-function term, in which the expected
/// selection reward enters as a constant multiplier.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_loss_for_choice(
    tape: &mut Tape,
    svars: &SelectionVars,
    vocab: &Vocab,
    example: &Example,
    tables: &[SpanTable],
    chosen: &[Vec<usize>],
    rewards: &[f64],
    baseline: f64,
    ctx: &mut Option<&mut TrainCtx<'_>>,
) -> Result<(Var, f64)> {
    let spans = flatten_spans(tables, chosen);
    debug_assert_eq!(spans.len(), rewards.len());
    let fwd = score_candidates(tape, svars, vocab, example, &spans, Default::default(), ctx)?;
    let r_const = tape.vector(rewards.to_vec());
    let expected = tape.dot(fwd.probs, r_const)?;
    let ret = tape.scalar_value(expected);
    let selection_term = tape.scale(expected, -1.0);
    let set_lp = candidate_set_log_prob(tape, tables, chosen)?;
    let extraction_term = tape.scale(set_lp, -(ret - baseline));
    let loss = tape.add(selection_term, extraction_term)?;
    Ok((loss, ret))
}

/// One sampled-step report.
struct ExampleStep {
    loss: f64,
    expected_reward: f64,
}

/// Sample a candidate set, build the policy-gradient loss, and push the
/// scaled gradients. Returns `None` for examples with no spans at all.
#[allow(clippy::too_many_arguments)]
fn reinforce_example(
    state: &TrainState,
    vocab: &Vocab,
    example: &Example,
    cfg: &TrainConfig,
    step: u64,
    scale: f64,
    baseline: f64,
) -> Result<Option<ExampleStep>> {
    let mut rng = derive_rng(cfg.seed, "rl", step, stable_hash(&example.id));
    let mut tape = Tape::new();
    let xvars = state.extraction.bind(&mut tape);
    let svars = state.selection.bind(&mut tape);

    let mut ctx = TrainCtx {
        dropout: cfg.dropout,
        rng: &mut rng,
    };
    let mut ctx_opt = Some(&mut ctx);
    let tables = example_span_tables(&mut tape, &xvars, vocab, example, cfg.l_max, &mut ctx_opt)?;
    if tables.iter().all(|t| t.spans.is_empty()) {
        return Ok(None);
    }
    // passages with fewer spans than K contribute everything they have
    let mut chosen = Vec::with_capacity(tables.len());
    {
        let ctx_ref = ctx_opt.as_mut().expect("training ctx");
        for table in &tables {
            let probs = table.probs(&tape);
            let take = cfg.k.min(probs.len());
            chosen.push(sample_k_without_replacement(&probs, take, ctx_ref.rng)?);
        }
    }
    let golds = tokenized_answers(example);
    let spans = flatten_spans(&tables, &chosen);
    let rewards: Vec<f64> = spans
        .iter()
        .map(|s| reward(s.tokens(&example.passages), &golds))
        .collect();
    let (loss, ret) = reinforce_loss_for_choice(
        &mut tape, &svars, vocab, example, &tables, &chosen, &rewards, baseline, &mut ctx_opt,
    )?;
    let scaled = tape.scale(loss, scale);
    tape.backward(scaled)?;
    Ok(Some(ExampleStep {
        loss: tape.scalar_value(loss),
        expected_reward: ret,
    }))
}

/// One policy-gradient batch update.
pub fn reinforce_step(
    state: &mut TrainState,
    vocab: &Vocab,
    batch: &[Example],
    cfg: &TrainConfig,
    baseline: f64,
) -> Result<StepRecord> {
    state.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut used = 0usize;
    for ex in batch {
        if let Some(es) = reinforce_example(state, vocab, ex, cfg, state.step, scale, baseline)? {
            loss_sum += es.loss;
            reward_sum += es.expected_reward;
            used += 1;
        }
    }
    if used > 0 {
        let params: Vec<_> = state.named_params().into_iter().map(|(_, p)| p).collect();
        state.optimizer.step(&params)?;
    }
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        phase: "rl".to_string(),
        loss: if used == 0 { 0.0 } else { loss_sum / used as f64 },
        mean_reward: if used == 0 { 0.0 } else { reward_sum / used as f64 },
        dev_em: None,
        dev_f1: None,
    })
}

// ── Pretraining ──────────────────────────────────────────────────────

fn shuffled_indices(n: usize, seed: u64, stream: &str, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, stream, epoch, 0);
    idx.shuffle(&mut rng);
    idx
}

/// Track the best dev exact match seen so far, snapshotting parameters.
struct BestTracker {
    em: f64,
    f1: f64,
    snapshot: Option<Vec<Vec<f64>>>,
}

impl BestTracker {
    fn new() -> Self {
        BestTracker {
            em: f64::NEG_INFINITY,
            f1: 0.0,
            snapshot: None,
        }
    }

    fn observe(&mut self, state: &TrainState, em: f64, f1: f64) -> bool {
        if em > self.em {
            self.em = em;
            self.f1 = f1;
            self.snapshot = Some(state.snapshot());
            true
        } else {
            false
        }
    }

    fn restore_best(&self, state: &TrainState) {
        if let Some(s) = &self.snapshot {
            state.restore(s);
        }
    }
}

/// Maximum-likelihood pretraining of the extraction stage on gold-bearing
/// passages. Tracks dev EM with extraction-only prediction and restores the
/// best parameters before returning.
pub fn pretrain_extract(
    state: &mut TrainState,
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    state.optimizer = RmsProp::new(cfg.lr_pretrain);
    let params: Vec<_> = state.extraction.named().into_iter().map(|(_, p)| p).collect();
    let mut records = Vec::new();
    let mut best = BestTracker::new();

    for epoch in 0..cfg.epochs_extract {
        let order = shuffled_indices(train.len(), cfg.seed, "shuffle-extract", epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_extract) {
            // examples without any gold occurrence are skipped, so count the
            // contributors first to scale the batch mean
            let contributors: Vec<usize> = chunk
                .iter()
                .copied()
                .filter(|&i| {
                    let ex = &train[i];
                    let answers = tokenized_answers(ex);
                    ex.passages
                        .iter()
                        .any(|p| !crate::extraction::gold_occurrences(p, &answers, cfg.l_max).is_empty())
                })
                .collect();
            if contributors.is_empty() {
                continue;
            }
            state.zero_grads();
            let scale = 1.0 / contributors.len() as f64;
            let mut batch_loss = 0.0;
            for &i in &contributors {
                let ex = &train[i];
                let mut rng = derive_rng(cfg.seed, "dropout-extract", state.step, stable_hash(&ex.id));
                let mut tape = Tape::new();
                let xvars = state.extraction.bind(&mut tape);
                let mut ctx = TrainCtx {
                    dropout: cfg.dropout,
                    rng: &mut rng,
                };
                let mut ctx_opt = Some(&mut ctx);
                let loss = crate::extraction::mle_extract_loss(
                    &mut tape, &xvars, vocab, ex, cfg.l_max, &mut ctx_opt,
                )?
                .expect("contributor has gold");
                batch_loss += tape.scalar_value(loss);
                let scaled = tape.scale(loss, scale);
                tape.backward(scaled)?;
            }
            state.optimizer.step(&params)?;
            state.step += 1;
            epoch_loss += batch_loss / contributors.len() as f64;
            batches += 1;
        }
        let report = evaluate_extraction_only(state, vocab, dev, cfg)?;
        best.observe(state, report.em, report.f1);
        records.push(StepRecord {
            step: state.step,
            phase: "pretrain-extract".to_string(),
            loss: if batches == 0 { 0.0 } else { epoch_loss / batches as f64 },
            mean_reward: 0.0,
            dev_em: Some(report.em),
            dev_f1: Some(report.f1),
        });
    }
    best.restore_best(state);
    Ok(TrainOutcome {
        records,
        best_dev_em: best.em.max(0.0),
        best_dev_f1: best.f1,
    })
}

/// Deterministic top-K candidates of the frozen extractor for every example.
pub fn top_k_candidates(
    state: &TrainState,
    vocab: &Vocab,
    corpus: &[Example],
    cfg: &TrainConfig,
) -> Result<Vec<CandidateDumpEntry>> {
    corpus
        .iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let xvars = state.extraction.bind(&mut tape);
            let mut none = None;
            let tables = example_span_tables(&mut tape, &xvars, vocab, ex, cfg.l_max, &mut none)?;
            let set = extract_top_k(&mut tape, &tables, cfg.k)?;
            Ok(CandidateDumpEntry::from_set(ex, &set))
        })
        .collect()
}

fn spans_of_entry(entry: &CandidateDumpEntry) -> Vec<Span> {
    entry
        .candidates
        .iter()
        .map(|c| Span {
            passage: c.passage,
            begin: c.begin,
            end: c.end,
        })
        .collect()
}

/// Maximum-likelihood pretraining of the selection stage on the frozen
/// extractor's top-K candidates (or on externally supplied candidate dumps
/// in isolated-training mode).
pub fn pretrain_select(
    state: &mut TrainState,
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    dump: Option<&[CandidateDumpEntry]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    // candidate sets are fixed for the whole phase
    let owned;
    let entries: &[CandidateDumpEntry] = match dump {
        Some(d) => d,
        None => {
            owned = top_k_candidates(state, vocab, train, cfg)?;
            &owned
        }
    };
    let candidate_spans: Vec<Vec<Span>> = train
        .iter()
        .map(|ex| {
            entries
                .iter()
                .find(|e| e.id == ex.id)
                .map(spans_of_entry)
                .unwrap_or_default()
        })
        .collect();

    state.optimizer = RmsProp::new(cfg.lr_pretrain);
    let params: Vec<_> = state.selection.named().into_iter().map(|(_, p)| p).collect();
    let mut records = Vec::new();
    let mut best = BestTracker::new();

    for epoch in 0..cfg.epochs_select {
        let order = shuffled_indices(train.len(), cfg.seed, "shuffle-select", epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_select) {
            let contributors: Vec<usize> = chunk
                .iter()
                .copied()
                .filter(|&i| {
                    !candidate_spans[i].is_empty()
                        && !crate::selection::gold_matching_candidates(&train[i], &candidate_spans[i])
                            .is_empty()
                })
                .collect();
            if contributors.is_empty() {
                continue;
            }
            state.zero_grads();
            let scale = 1.0 / contributors.len() as f64;
            let mut batch_loss = 0.0;
            for &i in &contributors {
                let ex = &train[i];
                let mut rng = derive_rng(cfg.seed, "dropout-select", state.step, stable_hash(&ex.id));
                let mut tape = Tape::new();
                let svars = state.selection.bind(&mut tape);
                let mut ctx = TrainCtx {
                    dropout: cfg.dropout,
                    rng: &mut rng,
                };
                let mut ctx_opt = Some(&mut ctx);
                let loss = mle_select_loss(
                    &mut tape,
                    &svars,
                    vocab,
                    ex,
                    &candidate_spans[i],
                    state.flags,
                    &mut ctx_opt,
                )?
                .expect("contributor has matching candidate");
                batch_loss += tape.scalar_value(loss);
                let scaled = tape.scale(loss, scale);
                tape.backward(scaled)?;
            }
            state.optimizer.step(&params)?;
            state.step += 1;
            epoch_loss += batch_loss / contributors.len() as f64;
            batches += 1;
        }
        let report = evaluate(state, vocab, dev, cfg)?;
        best.observe(state, report.em, report.f1);
        records.push(StepRecord {
            step: state.step,
            phase: "pretrain-select".to_string(),
            loss: if batches == 0 { 0.0 } else { epoch_loss / batches as f64 },
            mean_reward: 0.0,
            dev_em: Some(report.em),
            dev_f1: Some(report.f1),
        });
    }
    best.restore_best(state);
    Ok(TrainOutcome {
        records,
        best_dev_em: best.em.max(0.0),
        best_dev_f1: best.f1,
    })
}

// ── Joint fine-tuning ────────────────────────────────────────────────

/// Policy-gradient fine-tuning of both stages. Evaluates on dev once per
/// epoch, keeps the best parameters, and stops early after `patience`
/// evaluations without improvement.
pub fn joint_train(
    state: &mut TrainState,
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    state.optimizer = RmsProp::new(cfg.lr_rl);
    let mut records = Vec::new();
    let mut best = BestTracker::new();
    // the pretrained starting point competes for the checkpoint too
    let init_report = evaluate(state, vocab, dev, cfg)?;
    best.observe(state, init_report.em, init_report.f1);
    let mut stale = 0usize;
    let mut baseline = 0.0f64;

    'epochs: for epoch in 0..cfg.epochs_rl {
        let order = shuffled_indices(train.len(), cfg.seed, "shuffle-rl", epoch as u64);
        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_rl) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let b = if cfg.baseline { baseline } else { 0.0 };
            let rec = reinforce_step(state, vocab, &batch, cfg, b)?;
            if cfg.baseline {
                baseline = 0.9 * baseline + 0.1 * rec.mean_reward;
            }
            reward_sum += rec.mean_reward;
            loss_sum += rec.loss;
            steps += 1;
        }
        let report = evaluate(state, vocab, dev, cfg)?;
        let improved = best.observe(state, report.em, report.f1);
        records.push(StepRecord {
            step: state.step,
            phase: "rl".to_string(),
            loss: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
            mean_reward: if steps == 0 { 0.0 } else { reward_sum / steps as f64 },
            dev_em: Some(report.em),
            dev_f1: Some(report.f1),
        });
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break 'epochs;
            }
        }
    }
    best.restore_best(state);
    Ok(TrainOutcome {
        records,
        best_dev_em: best.em.max(0.0),
        best_dev_f1: best.f1,
    })
}

/// The whole schedule: likelihood pretraining of both stages, then joint
/// policy-gradient fine-tuning.
pub fn train_full_pipeline(
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut state = TrainState::new(model_cfg.clone(), Default::default(), cfg.seed);
    let mut records = Vec::new();
    let a = pretrain_extract(&mut state, vocab, train, dev, cfg)?;
    records.extend(a.records);
    let b = pretrain_select(&mut state, vocab, train, dev, cfg, None)?;
    records.extend(b.records);
    let c = joint_train(&mut state, vocab, train, dev, cfg)?;
    records.extend(c.records);
    Ok((state, records))
}

/// Serialize step records as JSON lines.
pub fn records_jsonl(records: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
