//! Candidate extraction: encode question and passage, score every bounded
//! subspan, and expose the per-candidate and candidate-set distributions that
//! the selection stage and the policy-gradient training build on.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilstm, BiLstm, BiLstmVars, Param, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::data::{detokenize, Example, Vocab};
use crate::error::{Error, Result};

/// Inclusive token span inside one passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub passage: usize,
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.begin + 1
    }

    pub fn is_empty(&self) -> bool {
        false // begin <= end by construction
    }

    pub fn text(&self, passages: &[Vec<String>]) -> String {
        detokenize(&passages[self.passage][self.begin..=self.end])
    }

    pub fn tokens<'a>(&self, passages: &'a [Vec<String>]) -> &'a [String] {
        &passages[self.passage][self.begin..=self.end]
    }
}

/// How a candidate set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    TopK,
    Sampled,
}

/// The pooled candidates of one question: up to K spans per passage.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub spans: Vec<Span>,
    pub span_log_probs: Vec<f64>,
    pub set_log_prob: f64,
    pub provenance: Provenance,
}

// ── Parameters ───────────────────────────────────────────────────────

/// Learned tensors of the extraction stage.
pub struct ExtractionParams {
    pub emb: Param,       // [vocab, d_word]
    pub ctx_enc: BiLstm,  // d_word -> 2H, shared by question and passage
    pub fuse_enc: BiLstm, // 4H -> 2H
    pub w_begin: Param,   // [1, 2H]
    pub w_end: Param,     // [1, 2H]
}

impl ExtractionParams {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.d_hidden;
        ExtractionParams {
            emb: Param::new(Tensor::uniform(vec![cfg.vocab, cfg.d_word], 0.1, rng)),
            ctx_enc: BiLstm::new(cfg.d_word, h, rng),
            fuse_enc: BiLstm::new(4 * h, h, rng),
            w_begin: Param::new(Tensor::xavier(1, 2 * h, rng)),
            w_end: Param::new(Tensor::xavier(1, 2 * h, rng)),
        }
    }

    pub fn named(&self) -> Vec<(String, Param)> {
        let mut out = vec![("extraction.emb".to_string(), self.emb.clone())];
        out.extend(self.ctx_enc.named("extraction.ctx_enc"));
        out.extend(self.fuse_enc.named("extraction.fuse_enc"));
        out.push(("extraction.w_begin".to_string(), self.w_begin.clone()));
        out.push(("extraction.w_end".to_string(), self.w_end.clone()));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ExtractionVars {
        ExtractionVars {
            emb: tape.param(&self.emb),
            ctx_enc: self.ctx_enc.bind(tape),
            fuse_enc: self.fuse_enc.bind(tape),
            w_begin: tape.param(&self.w_begin),
            w_end: tape.param(&self.w_end),
        }
    }
}

/// Tape-bound extraction weights.
pub struct ExtractionVars {
    pub emb: Var,
    pub ctx_enc: BiLstmVars,
    pub fuse_enc: BiLstmVars,
    pub w_begin: Var,
    pub w_end: Var,
}

/// Dropout context for training forwards; `None` everywhere means eval.
pub struct TrainCtx<'a> {
    pub dropout: f64,
    pub rng: &'a mut rand_chacha::ChaCha8Rng,
}

fn apply_dropout(tape: &mut Tape, v: Var, ctx: &mut Option<&mut TrainCtx<'_>>) -> Result<Var> {
    match ctx {
        Some(c) => tape.dropout(v, c.dropout, true, c.rng),
        None => Ok(v),
    }
}

// ── Encoding ─────────────────────────────────────────────────────────

/// Contextual question encoding `[2H, l_Q]`.
pub fn encode_question(
    tape: &mut Tape,
    vars: &ExtractionVars,
    q_ids: &[usize],
    ctx: &mut Option<&mut TrainCtx<'_>>,
) -> Result<Var> {
    if q_ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let q_emb = tape.embed(vars.emb, q_ids)?;
    let q_emb = apply_dropout(tape, q_emb, ctx)?;
    bilstm(tape, q_emb, &vars.ctx_enc)
}

/// Question-aware passage encoding `[2H, l_P]`: contextual passage states,
/// attention over question positions, and a second encoder over the
/// concatenation.
pub fn encode_passage(
    tape: &mut Tape,
    vars: &ExtractionVars,
    q_ctx: Var,
    p_ids: &[usize],
    ctx: &mut Option<&mut TrainCtx<'_>>,
) -> Result<Var> {
    if p_ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let p_emb = tape.embed(vars.emb, p_ids)?;
    let p_emb = apply_dropout(tape, p_emb, ctx)?;
    let p_ctx = bilstm(tape, p_emb, &vars.ctx_enc)?;
    let attended = attend_columns(tape, q_ctx, p_ctx)?;
    let joined = tape.concat_rows(&[p_ctx, attended])?;
    let joined = apply_dropout(tape, joined, ctx)?;
    bilstm(tape, joined, &vars.fuse_enc)
}

/// For each column of `target`, softmax-attend over the columns of `source`
/// by dot product and return the attention-weighted sums: the output has the
/// width of `source` rows and the length of `target` columns.
pub fn attend_columns(tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
    let l_tgt = tape.shape(target)[1];
    let l_src = tape.shape(source)[1];
    let st = tape.transpose(source)?; // [l_src, d]
    let scores = tape.matmul(st, target)?; // [l_src, l_tgt]
    let mask = vec![true; l_src];
    let mut cols = Vec::with_capacity(l_tgt);
    for t in 0..l_tgt {
        let col = tape.col(scores, t)?;
        cols.push(tape.softmax_masked(col, &mask)?);
    }
    let att = tape.stack_cols(&cols)?; // [l_src, l_tgt]
    tape.matmul(source, att)
}

// ── Span distribution ────────────────────────────────────────────────

/// All `(begin, end)` pairs with `begin <= end` and length at most `l_max`,
/// ordered by (begin, end).
pub fn valid_spans(len: usize, l_max: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..len {
        for e in b..len.min(b + l_max) {
            out.push((b, e));
        }
    }
    out
}

/// Normalized log-probabilities over the valid spans of one passage.
pub struct SpanTable {
    pub spans: Vec<(usize, usize)>,
    pub log_probs: Var,
}

impl SpanTable {
    pub fn probs(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.log_probs).iter().map(|lp| lp.exp()).collect()
    }

    pub fn index_of(&self, begin: usize, end: usize) -> Option<usize> {
        self.spans.iter().position(|&(b, e)| b == begin && e == end)
    }
}

/// Score spans from per-position begin/end score rows. Every valid span's
/// probability is `exp(b[begin] + e[end])`, normalized over all valid spans.
pub fn span_table_from_scores(
    tape: &mut Tape,
    begin_scores: Var,
    end_scores: Var,
    l_max: usize,
) -> Result<SpanTable> {
    let len = tape.shape(begin_scores)[0];
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let spans = valid_spans(len, l_max);
    let begins: Vec<usize> = spans.iter().map(|s| s.0).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.1).collect();
    let b = tape.gather(begin_scores, &begins)?;
    let e = tape.gather(end_scores, &ends)?;
    let scores = tape.add(b, e)?;
    let lse = tape.logsumexp(scores)?;
    let lse_row = tape.broadcast_col(lse, spans.len())?;
    let lse_vec = tape.reshape(lse_row, vec![spans.len()])?;
    let log_probs = tape.sub(scores, lse_vec)?;
    Ok(SpanTable { spans, log_probs })
}

/// Full span distribution of one passage from its question-aware encoding.
pub fn span_table(
    tape: &mut Tape,
    vars: &ExtractionVars,
    passage_ctx: Var,
    l_max: usize,
) -> Result<SpanTable> {
    let l = tape.shape(passage_ctx)[1];
    let b_row = tape.matmul(vars.w_begin, passage_ctx)?;
    let e_row = tape.matmul(vars.w_end, passage_ctx)?;
    let b = tape.reshape(b_row, vec![l])?;
    let e = tape.reshape(e_row, vec![l])?;
    span_table_from_scores(tape, b, e, l_max)
}

/// Encode a whole example and return one span table per passage.
pub fn example_span_tables(
    tape: &mut Tape,
    vars: &ExtractionVars,
    vocab: &Vocab,
    example: &Example,
    l_max: usize,
    ctx: &mut Option<&mut TrainCtx<'_>>,
) -> Result<Vec<SpanTable>> {
    let q_ids = vocab.ids(&example.question);
    let q_ctx = encode_question(tape, vars, &q_ids, ctx)?;
    example
        .passages
        .iter()
        .map(|p| {
            let p_ids = vocab.ids(p);
            let enc = encode_passage(tape, vars, q_ctx, &p_ids, ctx)?;
            span_table(tape, vars, enc, l_max)
        })
        .collect()
}

// ── Candidate choice ─────────────────────────────────────────────────

/// The `k` highest-probability spans, ties broken by (begin, end).
pub fn top_k_spans(table: &SpanTable, tape: &Tape, k: usize) -> Result<Vec<usize>> {
    if table.spans.len() < k {
        return Err(Error::DegeneratePassage {
            needed: k,
            available: table.spans.len(),
        });
    }
    let lp = tape.value(table.log_probs);
    let mut idx: Vec<usize> = (0..table.spans.len()).collect();
    idx.sort_by(|&a, &b| {
        lp[b].partial_cmp(&lp[a])
            .unwrap()
            .then(table.spans[a].cmp(&table.spans[b]))
    });
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Draw `k` distinct spans sequentially, renormalizing over the remainder
/// after each draw. Returns indices in ascending order (the draw order is
/// discarded).
pub fn sample_k_without_replacement(
    probs: &[f64],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if probs.len() < k {
        return Err(Error::DegeneratePassage {
            needed: k,
            available: probs.len(),
        });
    }
    let mut available: Vec<usize> = (0..probs.len()).collect();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = available.iter().map(|&i| probs[i]).sum();
        let pick = if total <= 0.0 {
            0 // all remaining mass underflowed; deterministic fallback
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = available.len() - 1;
            for (j, &i) in available.iter().enumerate() {
                acc += probs[i];
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        };
        chosen.push(available.remove(pick));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Log-probability of drawing exactly this unordered span subset from one
/// passage: the sum over all draw orders of the sequential
/// without-replacement probabilities.
pub fn subset_log_prob(tape: &mut Tape, table: &SpanTable, chosen: &[usize]) -> Result<Var> {
    let k = chosen.len();
    if k == 0 {
        return Err(Error::InvalidParam("empty subset".into()));
    }
    let mut sorted = chosen.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != k {
        return Err(Error::InvalidParam("duplicate span in one passage".into()));
    }
    let all_probs = tape.exp(table.log_probs);
    let total = tape.sum_all(all_probs);
    let picked = tape.gather(all_probs, chosen)?;

    let mut set_prob: Option<Var> = None;
    for perm in permutations(k) {
        let mut term: Option<Var> = None;
        let mut remaining = total;
        for &j in &perm {
            let pj = tape.slice(picked, j, j + 1)?;
            let factor = tape.div(pj, remaining)?;
            term = Some(match term {
                None => factor,
                Some(t) => tape.mul(t, factor)?,
            });
            remaining = tape.sub(remaining, pj)?;
        }
        let term = term.expect("k >= 1");
        set_prob = Some(match set_prob {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    tape.log(set_prob.expect("k >= 1"))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            prefix.push(x);
            go(prefix, rest, out);
            prefix.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..k).collect(), &mut out);
    out
}

/// Joint log-probability of a per-passage choice of span subsets.
pub fn candidate_set_log_prob(
    tape: &mut Tape,
    tables: &[SpanTable],
    chosen_per_passage: &[Vec<usize>],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (table, chosen) in tables.iter().zip(chosen_per_passage) {
        if chosen.is_empty() {
            continue;
        }
        let lp = subset_log_prob(tape, table, chosen)?;
        total = Some(match total {
            None => lp,
            Some(t) => tape.add(t, lp)?,
        });
    }
    total.ok_or_else(|| Error::InvalidParam("no spans chosen in any passage".into()))
}

// ── Gold spans and the extraction likelihood ─────────────────────────

/// All occurrences of any gold answer as a subspan of the passage, capped at
/// `l_max` tokens.
pub fn gold_occurrences(passage: &[String], answers: &[Vec<String>], l_max: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for gold in answers {
        if gold.is_empty() || gold.len() > l_max || gold.len() > passage.len() {
            continue;
        }
        for b in 0..=passage.len() - gold.len() {
            if &passage[b..b + gold.len()] == gold.as_slice() {
                out.push((b, b + gold.len() - 1));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Mean negative log-likelihood of gold spans under the span distribution,
/// over all (passage, occurrence) pairs. `None` when no passage contains a
/// gold answer (the example is skipped, not an error).
pub fn mle_extract_loss(
    tape: &mut Tape,
    vars: &ExtractionVars,
    vocab: &Vocab,
    example: &Example,
    l_max: usize,
    ctx: &mut Option<&mut TrainCtx<'_>>,
) -> Result<Option<Var>> {
    let answers: Vec<Vec<String>> = example
        .answers
        .iter()
        .map(|a| crate::data::tokenize(a))
        .collect();
    let with_gold: Vec<(usize, Vec<(usize, usize)>)> = example
        .passages
        .iter()
        .enumerate()
        .map(|(i, p)| (i, gold_occurrences(p, &answers, l_max)))
        .filter(|(_, occ)| !occ.is_empty())
        .collect();
    if with_gold.is_empty() {
        return Ok(None);
    }

    let q_ids = vocab.ids(&example.question);
    let q_ctx = encode_question(tape, vars, &q_ids, ctx)?;
    let mut terms = Vec::new();
    for (pi, occs) in &with_gold {
        let p_ids = vocab.ids(&example.passages[*pi]);
        let enc = encode_passage(tape, vars, q_ctx, &p_ids, ctx)?;
        let table = span_table(tape, vars, enc, l_max)?;
        for (b, e) in occs {
            let idx = table
                .index_of(*b, *e)
                .expect("gold occurrence is a valid span");
            let lp = tape.slice(table.log_probs, idx, idx + 1)?;
            terms.push(lp);
        }
    }
    let total = tape.concat_rows(&terms)?;
    let mean = tape.mean_all(total);
    Ok(Some(tape.scale(mean, -1.0)))
}

// ── Candidate sets for the selection stage ───────────────────────────

/// Deterministic top-K extraction over all passages. Passages with fewer
/// valid spans than K contribute everything they have.
pub fn extract_top_k(
    tape: &mut Tape,
    tables: &[SpanTable],
    k: usize,
) -> Result<CandidateSet> {
    let mut spans = Vec::new();
    let mut logps = Vec::new();
    let mut chosen_all = Vec::new();
    for (pi, table) in tables.iter().enumerate() {
        let take = k.min(table.spans.len());
        let chosen = top_k_spans(table, tape, take)?;
        for &i in &chosen {
            spans.push(Span {
                passage: pi,
                begin: table.spans[i].0,
                end: table.spans[i].1,
            });
            logps.push(tape.value(table.log_probs)[i]);
        }
        chosen_all.push(chosen);
    }
    let set_lp = candidate_set_log_prob(tape, tables, &chosen_all)?;
    Ok(CandidateSet {
        spans,
        span_log_probs: logps,
        set_log_prob: tape.scalar_value(set_lp),
        provenance: Provenance::TopK,
    })
}

/// Sampled extraction used by policy-gradient training. Returns the chosen
/// indices per passage alongside the flattened candidate set.
pub fn extract_sampled(
    tape: &mut Tape,
    tables: &[SpanTable],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(CandidateSet, Vec<Vec<usize>>)> {
    let mut spans = Vec::new();
    let mut logps = Vec::new();
    let mut chosen_all = Vec::new();
    for (pi, table) in tables.iter().enumerate() {
        let probs = table.probs(tape);
        let take = k.min(probs.len());
        let chosen = sample_k_without_replacement(&probs, take, rng)?;
        for &i in &chosen {
            spans.push(Span {
                passage: pi,
                begin: table.spans[i].0,
                end: table.spans[i].1,
            });
            logps.push(tape.value(table.log_probs)[i]);
        }
        chosen_all.push(chosen);
    }
    let set_lp = candidate_set_log_prob(tape, tables, &chosen_all)?;
    Ok((
        CandidateSet {
            spans,
            span_log_probs: logps,
            set_log_prob: tape.scalar_value(set_lp),
            provenance: Provenance::Sampled,
        },
        chosen_all,
    ))
}

// ── Candidate dump interface ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub passage: usize,
    pub begin: usize,
    pub end: usize,
    pub logp: f64,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDumpEntry {
    pub id: String,
    pub candidates: Vec<CandidateRecord>,
}

impl CandidateDumpEntry {
    pub fn from_set(example: &Example, set: &CandidateSet) -> Self {
        CandidateDumpEntry {
            id: example.id.clone(),
            candidates: set
                .spans
                .iter()
                .zip(&set.span_log_probs)
                .map(|(s, lp)| CandidateRecord {
                    passage: s.passage,
                    begin: s.begin,
                    end: s.end,
                    logp: *lp,
                    text: s.text(&example.passages),
                })
                .collect(),
        }
    }
}

/// One JSON object per question.
pub fn write_candidate_dump(w: &mut impl Write, entries: &[CandidateDumpEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_candidate_dump(r: impl BufRead) -> Result<Vec<CandidateDumpEntry>> {
    r.lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
