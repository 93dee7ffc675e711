//! Deterministic synthetic task generator.
//!
//! Each question asks which entity goes with a set of cue tokens. A
//! cross-evidence question scatters the gold entity's cues over two passages
//! so no single passage covers them all, while one distractor entity
//! co-occurs with a different strict subset of the cues in both of its
//! passages. Answering those questions reliably requires combining evidence
//! across passages; non-cross questions place every cue next to the gold
//! entity in one passage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::Example;
use crate::error::{Error, Result};

pub const NUM_CUES: usize = 3;

/// Generator configuration. Equal configs (including seed) always produce
/// identical corpora.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_entities: usize,
    pub passages_per_question: usize,
    pub passage_len: usize,
    pub cross_fraction: f64,
    pub distractors: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 120,
            num_entities: 24,
            passages_per_question: 5,
            passage_len: 12,
            cross_fraction: 0.5,
            distractors: 1,
            train: 500,
            dev: 100,
            test: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < NUM_CUES + 8 {
            return Err(Error::Config(format!(
                "vocab_size {} too small (need at least {})",
                self.vocab_size,
                NUM_CUES + 8
            )));
        }
        if self.num_entities < 2 || self.passages_per_question == 0 || self.passage_len == 0 {
            return Err(Error::Config("counts must be positive (entities >= 2)".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_fraction) {
            return Err(Error::Config(format!(
                "cross_fraction {} not in [0, 1]",
                self.cross_fraction
            )));
        }
        if self.distractors == 0 {
            return Err(Error::Config("distractors must be positive".into()));
        }
        // worst case one passage holds all cues plus a two-token entity name
        if self.passage_len < NUM_CUES + 2 {
            return Err(Error::Config(format!(
                "cues exceed passage length: need passage_len >= {}, got {}",
                NUM_CUES + 2,
                self.passage_len
            )));
        }
        if self.passages_per_question < 4 {
            return Err(Error::Config(
                "need at least 4 passages per question (two gold, two distractor)".into(),
            ));
        }
        Ok(())
    }
}

struct Pools {
    cues: Vec<String>,
    fillers: Vec<String>,
    entities: Vec<Vec<String>>, // 1-2 token names
}

fn build_pools(cfg: &SynthConfig) -> Pools {
    // a third of the vocab serves as cue stock, the rest as filler
    let cue_stock = (cfg.vocab_size / 3).max(NUM_CUES);
    let cues = (0..cue_stock).map(|i| format!("cue{i}")).collect();
    let fillers = (0..cfg.vocab_size.saturating_sub(cue_stock).max(8))
        .map(|i| format!("w{i}"))
        .collect();
    let mut entities = Vec::with_capacity(cfg.num_entities);
    for i in 0..cfg.num_entities {
        if i % 2 == 0 {
            entities.push(vec![format!("name{i}")]);
        } else {
            entities.push(vec![format!("name{i}"), format!("tag{i}")]);
        }
    }
    Pools {
        cues,
        fillers,
        entities,
    }
}

/// Lay out one passage of exactly `len` tokens: filler everywhere, then the
/// entity name (contiguous) with its cue tokens in the nearest free slots,
/// the way retrieved sentences keep question words around the answer.
fn compose_passage(
    len: usize,
    entity: &[String],
    cues: &[&String],
    fillers: &[String],
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut toks: Vec<String> = (0..len)
        .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
        .collect();
    let ent_at = rng.random_range(0..=len - entity.len());
    let center = ent_at as i64 + entity.len() as i64 / 2;
    let mut free: Vec<usize> = (0..len)
        .filter(|i| *i < ent_at || *i >= ent_at + entity.len())
        .collect();
    free.shuffle(rng);
    free.sort_by_key(|i| (*i as i64 - center).abs());
    assert!(free.len() >= cues.len(), "passage too short for cues");
    for (slot, cue) in free.iter().zip(cues) {
        toks[*slot] = (*cue).clone();
    }
    for (k, e) in entity.iter().enumerate() {
        toks[ent_at + k] = e.clone();
    }
    toks
}

fn filler_passage(len: usize, fillers: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..len)
        .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
        .collect()
}

fn gen_example(
    idx: usize,
    split: &str,
    cross: bool,
    cfg: &SynthConfig,
    pools: &Pools,
    rng: &mut ChaCha8Rng,
) -> Example {
    let n = cfg.passages_per_question;

    // pick three distinct cues and two distinct entities
    let mut cue_ids: Vec<usize> = (0..pools.cues.len()).collect();
    cue_ids.shuffle(rng);
    let cues: Vec<&String> = cue_ids[..NUM_CUES].iter().map(|&i| &pools.cues[i]).collect();
    let mut ent_ids: Vec<usize> = (0..pools.entities.len()).collect();
    ent_ids.shuffle(rng);
    let gold = &pools.entities[ent_ids[0]];
    let distractor = &pools.entities[ent_ids[1]];
    let extra_entities: Vec<&Vec<String>> = ent_ids[2..]
        .iter()
        .take(cfg.distractors.saturating_sub(1))
        .map(|&i| &pools.entities[i])
        .collect();

    let mut passages: Vec<Vec<String>> = Vec::with_capacity(n);
    if cross {
        // gold: {c0, c1} in one passage, {c1, c2} in another; union covers all.
        // distractor: {c0, c2} in both of its passages; union stays strict.
        passages.push(compose_passage(cfg.passage_len, gold, &[cues[0], cues[1]], &pools.fillers, rng));
        passages.push(compose_passage(cfg.passage_len, gold, &[cues[1], cues[2]], &pools.fillers, rng));
        passages.push(compose_passage(cfg.passage_len, distractor, &[cues[0], cues[2]], &pools.fillers, rng));
        passages.push(compose_passage(cfg.passage_len, distractor, &[cues[0], cues[2]], &pools.fillers, rng));
    } else {
        // one passage holds the gold entity with every cue
        passages.push(compose_passage(
            cfg.passage_len,
            gold,
            &[cues[0], cues[1], cues[2]],
            &pools.fillers,
            rng,
        ));
        passages.push(compose_passage(cfg.passage_len, gold, &[cues[1]], &pools.fillers, rng));
        passages.push(compose_passage(cfg.passage_len, distractor, &[cues[0], cues[2]], &pools.fillers, rng));
        passages.push(compose_passage(cfg.passage_len, distractor, &[cues[0], cues[2]], &pools.fillers, rng));
    }
    // remaining passages: cue-free filler, some mentioning an unrelated entity
    let mut extra_iter = extra_entities.iter().cycle();
    while passages.len() < n {
        if !extra_entities.is_empty() && passages.len() % 2 == 0 {
            let ent = extra_iter.next().unwrap();
            passages.push(compose_passage(cfg.passage_len, ent, &[], &pools.fillers, rng));
        } else {
            passages.push(filler_passage(cfg.passage_len, &pools.fillers, rng));
        }
    }
    passages.shuffle(rng);

    let mut question: Vec<String> = vec!["which".into(), "goes".into(), "with".into()];
    for c in &cues {
        question.push((*c).clone());
    }
    question.push("?".into());

    Example {
        id: format!("{split}-{idx}"),
        question,
        answers: vec![gold.join(" ")],
        passages,
    }
}

fn gen_split(
    split: &str,
    count: usize,
    cfg: &SynthConfig,
    pools: &Pools,
    rng: &mut ChaCha8Rng,
) -> Vec<Example> {
    (0..count)
        .map(|i| {
            let cross = rng.random::<f64>() < cfg.cross_fraction;
            gen_example(i, split, cross, cfg, pools, rng)
        })
        .collect()
}

/// Generate train/dev/test splits. Deterministic in the seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    cfg.validate()?;
    let pools = build_pools(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = gen_split("train", cfg.train, cfg, &pools, &mut rng);
    let dev = gen_split("dev", cfg.dev, cfg, &pools, &mut rng);
    let test = gen_split("test", cfg.test, cfg, &pools, &mut rng);
    Ok((train, dev, test))
}
